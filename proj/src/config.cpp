#include "changedet/config.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace changedet {

namespace {

using nlohmann::json;

// Field access with JSON-path error reporting.
template <typename T>
T get_field(const json& j, const std::string& path, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const std::exception& e) {
    throw config_error(path + "." + key, e.what());
  }
}

template <typename T, std::size_t N>
std::array<T, N> get_array(const json& j, const std::string& path, const std::string& key,
                           std::array<T, N> fallback) {
  if (!j.contains(key)) return fallback;
  try {
    auto v = j.at(key).get<std::vector<T>>();
    if (v.size() != N)
      throw validation_error("expected " + std::to_string(N) + " elements, got " +
                             std::to_string(v.size()));
    std::array<T, N> out{};
    std::copy(v.begin(), v.end(), out.begin());
    return out;
  } catch (const config_error&) {
    throw;
  } catch (const std::exception& e) {
    throw config_error(path + "." + key, e.what());
  }
}

DataSection parse_data(const json& j) {
  DataSection d;
  d.had_manifest = get_field<std::string>(j, "data", "had_manifest", "");
  d.wad_manifest = get_field<std::string>(j, "data", "wad_manifest", "");
  d.external_manifest = get_field<std::string>(j, "data", "external_manifest", "");
  d.input_grid = get_array<std::int64_t, 3>(j, "data", "input_grid", d.input_grid);
  d.volume_extension = get_field<std::string>(j, "data", "volume_extension", d.volume_extension);
  for (const auto g : d.input_grid)
    if (g < 1) throw config_error("data.input_grid", "grid components must be >= 1");
  if (d.volume_extension != ".rawvol" && d.volume_extension != ".nii" &&
      d.volume_extension != ".nii.gz")
    throw config_error("data.volume_extension", "expected .rawvol, .nii or .nii.gz");
  return d;
}

SynthSection parse_synth(const json& j, const std::array<std::int64_t, 3>& grid) {
  SynthSection s;
  s.spec.volume_shape = grid;
  s.spec.n_had_subjects = get_field<int>(j, "synth", "n_had_subjects", 0);
  s.spec.n_wad_subjects = get_field<int>(j, "synth", "n_wad_subjects", 0);
  s.spec.n_overlap_subjects = get_field<int>(j, "synth", "n_overlap_subjects", 0);
  s.spec.change_prevalence = get_field<double>(j, "synth", "change_prevalence", 0.5);
  s.spec.weak_noise_rate = get_field<double>(j, "synth", "weak_noise_rate", 0.0);
  s.spec.volume_shape = get_array<std::int64_t, 3>(j, "synth", "volume_shape", s.spec.volume_shape);
  s.spec.noise_sigma = get_field<double>(j, "synth", "noise_sigma", 0.05);
  s.spec.min_timepoints = get_field<int>(j, "synth", "min_timepoints", 2);
  s.spec.max_timepoints = get_field<int>(j, "synth", "max_timepoints", 4);
  s.emit = get_field<std::string>(j, "synth", "emit", "both");
  if (s.emit != "maps" && s.emit != "scans" && s.emit != "both")
    throw config_error("synth.emit", "expected maps, scans or both");
  try {
    if (s.spec.n_had_subjects > 0 || s.spec.n_wad_subjects > 0) s.spec.validate();
  } catch (const std::exception& e) {
    throw config_error("synth", e.what());
  }
  return s;
}

PreprocessSection parse_preprocess(const json& j) {
  PreprocessSection p;
  if (j.contains("inputs")) {
    std::size_t idx = 0;
    for (const auto& entry : j.at("inputs")) {
      const std::string path = "preprocess.inputs[" + std::to_string(idx++) + "]";
      PreprocessInput in;
      in.pairs_csv = get_field<std::string>(entry, path, "pairs_csv", "");
      if (in.pairs_csv.empty()) throw config_error(path + ".pairs_csv", "required");
      try {
        in.cohort = cohort_from_string(get_field<std::string>(entry, path, "cohort", "HAD"));
      } catch (const std::exception& e) {
        throw config_error(path + ".cohort", e.what());
      }
      in.manifest_out = get_field<std::string>(entry, path, "manifest_out", "");
      if (in.manifest_out.empty()) throw config_error(path + ".manifest_out", "required");
      p.inputs.push_back(std::move(in));
    }
  }
  if (j.contains("stages")) {
    std::size_t idx = 0;
    for (const auto& entry : j.at("stages")) {
      const std::string path = "preprocess.stages[" + std::to_string(idx++) + "]";
      StageDescriptor s;
      try {
        s.kind = stage_kind_from_string(get_field<std::string>(entry, path, "kind", ""));
      } catch (const std::exception& e) {
        throw config_error(path + ".kind", e.what());
      }
      const std::string cmd = get_field<std::string>(entry, path, "command", "");
      if (!cmd.empty()) s.executable_hint = cmd;
      s.provenance_note = get_field<std::string>(entry, path, "note", "");
      try {
        s.validate();
      } catch (const std::exception& e) {
        throw config_error(path, e.what());
      }
      p.stages.push_back(std::move(s));
    }
  }
  p.maps_dir = get_field<std::string>(j, "preprocess", "maps_dir", "");
  return p;
}

ArchitectureSpec parse_model(const json& j, const std::array<std::int64_t, 3>& grid) {
  ArchitectureSpec m;
  try {
    m.family = family_from_string(get_field<std::string>(j, "model", "family", "vgg3d"));
  } catch (const std::exception& e) {
    throw config_error("model.family", e.what());
  }
  m.input_shape = grid;
  m.input_shape = get_array<std::int64_t, 3>(j, "model", "input_shape", m.input_shape);
  m.conv_block_channels = get_array<int, 4>(j, "model", "conv_channels", m.conv_block_channels);
  m.fc_widths = get_array<int, 4>(j, "model", "fc_widths", m.fc_widths);
  m.cardinality = get_field<int>(j, "model", "cardinality", m.cardinality);
  m.se_reduction = get_field<int>(j, "model", "se_reduction", m.se_reduction);
  m.stage_depths = get_array<int, 4>(j, "model", "stage_depths", m.stage_depths);
  m.stem_width = get_field<int>(j, "model", "stem_width", m.stem_width);
  m.stage_widths = get_array<int, 4>(j, "model", "stage_widths", m.stage_widths);
  m.dropout = get_field<double>(j, "model", "dropout", m.dropout);
  try {
    m.validate();
  } catch (const std::exception& e) {
    throw config_error("model", e.what());
  }
  return m;
}

TrainSection parse_train(const json& j) {
  TrainSection t;
  t.config.learning_rate = get_field<double>(j, "train", "learning_rate", t.config.learning_rate);
  t.config.weight_decay = get_field<double>(j, "train", "weight_decay", t.config.weight_decay);
  t.config.batch_size = get_field<int>(j, "train", "batch_size", t.config.batch_size);
  t.config.max_epochs = get_field<int>(j, "train", "max_epochs", t.config.max_epochs);
  t.config.early_stop_patience =
      get_field<int>(j, "train", "early_stop_patience", t.config.early_stop_patience);
  t.fold = get_field<int>(j, "train", "fold", 0);
  if (j.contains("augmentation")) {
    const auto& a = j.at("augmentation");
    auto& p = t.augmentation;
    p.flip_prob = get_field<double>(a, "train.augmentation", "flip_prob", p.flip_prob);
    p.noise_prob = get_field<double>(a, "train.augmentation", "noise_prob", p.noise_prob);
    p.noise_sigma = get_field<double>(a, "train.augmentation", "noise_sigma", p.noise_sigma);
    p.zoom_prob = get_field<double>(a, "train.augmentation", "zoom_prob", p.zoom_prob);
    p.zoom_min = get_field<double>(a, "train.augmentation", "zoom_min", p.zoom_min);
    p.zoom_max = get_field<double>(a, "train.augmentation", "zoom_max", p.zoom_max);
    p.elastic_prob = get_field<double>(a, "train.augmentation", "elastic_prob", p.elastic_prob);
    p.elastic_grid_spacing =
        get_field<int>(a, "train.augmentation", "elastic_grid_spacing", p.elastic_grid_spacing);
    p.elastic_magnitude =
        get_field<double>(a, "train.augmentation", "elastic_magnitude", p.elastic_magnitude);
    for (const double prob : {p.flip_prob, p.noise_prob, p.zoom_prob, p.elastic_prob})
      if (!(prob >= 0.0 && prob <= 1.0))
        throw config_error("train.augmentation", "probabilities must lie in [0,1]");
    if (!(p.zoom_min > 0.0 && p.zoom_max >= p.zoom_min))
      throw config_error("train.augmentation", "zoom range must satisfy 0 < min <= max");
  }
  try {
    t.config.validate();
  } catch (const std::exception& e) {
    throw config_error("train", e.what());
  }
  return t;
}

HpoSection parse_hpo(const json& j) {
  HpoSection h;
  try {
    h.sampler = sampler_from_string(get_field<std::string>(j, "hpo", "sampler", "grid"));
  } catch (const std::exception& e) {
    throw config_error("hpo.sampler", e.what());
  }
  if (j.contains("max_trials") && !j.at("max_trials").is_null())
    h.budget.max_trials = get_field<int>(j, "hpo", "max_trials", 0);
  if (j.contains("max_seconds") && !j.at("max_seconds").is_null())
    h.budget.max_seconds = get_field<double>(j, "hpo", "max_seconds", 0.0);
  h.tpe.startup_trials = get_field<int>(j, "hpo", "startup_trials", h.tpe.startup_trials);
  if (j.contains("pruner")) {
    const auto& p = j.at("pruner");
    h.pruner.enabled = get_field<bool>(p, "hpo.pruner", "enabled", h.pruner.enabled);
    h.pruner.min_trials = get_field<int>(p, "hpo.pruner", "min_trials", h.pruner.min_trials);
    h.pruner.warmup_steps = get_field<int>(p, "hpo.pruner", "warmup_steps", h.pruner.warmup_steps);
  }
  if (j.contains("space")) {
    const auto& s = j.at("space");
    if (s.contains("learning_rates"))
      h.space.learning_rates = s.at("learning_rates").get<std::vector<double>>();
    if (s.contains("weight_decays"))
      h.space.weight_decays = s.at("weight_decays").get<std::vector<double>>();
    h.space.tl_active = get_field<bool>(s, "hpo.space", "tl_active", h.space.tl_active);
    if (s.contains("wad_fractions"))
      h.space.wad_fractions = s.at("wad_fractions").get<std::vector<double>>();
  }
  try {
    h.space.validate();
  } catch (const std::exception& e) {
    throw config_error("hpo.space", e.what());
  }
  return h;
}

}  // namespace

ExperimentConfig parse_config_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const std::exception& e) {
    throw config_error("<root>", std::string("invalid JSON: ") + e.what());
  }

  ExperimentConfig c;
  c.seed = get_field<std::uint64_t>(j, "<root>", "seed", 0);
  c.parallelism = get_field<int>(j, "<root>", "parallelism", 1);
  if (c.parallelism < 1) throw config_error("parallelism", "must be >= 1");
  if (j.contains("output"))
    c.output_dir = get_field<std::string>(j.at("output"), "output", "dir", c.output_dir);

  if (j.contains("data")) c.data = parse_data(j.at("data"));
  if (j.contains("synth")) c.synth = parse_synth(j.at("synth"), c.data.input_grid);
  else c.synth.spec.volume_shape = c.data.input_grid;
  if (j.contains("preprocess")) c.preprocess = parse_preprocess(j.at("preprocess"));
  c.model = j.contains("model") ? parse_model(j.at("model"), c.data.input_grid)
                                : [&] {
                                    ArchitectureSpec m;
                                    m.input_shape = c.data.input_grid;
                                    return m;
                                  }();
  if (j.contains("train")) c.train = parse_train(j.at("train"));
  if (j.contains("hpo")) c.hpo = parse_hpo(j.at("hpo"));

  if (j.contains("experiment")) {
    try {
      c.experiment_kind = experiment_kind_from_string(
          get_field<std::string>(j.at("experiment"), "experiment", "kind", "baseline"));
    } catch (const config_error&) {
      throw;
    } catch (const std::exception& e) {
      throw config_error("experiment.kind", e.what());
    }
  }

  if (j.contains("cv")) {
    const auto& cv = j.at("cv");
    c.cv.k = get_field<int>(cv, "cv", "k", c.cv.k);
    c.cv.val_fraction = get_field<double>(cv, "cv", "val_fraction", c.cv.val_fraction);
    c.cv.stratified = get_field<bool>(cv, "cv", "stratified", c.cv.stratified);
    try {
      c.cv.validate();
    } catch (const std::exception& e) {
      throw config_error("cv", e.what());
    }
  }
  c.cv.seed = c.seed;

  if (j.contains("stats")) {
    const auto& s = j.at("stats");
    c.stats.n_permutations = get_field<int>(s, "stats", "n_permutations", c.stats.n_permutations);
    c.stats.alpha = get_field<double>(s, "stats", "alpha", c.stats.alpha);
    if (c.stats.n_permutations < 1) throw config_error("stats.n_permutations", "must be >= 1");
    if (!(c.stats.alpha > 0.0 && c.stats.alpha < 1.0))
      throw config_error("stats.alpha", "must lie in (0,1)");
  }

  if (j.contains("compare")) {
    const auto& s = j.at("compare");
    c.compare.predictions_a = get_field<std::string>(s, "compare", "predictions_a", "");
    c.compare.predictions_b = get_field<std::string>(s, "compare", "predictions_b", "");
    c.compare.name_a = get_field<std::string>(s, "compare", "name_a", c.compare.name_a);
    c.compare.name_b = get_field<std::string>(s, "compare", "name_b", c.compare.name_b);
  }
  if (j.contains("infer")) {
    const auto& s = j.at("infer");
    if (s.contains("checkpoints"))
      c.infer.checkpoints = s.at("checkpoints").get<std::vector<std::string>>();
  }
  if (j.contains("evaluate")) {
    const auto& s = j.at("evaluate");
    c.evaluate.predictions = get_field<std::string>(s, "evaluate", "predictions", "");
  }

  c.resolved_json = j.dump(2);
  return c;
}

ExperimentConfig load_config(const std::string& path,
                             const std::vector<std::string>& overrides) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open config file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();

  json j;
  try {
    j = json::parse(buf.str());
  } catch (const std::exception& e) {
    throw config_error("<root>", std::string("invalid JSON: ") + e.what());
  }

  for (const auto& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos)
      throw config_error("--set", "expected key.path=value, got '" + ov + "'");
    const std::string key = ov.substr(0, eq);
    const std::string value = ov.substr(eq + 1);
    json* node = &j;
    std::size_t start = 0;
    while (true) {
      const std::size_t dot = key.find('.', start);
      const std::string part = key.substr(start, dot - start);
      if (part.empty()) throw config_error("--set", "empty path segment in '" + key + "'");
      if (dot == std::string::npos) {
        json parsed;
        try {
          parsed = json::parse(value);
        } catch (...) {
          parsed = value;  // plain string
        }
        (*node)[part] = parsed;
        break;
      }
      node = &(*node)[part];
      start = dot + 1;
    }
  }
  return parse_config_json(j.dump());
}

}  // namespace changedet
