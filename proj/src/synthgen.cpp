#include "changedet/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <filesystem>
#include <fstream>

#include "changedet/preprocess.hpp"
#include "changedet/rng.hpp"
#include "changedet/text.hpp"

namespace changedet {

std::string to_string(Evolution e) {
  switch (e) {
    case Evolution::stable: return "stable";
    case Evolution::growing: return "growing";
    case Evolution::shrinking: return "shrinking";
  }
  throw validation_error("unreachable evolution");
}

Evolution evolution_from_string(const std::string& s) {
  if (s == "stable") return Evolution::stable;
  if (s == "growing") return Evolution::growing;
  if (s == "shrinking") return Evolution::shrinking;
  throw validation_error("unknown evolution '" + s + "'");
}

namespace {

double radius_at(const SynthSubjectSpec& spec, int t) {
  switch (spec.evolution) {
    case Evolution::stable: return spec.lesion_radius;
    case Evolution::growing:
      return spec.lesion_radius * (1.0 + spec.radius_step_fraction * t);
    case Evolution::shrinking:
      return spec.lesion_radius * (1.0 - spec.radius_step_fraction * t);
  }
  return spec.lesion_radius;
}

}  // namespace

void SynthSubjectSpec::validate() const {
  if (subject_id.empty()) throw validation_error("synthetic subject needs an id");
  if (n_timepoints < 2) throw validation_error("synthetic subject needs >= 2 timepoints");
  if (!(lesion_radius > 0)) throw validation_error("lesion radius must be > 0");
  if (!(noise_sigma >= 0)) throw validation_error("noise sigma must be >= 0");
  if (!(boundary_width > 0)) throw validation_error("boundary width must be > 0");
  for (int t = 0; t < n_timepoints; ++t) {
    const double r = radius_at(*this, t);
    if (!(r > 0)) throw validation_error("lesion radius collapses to zero at timepoint " +
                                         std::to_string(t));
    const double margin = r + 3.0 * boundary_width;
    for (int axis = 0; axis < 3; ++axis) {
      if (lesion_center[axis] - margin < 0.0 ||
          lesion_center[axis] + margin > static_cast<double>(volume_shape[axis] - 1))
        throw validation_error("lesion does not fit inside the volume at timepoint " +
                               std::to_string(t));
    }
  }
}

SubjectSeries generate_longitudinal_subject(const SynthSubjectSpec& spec) {
  spec.validate();
  SubjectSeries series;
  series.volumes.reserve(spec.n_timepoints);
  for (int t = 0; t < spec.n_timepoints; ++t) {
    // Per-timepoint noise stream; the lesion signal is deterministic.
    Rng rng(derive_seed(spec.seed, "synth_noise", static_cast<std::uint64_t>(t)));
    Volume3D v(spec.volume_shape[0], spec.volume_shape[1], spec.volume_shape[2]);
    v.spacing = {1.0, 1.0, 1.0};
    const double r = radius_at(spec, t);
    for (std::int64_t z = 0; z < v.nz(); ++z) {
      for (std::int64_t y = 0; y < v.ny(); ++y) {
        for (std::int64_t x = 0; x < v.nx(); ++x) {
          const double dx = static_cast<double>(x) - spec.lesion_center[0];
          const double dy = static_cast<double>(y) - spec.lesion_center[1];
          const double dz = static_cast<double>(z) - spec.lesion_center[2];
          const double dist = std::sqrt(dx * dx + dy * dy + dz * dz);
          const double lesion =
              spec.lesion_amplitude / (1.0 + std::exp((dist - r) / spec.boundary_width));
          const double noise = spec.noise_sigma > 0 ? rng.normal(0.0, spec.noise_sigma) : 0.0;
          v.at(x, y, z) = lesion + noise;
        }
      }
    }
    series.volumes.push_back(std::move(v));
  }
  for (int t = 0; t + 1 < spec.n_timepoints; ++t)
    series.pair_labels.push_back(spec.evolution == Evolution::stable ? BinaryLabel::stable
                                                                     : BinaryLabel::unstable);
  return series;
}

void SynthCohortSpec::validate() const {
  if (n_had_subjects < 0 || n_wad_subjects < 0 || n_overlap_subjects < 0)
    throw validation_error("subject counts must be >= 0");
  if (n_overlap_subjects > std::min(n_had_subjects, n_wad_subjects))
    throw validation_error("overlap subjects cannot exceed either cohort size");
  if (!(change_prevalence >= 0.0 && change_prevalence <= 1.0))
    throw validation_error("change prevalence must lie in [0,1]");
  if (!(weak_noise_rate >= 0.0 && weak_noise_rate <= 1.0))
    throw validation_error("weak noise rate must lie in [0,1]");
  if (min_timepoints < 2) throw validation_error("min_timepoints must be >= 2");
  if (max_timepoints < min_timepoints)
    throw validation_error("max_timepoints must be >= min_timepoints");
  for (const auto d : volume_shape)
    if (d < 12) throw validation_error("synthetic volumes must be at least 12 voxels per axis");
}

namespace {

struct SubjectPlan {
  SynthSubjectSpec spec;
  std::string map_id_prefix;  // prepended to "<subject>_p<k>"
};

SubjectPlan plan_subject(const SynthCohortSpec& cohort, const std::string& subject_id,
                         const std::string& role, std::uint64_t index,
                         const std::string& map_prefix) {
  Rng rng(derive_seed(cohort.seed, role, index));
  SynthSubjectSpec s;
  s.subject_id = subject_id;
  s.volume_shape = cohort.volume_shape;
  s.noise_sigma = cohort.noise_sigma;
  s.seed = derive_seed(cohort.seed, role + "_series", index);
  s.n_timepoints =
      cohort.min_timepoints +
      static_cast<int>(rng.uniform_int(
          static_cast<std::uint64_t>(cohort.max_timepoints - cohort.min_timepoints + 1)));
  const double min_dim = static_cast<double>(
      std::min({cohort.volume_shape[0], cohort.volume_shape[1], cohort.volume_shape[2]}));
  s.boundary_width = 0.75;
  double margin = std::numeric_limits<double>::infinity();
  for (int axis = 0; axis < 3; ++axis) {
    const double c = static_cast<double>(cohort.volume_shape[axis] - 1) / 2.0;
    s.lesion_center[axis] =
        c + rng.uniform(-0.04, 0.04) * static_cast<double>(cohort.volume_shape[axis]);
    margin = std::min({margin, s.lesion_center[axis],
                       static_cast<double>(cohort.volume_shape[axis] - 1) - s.lesion_center[axis]});
  }
  if (rng.bernoulli(cohort.change_prevalence))
    s.evolution = rng.bernoulli(0.5) ? Evolution::growing : Evolution::shrinking;
  else
    s.evolution = Evolution::stable;
  // Shrinking lesions must not collapse; cap the total shrink at 60%.
  s.radius_step_fraction = std::min(0.25, 0.6 / static_cast<double>(s.n_timepoints - 1));

  // Cap the radius so the lesion (plus smooth boundary) fits at every
  // timepoint, including the final grown one.
  const double growth = s.evolution == Evolution::growing
                            ? 1.0 + s.radius_step_fraction *
                                        static_cast<double>(s.n_timepoints - 1)
                            : 1.0;
  const double cap = (margin - 3.0 * s.boundary_width) / growth;
  s.lesion_radius = std::min(rng.uniform(0.10, 0.15) * min_dim, cap);
  if (!(s.lesion_radius >= 1.0))
    throw validation_error("volume too small to host a synthetic lesion");
  return {std::move(s), map_prefix};
}

Volume3D make_difference_map(const Volume3D& prev, const Volume3D& cur) {
  return absolute_difference(zscore_normalize(prev), zscore_normalize(cur));
}

}  // namespace

CohortBundle generate_cohort(const SynthCohortSpec& spec, std::vector<Volume3D>* had_maps,
                             std::vector<Volume3D>* wad_maps) {
  spec.validate();
  CohortBundle bundle;
  bundle.had.name = CohortName::HAD;
  bundle.wad.name = CohortName::WAD;

  std::vector<SubjectPlan> had_plans;
  for (int i = 0; i < spec.n_had_subjects; ++i) {
    char id[16];
    std::snprintf(id, sizeof(id), "S%04d", i);
    had_plans.push_back(plan_subject(spec, id, "had_subject", static_cast<std::uint64_t>(i), ""));
  }
  std::vector<SubjectPlan> wad_plans;
  for (int i = 0; i < spec.n_wad_subjects; ++i) {
    std::string id;
    if (i < spec.n_overlap_subjects) {
      char buf[16];
      std::snprintf(buf, sizeof(buf), "S%04d", i);
      id = buf;  // same patient as HAD, different scans
    } else {
      char buf[16];
      std::snprintf(buf, sizeof(buf), "W%04d", i);
      id = buf;
    }
    wad_plans.push_back(plan_subject(spec, id, "wad_subject", static_cast<std::uint64_t>(i), "w_"));
  }

  for (const auto& plan : had_plans) {
    const SubjectSeries series = generate_longitudinal_subject(plan.spec);
    for (int k = 0; k + 1 < plan.spec.n_timepoints; ++k) {
      DifferenceMapRecord r;
      r.map_id = plan.map_id_prefix + plan.spec.subject_id + "_p" + std::to_string(k);
      r.subject_id = plan.spec.subject_id;
      r.previous_scan_id = plan.spec.subject_id + "_t" + std::to_string(k);
      r.current_scan_id = plan.spec.subject_id + "_t" + std::to_string(k + 1);
      r.label = series.pair_labels[static_cast<std::size_t>(k)];
      r.provenance = LabelProvenance{ProvenanceKind::human, std::nullopt};
      bundle.had.records.push_back(std::move(r));
      if (had_maps)
        had_maps->push_back(make_difference_map(series.volumes[static_cast<std::size_t>(k)],
                                                series.volumes[static_cast<std::size_t>(k) + 1]));
    }
  }

  Rng flip_rng(derive_seed(spec.seed, "weak_flips"));
  for (const auto& plan : wad_plans) {
    const SubjectSeries series = generate_longitudinal_subject(plan.spec);
    for (int k = 0; k + 1 < plan.spec.n_timepoints; ++k) {
      const BinaryLabel truth = series.pair_labels[static_cast<std::size_t>(k)];
      // Margin model: confidence = 0.5 + 0.5*margin; flip probability scales
      // with (1 - margin) so its mean over records equals weak_noise_rate.
      const double margin = flip_rng.uniform();
      const double confidence = 0.5 + 0.5 * margin;
      const double flip_prob = std::clamp(spec.weak_noise_rate * 2.0 * (1.0 - margin), 0.0, 1.0);
      const bool flip = flip_rng.bernoulli(flip_prob);
      const BinaryLabel weak =
          flip ? (truth == BinaryLabel::stable ? BinaryLabel::unstable : BinaryLabel::stable)
               : truth;

      DifferenceMapRecord r;
      r.map_id = plan.map_id_prefix + plan.spec.subject_id + "_p" + std::to_string(k);
      r.subject_id = plan.spec.subject_id;
      r.previous_scan_id = plan.map_id_prefix + plan.spec.subject_id + "_t" + std::to_string(k);
      r.current_scan_id = plan.map_id_prefix + plan.spec.subject_id + "_t" + std::to_string(k + 1);
      r.label = weak;
      r.provenance = LabelProvenance{ProvenanceKind::weak, confidence};
      bundle.wad.records.push_back(std::move(r));
      bundle.wad_true_labels.push_back(truth);
      if (wad_maps)
        wad_maps->push_back(make_difference_map(series.volumes[static_cast<std::size_t>(k)],
                                                series.volumes[static_cast<std::size_t>(k) + 1]));
    }
  }

  bundle.had.rebuild_index();
  bundle.wad.rebuild_index();
  return bundle;
}

CohortBundle materialize_cohort(const SynthCohortSpec& spec, const std::string& out_dir,
                                const std::string& volume_extension) {
  std::vector<Volume3D> had_maps, wad_maps;
  CohortBundle bundle = generate_cohort(spec, &had_maps, &wad_maps);
  const auto maps_dir = std::filesystem::path(out_dir) / "maps";
  std::filesystem::create_directories(maps_dir);

  for (std::size_t i = 0; i < bundle.had.records.size(); ++i) {
    auto& r = bundle.had.records[i];
    r.volume_path = (maps_dir / (r.map_id + volume_extension)).string();
    save_volume(had_maps[i], r.volume_path);
  }
  for (std::size_t i = 0; i < bundle.wad.records.size(); ++i) {
    auto& r = bundle.wad.records[i];
    r.volume_path = (maps_dir / (r.map_id + volume_extension)).string();
    save_volume(wad_maps[i], r.volume_path);
  }
  bundle.had.validate();
  bundle.wad.validate();

  write_manifest_csv(bundle.had, (std::filesystem::path(out_dir) / "had_manifest.csv").string());
  write_manifest_csv(bundle.wad, (std::filesystem::path(out_dir) / "wad_manifest.csv").string());
  CohortManifest truth = bundle.wad;
  for (std::size_t i = 0; i < truth.records.size(); ++i)
    truth.records[i].label = bundle.wad_true_labels[i];
  write_manifest_csv(truth, (std::filesystem::path(out_dir) / "wad_truth.csv").string());
  return bundle;
}

ScanCohort materialize_scans(const SynthCohortSpec& spec, const std::string& out_dir,
                             const std::string& volume_extension) {
  // Volume generation must match generate_cohort exactly, so a preprocess run
  // over these scans reproduces the in-memory cohort.
  spec.validate();
  ScanCohort out;
  const auto scans_dir = std::filesystem::path(out_dir) / "scans";
  std::filesystem::create_directories(scans_dir);

  CohortBundle bundle = generate_cohort(spec);
  auto emit_series = [&](const SubjectPlan& plan, bool weak, std::size_t first_record) {
    const SubjectSeries series = generate_longitudinal_subject(plan.spec);
    std::vector<std::string> paths;
    for (int t = 0; t < plan.spec.n_timepoints; ++t) {
      const std::string scan_id =
          plan.map_id_prefix + plan.spec.subject_id + "_t" + std::to_string(t);
      const std::string path = (scans_dir / (scan_id + volume_extension)).string();
      save_volume(series.volumes[static_cast<std::size_t>(t)], path);
      paths.push_back(path);
    }
    for (int k = 0; k + 1 < plan.spec.n_timepoints; ++k) {
      const auto& rec = weak ? bundle.wad.records[first_record + static_cast<std::size_t>(k)]
                             : bundle.had.records[first_record + static_cast<std::size_t>(k)];
      ScanPair p;
      p.map_id = rec.map_id;
      p.subject_id = rec.subject_id;
      p.previous_scan_id = rec.previous_scan_id;
      p.current_scan_id = rec.current_scan_id;
      p.true_label = weak ? bundle.wad_true_labels[first_record + static_cast<std::size_t>(k)]
                          : rec.label;
      p.weak_label = rec.label;
      p.confidence = rec.provenance.confidence.value_or(1.0);
      p.previous_path = paths[static_cast<std::size_t>(k)];
      p.current_path = paths[static_cast<std::size_t>(k) + 1];
      (weak ? out.wad_pairs : out.had_pairs).push_back(std::move(p));
    }
  };

  std::size_t offset = 0;
  for (int i = 0; i < spec.n_had_subjects; ++i) {
    char id[16];
    std::snprintf(id, sizeof(id), "S%04d", i);
    const auto plan = plan_subject(spec, id, "had_subject", static_cast<std::uint64_t>(i), "");
    emit_series(plan, false, offset);
    offset += static_cast<std::size_t>(plan.spec.n_timepoints - 1);
  }
  offset = 0;
  for (int i = 0; i < spec.n_wad_subjects; ++i) {
    std::string id;
    char buf[16];
    if (i < spec.n_overlap_subjects)
      std::snprintf(buf, sizeof(buf), "S%04d", i);
    else
      std::snprintf(buf, sizeof(buf), "W%04d", i);
    id = buf;
    const auto plan = plan_subject(spec, id, "wad_subject", static_cast<std::uint64_t>(i), "w_");
    emit_series(plan, true, offset);
    offset += static_cast<std::size_t>(plan.spec.n_timepoints - 1);
  }
  return out;
}

namespace {
constexpr const char* kPairsHeader =
    "map_id,subject_id,previous_scan_id,current_scan_id,label,provenance,confidence,true_label,"
    "previous_path,current_path";
}

void write_pairs_csv(const std::vector<ScanPair>& pairs, const std::string& path,
                     bool weak_columns) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open pairs file for writing: " + path);
  out << kPairsHeader << "\n";
  for (const auto& p : pairs) {
    out << p.map_id << ',' << p.subject_id << ',' << p.previous_scan_id << ','
        << p.current_scan_id << ',';
    if (weak_columns) {
      out << to_string(p.weak_label) << ",weak," << format_compact(p.confidence) << ','
          << to_string(p.true_label);
    } else {
      out << to_string(p.true_label) << ",human,,";
    }
    out << ',' << p.previous_path << ',' << p.current_path << "\n";
  }
  if (!out) throw io_error("failed writing pairs file: " + path);
}

std::vector<ScanPair> read_pairs_csv(const std::string& path, bool weak_columns) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open pairs file: " + path);
  std::string line;
  if (!std::getline(in, line) || trim(line) != kPairsHeader)
    throw validation_error("pairs file '" + path + "' has unexpected header");
  std::vector<ScanPair> pairs;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto f = split(t, ',');
    if (f.size() != 10)
      throw validation_error("pairs file '" + path + "' line " + std::to_string(lineno) +
                             ": expected 10 fields");
    ScanPair p;
    p.map_id = f[0];
    p.subject_id = f[1];
    p.previous_scan_id = f[2];
    p.current_scan_id = f[3];
    if (f[5] == "weak") {
      if (!weak_columns)
        throw validation_error("pairs file '" + path + "' contains weak rows but human rows were expected");
      p.weak_label = binary_from_string(f[4]);
      p.confidence = std::stod(f[6]);
      p.true_label = f[7].empty() ? p.weak_label : binary_from_string(f[7]);
    } else if (f[5] == "human") {
      p.true_label = binary_from_string(f[4]);
      p.weak_label = p.true_label;
      p.confidence = 1.0;
    } else {
      throw validation_error("pairs file '" + path + "' line " + std::to_string(lineno) +
                             ": unknown provenance '" + f[5] + "'");
    }
    p.previous_path = f[8];
    p.current_path = f[9];
    pairs.push_back(std::move(p));
  }
  return pairs;
}

}  // namespace changedet
