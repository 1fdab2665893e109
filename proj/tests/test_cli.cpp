#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "changedet/core_data.hpp"
#include "changedet/evaluation.hpp"
#include "changedet/volume.hpp"
#include "doctest.h"

namespace fs = std::filesystem;

namespace {

struct CliResult {
  int exit_code;
  std::string stderr_text;
};

CliResult run_cli(const std::string& args, const fs::path& workdir) {
  const fs::path err_file = workdir / "stderr.txt";
  const std::string cmd = std::string(CHANGEDET_CLI_PATH) + " " + args + " 2>" + err_file.string();
  const int raw = std::system(cmd.c_str());
  CliResult r;
  r.exit_code = WEXITSTATUS(raw);
  std::ifstream in(err_file);
  r.stderr_text.assign((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return r;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

// One config drives the whole pipeline; the tiny model and cohort keep every
// command fast enough for CI.
std::string pipeline_config(const fs::path& dir) {
  std::ostringstream s;
  s << R"({
  "seed": 4242,
  "parallelism": 1,
  "output": {"dir": ")" << (dir / "out").string() << R"("},
  "data": {
    "had_manifest": ")" << (dir / "out" / "had_manifest.csv").string() << R"(",
    "wad_manifest": ")" << (dir / "out" / "wad_manifest.csv").string() << R"(",
    "external_manifest": ")" << (dir / "out" / "had_manifest.csv").string() << R"(",
    "input_grid": [16, 16, 16]
  },
  "synth": {
    "n_had_subjects": 10, "n_wad_subjects": 6, "change_prevalence": 0.5,
    "weak_noise_rate": 0.1, "noise_sigma": 0.03, "min_timepoints": 3, "max_timepoints": 3
  },
  "model": {
    "family": "vgg3d", "conv_channels": [2, 4, 4, 4], "fc_widths": [16, 8, 4, 1]
  },
  "train": {"learning_rate": 0.001, "max_epochs": 2, "early_stop_patience": 2,
            "augmentation": {"flip_prob": 0, "noise_prob": 0, "zoom_prob": 0, "elastic_prob": 0}},
  "hpo": {"sampler": "grid", "max_trials": 1,
          "space": {"learning_rates": [0.001], "weight_decays": [0], "tl_active": false}},
  "experiment": {"kind": "baseline"},
  "cv": {"k": 5},
  "stats": {"n_permutations": 500}
})";
  return s.str();
}

}  // namespace

TEST_CASE("cli pipeline: synth, study, evaluate, compare, infer") {
  const fs::path dir = fs::temp_directory_path() / "changedet_cli_pipeline";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path config = dir / "config.json";
  write_file(config, pipeline_config(dir));

  // synth
  auto r = run_cli("synth --config " + config.string(), dir);
  CHECK(r.exit_code == 0);
  CHECK(fs::exists(dir / "out" / "had_manifest.csv"));
  CHECK(fs::exists(dir / "out" / "wad_manifest.csv"));
  CHECK(fs::exists(dir / "out" / "had_pairs.csv"));
  CHECK(fs::exists(dir / "out" / "run_config.json"));
  const auto had =
      changedet::read_manifest_csv((dir / "out" / "had_manifest.csv").string(),
                                   changedet::CohortName::HAD);
  CHECK(had.size() == 20);  // 10 subjects x 2 pairs

  // study (baseline, grid of 1)
  r = run_cli("study --config " + config.string() + " --output " + (dir / "study").string(), dir);
  CHECK(r.exit_code == 0);
  CHECK(fs::exists(dir / "study" / "metrics_report.txt"));
  CHECK(fs::exists(dir / "study" / "pooled_predictions.csv"));
  for (int f = 0; f < 5; ++f)
    CHECK(fs::exists(dir / "study" / ("fold_" + std::to_string(f)) / "final.ckpt"));
  const std::string metrics_first = read_file(dir / "study" / "metrics_report.txt");
  CHECK(metrics_first.find("SEED 4242") != std::string::npos);

  // Determinism: rerunning the same study command reproduces the report
  // byte for byte (fresh directory and resumed directory both).
  r = run_cli("study --config " + config.string() + " --output " + (dir / "study2").string(), dir);
  CHECK(r.exit_code == 0);
  CHECK(read_file(dir / "study2" / "metrics_report.txt") == metrics_first);
  r = run_cli("study --config " + config.string() + " --output " + (dir / "study").string(), dir);
  CHECK(r.exit_code == 0);
  CHECK(read_file(dir / "study" / "metrics_report.txt") == metrics_first);

  // evaluate on the pooled predictions reproduces the study metrics.
  r = run_cli("evaluate --config " + config.string() + " --output " + (dir / "eval").string() +
                  " --set evaluate.predictions=" + (dir / "study" / "pooled_predictions.csv").string(),
              dir);
  CHECK(r.exit_code == 0);
  CHECK(read_file(dir / "eval" / "metrics_report.txt") == metrics_first);
  CHECK(fs::exists(dir / "eval" / "roc_curve.csv"));
  CHECK(fs::exists(dir / "eval" / "pr_curve.csv"));

  // compare a prediction set with itself: delta 0, p = 1.
  r = run_cli("compare --config " + config.string() + " --output " + (dir / "cmp").string() +
                  " --set compare.predictions_a=" +
                  (dir / "study" / "pooled_predictions.csv").string() +
                  " --set compare.predictions_b=" +
                  (dir / "study" / "pooled_predictions.csv").string(),
              dir);
  CHECK(r.exit_code == 0);
  const std::string cmp_text = read_file(dir / "cmp" / "comparison_report.txt");
  CHECK(cmp_text.find("DELTA 0.000000") != std::string::npos);
  CHECK(cmp_text.find("P_VALUE 1.000000") != std::string::npos);

  // infer with the five fold models on the (relabeled) HAD manifest.
  std::string ckpts = "[";
  for (int f = 0; f < 5; ++f) {
    if (f) ckpts += ",";
    ckpts += "\"" + (dir / "study" / ("fold_" + std::to_string(f)) / "final.ckpt").string() + "\"";
  }
  ckpts += "]";
  r = run_cli("infer --config " + config.string() + " --output " + (dir / "infer").string() +
                  " --set 'infer.checkpoints=" + ckpts + "'",
              dir);
  CHECK(r.exit_code == 0);
  CHECK(fs::exists(dir / "infer" / "external_predictions.csv"));
  CHECK(fs::exists(dir / "infer" / "external_metrics.txt"));
  const auto preds =
      changedet::read_predictions_csv((dir / "infer" / "external_predictions.csv").string());
  CHECK(preds.size() == had.size());

  // train command: single-fold training run.
  r = run_cli("train --config " + config.string() + " --output " + (dir / "train").string(), dir);
  CHECK(r.exit_code == 0);
  CHECK(fs::exists(dir / "train" / "model.ckpt"));
  CHECK(fs::exists(dir / "train" / "epochs.csv"));

  fs::remove_all(dir);
}

TEST_CASE("cli preprocess builds manifests from scan pairs") {
  const fs::path dir = fs::temp_directory_path() / "changedet_cli_preprocess";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path config = dir / "config.json";
  write_file(config, pipeline_config(dir));

  auto r = run_cli("synth --config " + config.string(), dir);
  REQUIRE(r.exit_code == 0);

  std::ostringstream pp;
  pp << R"({
  "seed": 1,
  "output": {"dir": ")" << (dir / "pp").string() << R"("},
  "data": {"input_grid": [16, 16, 16]},
  "preprocess": {
    "inputs": [
      {"pairs_csv": ")" << (dir / "out" / "had_pairs.csv").string() << R"(",
       "cohort": "HAD",
       "manifest_out": ")" << (dir / "pp" / "had_manifest.csv").string() << R"("},
      {"pairs_csv": ")" << (dir / "out" / "wad_pairs.csv").string() << R"(",
       "cohort": "WAD",
       "manifest_out": ")" << (dir / "pp" / "wad_manifest.csv").string() << R"("}
    ]
  }
})";
  const fs::path pp_config = dir / "pp_config.json";
  write_file(pp_config, pp.str());
  r = run_cli("preprocess --config " + pp_config.string(), dir);
  CHECK(r.exit_code == 0);

  const auto had = changedet::read_manifest_csv((dir / "pp" / "had_manifest.csv").string(),
                                                changedet::CohortName::HAD);
  const auto direct = changedet::read_manifest_csv((dir / "out" / "had_manifest.csv").string(),
                                                   changedet::CohortName::HAD);
  REQUIRE(had.size() == direct.size());
  // The pairs route and the direct route produce the same difference maps.
  for (std::size_t i = 0; i < had.size(); ++i) {
    CHECK(had.records[i].map_id == direct.records[i].map_id);
    CHECK(had.records[i].label == direct.records[i].label);
    const auto a = changedet::load_volume(had.records[i].volume_path);
    const auto b = changedet::load_volume(direct.records[i].volume_path);
    REQUIRE(a.voxels.size() == b.voxels.size());
    for (std::size_t v = 0; v < a.voxels.size(); v += 131)
      CHECK(std::abs(a.voxels[v] - b.voxels[v]) < 1e-4);
  }
  CHECK(fs::exists(dir / "pp" / "preprocess_provenance.txt"));
  fs::remove_all(dir);
}

TEST_CASE("cli failure modes use the documented exit codes") {
  const fs::path dir = fs::temp_directory_path() / "changedet_cli_errors";
  fs::remove_all(dir);
  fs::create_directories(dir);

  SUBCASE("invalid config -> exit 2 with field path") {
    const fs::path config = dir / "bad.json";
    write_file(config, R"({"cv": {"k": 1}, "output": {"dir": ")" + (dir / "o").string() + R"("}})");
    const auto r = run_cli("study --config " + config.string(), dir);
    CHECK(r.exit_code == 2);
    CHECK(r.stderr_text.find("error: config") != std::string::npos);
    CHECK(r.stderr_text.find("cv") != std::string::npos);
    // Single-line diagnostic.
    CHECK(std::count(r.stderr_text.begin(), r.stderr_text.end(), '\n') <= 1);
  }

  SUBCASE("missing manifest -> exit 3 naming the path") {
    const fs::path config = dir / "missing.json";
    write_file(config, R"({
      "output": {"dir": ")" + (dir / "o").string() + R"("},
      "data": {"had_manifest": "/nonexistent/had.csv", "input_grid": [16,16,16]},
      "hpo": {"max_trials": 1}
    })");
    const auto r = run_cli("study --config " + config.string(), dir);
    CHECK(r.exit_code == 3);
    CHECK(r.stderr_text.find("error: io") != std::string::npos);
    CHECK(r.stderr_text.find("/nonexistent/had.csv") != std::string::npos);
  }

  SUBCASE("nonexistent config file -> exit 3") {
    const auto r = run_cli("synth --config /nonexistent/config.json", dir);
    CHECK(r.exit_code == 3);
  }

  SUBCASE("malformed --set -> exit 2") {
    const fs::path config = dir / "ok.json";
    write_file(config, R"({"output": {"dir": ")" + (dir / "o").string() + R"("}})");
    const auto r = run_cli("synth --config " + config.string() + " --set nonsense", dir);
    CHECK(r.exit_code == 2);
  }
  fs::remove_all(dir);
}

TEST_CASE("seed override flows into outputs") {
  const fs::path dir = fs::temp_directory_path() / "changedet_cli_seed";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path config = dir / "config.json";
  write_file(config, pipeline_config(dir));

  auto r = run_cli("synth --config " + config.string() + " --seed 777", dir);
  REQUIRE(r.exit_code == 0);
  const std::string run_config = read_file(dir / "out" / "run_config.json");
  CHECK(run_config.find("777") != std::string::npos);
  fs::remove_all(dir);
}
