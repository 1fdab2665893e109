#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "changedet/experiment.hpp"
#include "changedet/preprocess.hpp"
#include "changedet/stats.hpp"
#include "changedet/synthgen.hpp"

namespace changedet {

struct DataSection {
  std::string had_manifest;
  std::string wad_manifest;
  std::string external_manifest;
  std::array<std::int64_t, 3> input_grid{32, 32, 32};
  std::string volume_extension = ".rawvol";
};

struct SynthSection {
  SynthCohortSpec spec;
  std::string emit = "both";  // maps | scans | both
};

struct PreprocessInput {
  std::string pairs_csv;
  CohortName cohort = CohortName::HAD;
  std::string manifest_out;
};

struct PreprocessSection {
  std::vector<PreprocessInput> inputs;
  std::vector<StageDescriptor> stages;  // empty -> full identity bypass
  std::string maps_dir;                 // defaults to <output>/maps
};

struct TrainSection {
  TrainConfig config;
  AugmentationPolicy augmentation;
  int fold = 0;  // fold trained by the `train` command
};

struct HpoSection {
  SamplerKind sampler = SamplerKind::grid;
  Budget budget;
  PrunerConfig pruner;
  TpeOptions tpe;
  SearchSpace space;
};

struct StatsSection {
  int n_permutations = 10000;
  double alpha = 0.05;
};

struct CompareSection {
  std::string predictions_a;
  std::string predictions_b;
  std::string name_a = "model_a";
  std::string name_b = "model_b";
};

struct InferSection {
  std::vector<std::string> checkpoints;  // the 5 fold models
};

struct EvaluateSection {
  std::string predictions;
};

// The one configuration document driving every command. Parsed and fully
// validated before any work starts; field errors carry their JSON path.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  int parallelism = 1;
  std::string output_dir = "out";

  DataSection data;
  SynthSection synth;
  PreprocessSection preprocess;
  ArchitectureSpec model;
  TrainSection train;
  HpoSection hpo;
  ExperimentKind experiment_kind = ExperimentKind::baseline;
  CVPlan cv;
  StatsSection stats;
  CompareSection compare;
  InferSection infer;
  EvaluateSection evaluate;

  // Resolved JSON (post-overrides), persisted as run_config.json with each run.
  std::string resolved_json;
};

// Loads the JSON config and applies `--set key.path=value` overrides (value
// parsed as JSON when possible, else taken as a string).
ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides);

ExperimentConfig parse_config_json(const std::string& json_text);

}  // namespace changedet
