#include "changedet/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include "changedet/config.hpp"
#include "changedet/text.hpp"

namespace changedet::cli {

namespace {

namespace fs = std::filesystem;

void write_run_config(const ExperimentConfig& config) {
  fs::create_directories(config.output_dir);
  std::ofstream out(fs::path(config.output_dir) / "run_config.json", std::ios::binary);
  if (!out) throw io_error("cannot write run_config.json under " + config.output_dir);
  out << config.resolved_json << "\n";
}

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw config_error(what, "required path is empty");
  if (!fs::exists(path)) throw io_error(what + " not found: " + path);
}

int cmd_synth(const ExperimentConfig& config) {
  SynthCohortSpec spec = config.synth.spec;
  spec.seed = derive_seed(config.seed, "synth");
  if (spec.n_had_subjects + spec.n_wad_subjects == 0)
    throw config_error("synth", "nothing to generate (no subjects configured)");
  if (config.synth.emit != "scans")
    materialize_cohort(spec, config.output_dir, config.data.volume_extension);
  if (config.synth.emit != "maps") {
    const ScanCohort scans =
        materialize_scans(spec, config.output_dir, config.data.volume_extension);
    write_pairs_csv(scans.had_pairs, (fs::path(config.output_dir) / "had_pairs.csv").string(),
                    false);
    write_pairs_csv(scans.wad_pairs, (fs::path(config.output_dir) / "wad_pairs.csv").string(),
                    true);
  }
  return 0;
}

int cmd_preprocess(const ExperimentConfig& config) {
  if (config.preprocess.inputs.empty())
    throw config_error("preprocess.inputs", "no pairs files configured");
  const std::string maps_dir = config.preprocess.maps_dir.empty()
                                   ? (fs::path(config.output_dir) / "maps").string()
                                   : config.preprocess.maps_dir;
  fs::create_directories(maps_dir);

  std::vector<StageDescriptor> stages = config.preprocess.stages;
  if (stages.empty()) {
    // Full identity bypass: difference maps from already co-registered input.
    stages = {StageDescriptor{StageKind::bias_correction, std::nullopt, "bypass"},
              StageDescriptor{StageKind::registration, std::nullopt, "bypass"},
              StageDescriptor{StageKind::skull_strip, std::nullopt, "bypass"}};
  }

  std::ofstream provenance(fs::path(config.output_dir) / "preprocess_provenance.txt",
                           std::ios::binary);
  for (const auto& input : config.preprocess.inputs) {
    require_file(input.pairs_csv, "preprocess pairs file");
    const bool weak = input.cohort == CohortName::WAD;
    const auto pairs = read_pairs_csv(input.pairs_csv, weak);
    CohortManifest manifest;
    manifest.name = input.cohort;
    for (const auto& p : pairs) {
      require_file(p.previous_path, "previous scan of pair " + p.map_id);
      require_file(p.current_path, "current scan of pair " + p.map_id);
      const Volume3D prev = load_volume(p.previous_path);
      const Volume3D cur = load_volume(p.current_path);
      const StagePipelineResult staged = run_stage_pipeline(prev, cur, stages);
      const Volume3D diff = absolute_difference(zscore_normalize(staged.previous_processed),
                                                zscore_normalize(staged.current_processed));
      const Volume3D resampled = resample_to_grid(diff, config.data.input_grid);

      DifferenceMapRecord r;
      r.map_id = p.map_id;
      r.subject_id = p.subject_id;
      r.previous_scan_id = p.previous_scan_id;
      r.current_scan_id = p.current_scan_id;
      r.label = weak ? p.weak_label : p.true_label;
      r.provenance = weak ? LabelProvenance{ProvenanceKind::weak, p.confidence}
                          : LabelProvenance{ProvenanceKind::human, std::nullopt};
      r.volume_path = (fs::path(maps_dir) / (p.map_id + config.data.volume_extension)).string();
      save_volume(resampled, r.volume_path);
      manifest.records.push_back(std::move(r));

      provenance << p.map_id;
      for (const auto& entry : staged.provenance_log)
        provenance << ' ' << to_string(entry.kind) << (entry.bypassed ? "[bypass]" : "[run]");
      provenance << "\n";
    }
    manifest.rebuild_index();
    manifest.validate();
    write_manifest_csv(manifest, input.manifest_out);
  }
  return 0;
}

ExperimentSpec experiment_spec_from_config(const ExperimentConfig& config) {
  ExperimentSpec spec;
  spec.arch = config.model;
  spec.kind = config.experiment_kind;
  spec.cv = config.cv;
  spec.space = config.hpo.space;
  spec.sampler = config.hpo.sampler;
  spec.pruner = config.hpo.pruner;
  spec.budget = config.hpo.budget;
  if (!spec.budget.max_trials && !spec.budget.max_seconds)
    spec.budget.max_trials = static_cast<int>(enumerate_grid(spec.space).size());
  spec.tpe = config.hpo.tpe;
  spec.train = config.train.config;
  spec.augmentation = config.train.augmentation;
  spec.output_dir = config.output_dir;
  spec.seed = config.seed;
  spec.parallelism = config.parallelism;

  require_file(config.data.had_manifest, "HAD manifest");
  spec.had = read_manifest_csv(config.data.had_manifest, CohortName::HAD);
  if (spec.kind == ExperimentKind::tl) {
    require_file(config.data.wad_manifest, "WAD manifest");
    spec.wad = read_manifest_csv(config.data.wad_manifest, CohortName::WAD);
  }
  return spec;
}

int cmd_study(const ExperimentConfig& config) {
  const ExperimentSpec spec = experiment_spec_from_config(config);
  const ExperimentResult result = run_experiment(spec);
  std::ofstream log(fs::path(config.output_dir) / "wad_access_log.txt", std::ios::binary);
  for (const auto& line : result.wad_access_log) log << line << "\n";
  std::cout << "pooled AUC "
            << (result.metrics.auc ? format_fixed(*result.metrics.auc, 4) : "undefined")
            << " over " << result.pooled.size() << " predictions\n";
  return 0;
}

int cmd_train(const ExperimentConfig& config) {
  require_file(config.data.had_manifest, "HAD manifest");
  const CohortManifest had = read_manifest_csv(config.data.had_manifest, CohortName::HAD);
  const auto folds = make_subject_folds(subject_labels(had), config.cv);
  if (config.train.fold < 0 || config.train.fold >= static_cast<int>(folds.size()))
    throw config_error("train.fold", "fold index out of range");
  const FoldAssignment& fold = folds[static_cast<std::size_t>(config.train.fold)];

  SampleLoader loader(config.model.input_shape);
  const auto all = loader.load_all(had);
  std::vector<Sample> train, val;
  const std::set<std::string> train_set(fold.train_subjects.begin(), fold.train_subjects.end());
  const std::set<std::string> val_set(fold.val_subjects.begin(), fold.val_subjects.end());
  for (const auto& s : all) {
    if (train_set.count(s.subject_id)) train.push_back(s);
    else if (val_set.count(s.subject_id)) val.push_back(s);
  }

  TrainConfig tc = config.train.config;
  tc.seed = derive_seed(config.seed, "train", static_cast<std::uint64_t>(config.train.fold), 0);
  ModelHandle model = build_model(
      config.model, derive_seed(config.seed, "model",
                                static_cast<std::uint64_t>(config.train.fold), 0));
  TrainHooks hooks;
  hooks.checkpoint_path = (fs::path(config.output_dir) / "model.ckpt").string();
  const TrainResult result =
      train_model(*model, train, val, tc, config.train.augmentation, hooks);
  write_epoch_log(result, (fs::path(config.output_dir) / "epochs.csv").string());
  std::cout << "best epoch " << result.best_epoch << " val AUC "
            << format_fixed(result.best_val_auc, 4) << "\n";
  return 0;
}

int cmd_evaluate(const ExperimentConfig& config) {
  require_file(config.evaluate.predictions, "predictions file");
  const PredictionSet preds = read_predictions_csv(config.evaluate.predictions);
  const MetricsReport report = full_metrics(preds);
  write_metrics_report(report, (fs::path(config.output_dir) / "metrics_report.txt").string(),
                       config.seed);
  try {
    write_curve_csv(roc_auc(preds).points,
                    (fs::path(config.output_dir) / "roc_curve.csv").string());
    write_curve_csv(pr_aupr(preds).points,
                    (fs::path(config.output_dir) / "pr_curve.csv").string());
  } catch (const undefined_metric_error&) {
  }
  return 0;
}

int cmd_compare(const ExperimentConfig& config) {
  require_file(config.compare.predictions_a, "predictions A");
  require_file(config.compare.predictions_b, "predictions B");
  const PredictionSet a = read_predictions_csv(config.compare.predictions_a);
  const PredictionSet b = read_predictions_csv(config.compare.predictions_b);

  // Align by map_id; both files must score exactly the same records.
  std::map<std::string, const PredictionEntry*> b_by_id;
  for (const auto& e : b.entries) b_by_id[e.map_id] = &e;
  if (a.entries.size() != b.entries.size())
    throw validation_error("prediction sets differ in size; not a paired comparison");

  PairedComparison cmp;
  cmp.n_permutations = config.stats.n_permutations;
  cmp.alpha = config.stats.alpha;
  cmp.seed = derive_seed(config.seed, "compare");
  for (const auto& e : a.entries) {
    const auto it = b_by_id.find(e.map_id);
    if (it == b_by_id.end())
      throw validation_error("record '" + e.map_id + "' missing from predictions B");
    if (it->second->label != e.label)
      throw validation_error("record '" + e.map_id + "' has conflicting labels");
    cmp.labels.push_back(e.label);
    cmp.scores_a.push_back(e.probability);
    cmp.scores_b.push_back(it->second->probability);
  }
  const PermutationTestResult result = paired_auc_permutation_test(cmp);
  write_comparison_report(result, config.compare.name_a, config.compare.name_b,
                          (fs::path(config.output_dir) / "comparison_report.txt").string());
  std::cout << "delta AUC " << format_fixed(result.observed_delta, 4) << " p "
            << format_fixed(result.p_value, 4) << "\n";
  return 0;
}

int cmd_infer(const ExperimentConfig& config) {
  require_file(config.data.external_manifest, "external manifest");
  if (config.infer.checkpoints.size() != 5)
    throw config_error("infer.checkpoints", "exactly 5 fold checkpoints required");
  for (const auto& c : config.infer.checkpoints) require_file(c, "checkpoint");
  const CohortManifest external =
      read_manifest_csv(config.data.external_manifest, CohortName::EXTERNAL);
  const ExternalInferenceResult result =
      run_external_inference(config.infer.checkpoints, external);
  write_external_predictions_csv(
      result, (fs::path(config.output_dir) / "external_predictions.csv").string());
  write_metrics_report(result.metrics,
                       (fs::path(config.output_dir) / "external_metrics.txt").string(),
                       config.seed);
  std::cout << "external AUC "
            << (result.metrics.auc ? format_fixed(*result.metrics.auc, 4) : "undefined") << "\n";
  return 0;
}

}  // namespace

int execute(const std::string& command, const std::string& config_path,
            const std::vector<std::string>& overrides) {
  try {
    const ExperimentConfig config = load_config(config_path, overrides);
    write_run_config(config);
    if (command == "synth") return cmd_synth(config);
    if (command == "preprocess") return cmd_preprocess(config);
    if (command == "train") return cmd_train(config);
    if (command == "study") return cmd_study(config);
    if (command == "evaluate") return cmd_evaluate(config);
    if (command == "compare") return cmd_compare(config);
    if (command == "infer") return cmd_infer(config);
    std::cerr << "error: config: unknown command '" << command << "'\n";
    return 2;
  } catch (const config_error& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return 2;
  } catch (const io_error& e) {
    std::cerr << "error: io: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: runtime: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace changedet::cli
