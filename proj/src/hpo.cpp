#include "changedet/hpo.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "json.hpp"

namespace changedet {

void SearchSpace::validate() const {
  if (learning_rates.empty()) throw validation_error("search space has no learning rates");
  if (weight_decays.empty()) throw validation_error("search space has no weight decays");
  for (const double lr : learning_rates)
    if (!(lr > 0.0)) throw validation_error("learning rates must be > 0");
  for (const double wd : weight_decays)
    if (wd < 0.0) throw validation_error("weight decays must be >= 0");
  if (tl_active) {
    if (wad_fractions.empty()) throw validation_error("TL space has no WAD fractions");
    for (const double f : wad_fractions)
      if (!(f > 0.5 && f < 1.0)) throw validation_error("WAD fractions must lie in (0.5, 1.0)");
  }
}

bool TrialConfig::same_point(const TrialConfig& other) const {
  if (learning_rate != other.learning_rate || weight_decay != other.weight_decay) return false;
  if (tl.has_value() != other.tl.has_value()) return false;
  if (!tl) return true;
  return tl->mixed_training == other.tl->mixed_training &&
         tl->feature_extraction == other.tl->feature_extraction &&
         tl->fraction_of_wad == other.tl->fraction_of_wad;
}

void TrialConfig::check_valid(const SearchSpace& space) const {
  auto contains = [](const std::vector<double>& xs, double v) {
    return std::find(xs.begin(), xs.end(), v) != xs.end();
  };
  if (!contains(space.learning_rates, learning_rate))
    throw validation_error("trial learning rate not in search space");
  if (!contains(space.weight_decays, weight_decay))
    throw validation_error("trial weight decay not in search space");
  if (space.tl_active != tl.has_value())
    throw validation_error("trial TL block does not match tl_active");
  if (tl) {
    if (tl->mixed_training && tl->feature_extraction.has_value())
      throw validation_error("mixed_training=true must not assign feature_extraction");
    if (!tl->mixed_training && !tl->feature_extraction.has_value())
      throw validation_error("mixed_training=false requires a feature_extraction value");
    if (!contains(space.wad_fractions, tl->fraction_of_wad))
      throw validation_error("trial WAD fraction not in search space");
  }
}

std::vector<TrialConfig> enumerate_grid(const SearchSpace& space) {
  space.validate();
  std::vector<TrialConfig> out;
  auto emit = [&](double lr, double wd, std::optional<TLChoice> tl) {
    TrialConfig c;
    c.learning_rate = lr;
    c.weight_decay = wd;
    c.tl = std::move(tl);
    c.trial_id = static_cast<int>(out.size());
    out.push_back(std::move(c));
  };
  for (const double lr : space.learning_rates) {
    for (const double wd : space.weight_decays) {
      if (!space.tl_active) {
        emit(lr, wd, std::nullopt);
        continue;
      }
      for (const double frac : space.wad_fractions)
        emit(lr, wd, TLChoice{true, std::nullopt, frac});
      for (const double frac : space.wad_fractions)
        emit(lr, wd, TLChoice{false, false, frac});
      for (const double frac : space.wad_fractions)
        emit(lr, wd, TLChoice{false, true, frac});
    }
  }
  return out;
}

std::string to_string(SamplerKind s) {
  switch (s) {
    case SamplerKind::grid: return "grid";
    case SamplerKind::random: return "random";
    case SamplerKind::tpe: return "tpe";
  }
  throw validation_error("unreachable sampler kind");
}

SamplerKind sampler_from_string(const std::string& s) {
  if (s == "grid") return SamplerKind::grid;
  if (s == "random") return SamplerKind::random;
  if (s == "tpe") return SamplerKind::tpe;
  throw validation_error("unknown sampler '" + s + "'");
}

std::string to_string(TrialStatus s) {
  switch (s) {
    case TrialStatus::completed: return "completed";
    case TrialStatus::pruned: return "pruned";
    case TrialStatus::failed: return "failed";
  }
  throw validation_error("unreachable trial status");
}

TrialStatus trial_status_from_string(const std::string& s) {
  if (s == "completed") return TrialStatus::completed;
  if (s == "pruned") return TrialStatus::pruned;
  if (s == "failed") return TrialStatus::failed;
  throw validation_error("unknown trial status '" + s + "'");
}

namespace {

TrialConfig sample_random(const SearchSpace& space, Rng& rng) {
  TrialConfig c;
  c.learning_rate = space.learning_rates[rng.uniform_int(space.learning_rates.size())];
  c.weight_decay = space.weight_decays[rng.uniform_int(space.weight_decays.size())];
  if (space.tl_active) {
    TLChoice tl;
    const auto branch = rng.uniform_int(3);
    tl.mixed_training = branch == 0;
    if (!tl.mixed_training) tl.feature_extraction = branch == 2;
    tl.fraction_of_wad = space.wad_fractions[rng.uniform_int(space.wad_fractions.size())];
    c.tl = tl;
  }
  return c;
}

// Categorical density with add-one smoothing.
class CategoricalDensity {
 public:
  explicit CategoricalDensity(std::size_t n_choices) : counts_(n_choices, 0.0), total_(0.0) {}

  void add(std::size_t idx) {
    counts_[idx] += 1.0;
    total_ += 1.0;
  }
  double prob(std::size_t idx) const {
    return (counts_[idx] + 1.0) / (total_ + static_cast<double>(counts_.size()));
  }
  std::size_t sample(Rng& rng) const {
    const double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < counts_.size(); ++i) {
      acc += prob(i);
      if (u < acc) return i;
    }
    return counts_.size() - 1;
  }

 private:
  std::vector<double> counts_;
  double total_;
};

std::size_t index_of(const std::vector<double>& xs, double v) {
  const auto it = std::find(xs.begin(), xs.end(), v);
  return static_cast<std::size_t>(it - xs.begin());
}

// TPE over the conditional tree: good/bad split of completed trials at the
// gamma quantile, per-variable categorical densities, branch variable first.
// Candidates are drawn from the good density and scored by the density ratio.
TrialConfig sample_tpe(const SearchSpace& space, const StudyRecord& history, Rng& rng,
                       const TpeOptions& opts) {
  std::vector<const TrialRecord*> completed;
  for (const auto& t : history.trials)
    if (t.status == TrialStatus::completed && t.objective) completed.push_back(&t);

  std::vector<const TrialRecord*> sorted = completed;
  std::sort(sorted.begin(), sorted.end(),
            [](const TrialRecord* a, const TrialRecord* b) { return *a->objective > *b->objective; });
  const std::size_t n_good =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(opts.gamma *
                                                                  static_cast<double>(sorted.size()))));

  struct Densities {
    CategoricalDensity lr, wd, branch, frac;
    Densities(const SearchSpace& s)
        : lr(s.learning_rates.size()),
          wd(s.weight_decays.size()),
          branch(3),
          frac(std::max<std::size_t>(1, s.wad_fractions.size())) {}
  };
  Densities good(space), bad(space);
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    Densities& d = i < n_good ? good : bad;
    const TrialConfig& c = sorted[i]->config;
    d.lr.add(index_of(space.learning_rates, c.learning_rate));
    d.wd.add(index_of(space.weight_decays, c.weight_decay));
    if (c.tl) {
      d.branch.add(static_cast<std::size_t>(c.tl->branch()));
      d.frac.add(index_of(space.wad_fractions, c.tl->fraction_of_wad));
    }
  }

  TrialConfig best;
  double best_score = -1.0;
  for (int cand = 0; cand < opts.n_candidates; ++cand) {
    TrialConfig c;
    const std::size_t lr_idx = good.lr.sample(rng);
    const std::size_t wd_idx = good.wd.sample(rng);
    c.learning_rate = space.learning_rates[lr_idx];
    c.weight_decay = space.weight_decays[wd_idx];
    double score = good.lr.prob(lr_idx) / bad.lr.prob(lr_idx) *
                   (good.wd.prob(wd_idx) / bad.wd.prob(wd_idx));
    if (space.tl_active) {
      const std::size_t branch = good.branch.sample(rng);
      const std::size_t frac_idx = good.frac.sample(rng);
      TLChoice tl;
      tl.mixed_training = branch == 0;
      if (!tl.mixed_training) tl.feature_extraction = branch == 2;
      tl.fraction_of_wad = space.wad_fractions[frac_idx];
      c.tl = tl;
      score *= good.branch.prob(branch) / bad.branch.prob(branch) *
               (good.frac.prob(frac_idx) / bad.frac.prob(frac_idx));
    }
    if (score > best_score) {
      best_score = score;
      best = c;
    }
  }
  return best;
}

}  // namespace

std::optional<TrialConfig> sample_next_trial(const SearchSpace& space, SamplerKind sampler,
                                             const StudyRecord& history, Rng& rng,
                                             const TpeOptions& tpe) {
  space.validate();
  TrialConfig c;
  switch (sampler) {
    case SamplerKind::grid: {
      const auto grid = enumerate_grid(space);
      auto visited = [&](const TrialConfig& g) {
        return std::any_of(history.trials.begin(), history.trials.end(),
                           [&](const TrialRecord& t) { return t.config.same_point(g); });
      };
      auto it = std::find_if(grid.begin(), grid.end(),
                             [&](const TrialConfig& g) { return !visited(g); });
      if (it == grid.end()) return std::nullopt;  // exhausted
      c = *it;
      break;
    }
    case SamplerKind::random:
      c = sample_random(space, rng);
      break;
    case SamplerKind::tpe: {
      std::size_t finished = 0;
      for (const auto& t : history.trials)
        if (t.status != TrialStatus::failed) ++finished;
      if (finished < static_cast<std::size_t>(tpe.startup_trials)) {
        c = sample_random(space, rng);
        c.sampled_as_random = true;
      } else {
        c = sample_tpe(space, history, rng, tpe);
      }
      break;
    }
  }
  c.trial_id = static_cast<int>(history.trials.size());
  c.check_valid(space);
  return c;
}

bool should_prune_median(int step, double intermediate,
                         const std::vector<double>& completed_values_at_step, int min_trials,
                         int warmup_steps) {
  if (step < warmup_steps) return false;
  if (completed_values_at_step.size() < static_cast<std::size_t>(min_trials)) return false;
  std::vector<double> sorted = completed_values_at_step;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const double median =
      n % 2 == 1 ? sorted[n / 2] : (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0;
  return intermediate < median;  // strict: ties survive
}

void Budget::validate() const {
  if (max_trials && *max_trials < 1) throw validation_error("budget max_trials must be >= 1");
  if (max_seconds && !(*max_seconds > 0.0))
    throw validation_error("budget max_seconds must be > 0");
  if (!max_trials && !max_seconds)
    throw validation_error("budget needs max_trials or max_seconds");
}

void TrialProgress::report(int step, double value) {
  intermediates_.emplace_back(step, value);
  if (!pruner_.enabled) return;
  std::vector<double> history_at_step;
  for (const auto& t : study_.trials) {
    if (t.status != TrialStatus::completed) continue;
    for (const auto& [s, v] : t.intermediates) {
      if (s == step) {
        history_at_step.push_back(v);
        break;
      }
    }
  }
  if (should_prune_median(step, value, history_at_step, pruner_.min_trials, pruner_.warmup_steps))
    throw trial_pruned{};
}

namespace {

nlohmann::json trial_config_to_json(const TrialConfig& c) {
  nlohmann::json j{{"trial_id", c.trial_id},
                   {"seed", c.seed},
                   {"learning_rate", c.learning_rate},
                   {"weight_decay", c.weight_decay},
                   {"sampled_as_random", c.sampled_as_random}};
  if (c.tl) {
    j["tl"] = {{"mixed_training", c.tl->mixed_training},
               {"fraction_of_wad", c.tl->fraction_of_wad}};
    if (c.tl->feature_extraction) j["tl"]["feature_extraction"] = *c.tl->feature_extraction;
  }
  return j;
}

TrialConfig trial_config_from_json(const nlohmann::json& j) {
  TrialConfig c;
  c.trial_id = j.at("trial_id").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.sampled_as_random = j.value("sampled_as_random", false);
  if (j.contains("tl")) {
    TLChoice tl;
    tl.mixed_training = j["tl"].at("mixed_training").get<bool>();
    tl.fraction_of_wad = j["tl"].at("fraction_of_wad").get<double>();
    if (j["tl"].contains("feature_extraction"))
      tl.feature_extraction = j["tl"]["feature_extraction"].get<bool>();
    c.tl = tl;
  }
  return c;
}

nlohmann::json trial_record_to_json(const TrialRecord& t) {
  nlohmann::json j{{"config", trial_config_to_json(t.config)}, {"status", to_string(t.status)}};
  if (t.objective) j["objective"] = *t.objective;
  if (!t.error.empty()) j["error"] = t.error;
  nlohmann::json inter = nlohmann::json::array();
  for (const auto& [s, v] : t.intermediates) inter.push_back({s, v});
  j["intermediates"] = inter;
  return j;
}

TrialRecord trial_record_from_json(const nlohmann::json& j) {
  TrialRecord t;
  t.config = trial_config_from_json(j.at("config"));
  t.status = trial_status_from_string(j.at("status").get<std::string>());
  if (j.contains("objective")) t.objective = j["objective"].get<double>();
  if (j.contains("error")) t.error = j["error"].get<std::string>();
  for (const auto& pair : j.at("intermediates"))
    t.intermediates.emplace_back(pair.at(0).get<int>(), pair.at(1).get<double>());
  return t;
}

void refresh_best(StudyRecord& study) {
  study.best_trial.reset();
  for (std::size_t i = 0; i < study.trials.size(); ++i) {
    const auto& t = study.trials[i];
    if (t.status != TrialStatus::completed || !t.objective) continue;
    if (!study.best_trial || *t.objective > *study.trials[*study.best_trial].objective)
      study.best_trial = i;
  }
}

}  // namespace

StudyRecord run_study(const Objective& objective, const SearchSpace& space,
                      const StudyOptions& options) {
  space.validate();
  options.budget.validate();

  StudyRecord study;
  if (!options.log_path.empty() && std::filesystem::exists(options.log_path)) {
    std::ifstream in(options.log_path, std::ios::binary);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      study.trials.push_back(trial_record_from_json(nlohmann::json::parse(line)));
    }
  }

  std::ofstream log;
  if (!options.log_path.empty()) {
    log.open(options.log_path, std::ios::binary | std::ios::app);
    if (!log) throw io_error("cannot open study log for writing: " + options.log_path);
  }

  Rng sampler_rng(derive_seed(options.seed, "sampler"));
  const auto t_start = std::chrono::steady_clock::now();

  while (true) {
    if (options.budget.max_trials &&
        study.trials.size() >= static_cast<std::size_t>(*options.budget.max_trials))
      break;
    if (options.budget.max_seconds) {
      const double elapsed =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
      if (elapsed >= *options.budget.max_seconds) break;
    }

    auto next = sample_next_trial(space, options.sampler, study, sampler_rng, options.tpe);
    if (!next) break;  // grid exhausted
    TrialRecord record;
    record.config = *next;
    record.config.seed = derive_seed(options.seed, "trial",
                                     static_cast<std::uint64_t>(record.config.trial_id));

    TrialProgress progress(study, options.pruner);
    const auto trial_started = std::chrono::system_clock::now();
    try {
      const double value = objective(record.config, progress);
      record.status = TrialStatus::completed;
      record.objective = value;
    } catch (const trial_pruned&) {
      record.status = TrialStatus::pruned;
    } catch (const std::exception& e) {
      record.status = TrialStatus::failed;
      record.error = e.what();
    }
    record.intermediates = progress.intermediates();
    if (log) {
      auto j = trial_record_to_json(record);
      const auto ms = [](auto tp) {
        return std::chrono::duration_cast<std::chrono::milliseconds>(tp.time_since_epoch())
            .count();
      };
      j["started_unix_ms"] = ms(trial_started);
      j["finished_unix_ms"] = ms(std::chrono::system_clock::now());
      log << j.dump() << "\n";
      log.flush();
    }
    study.trials.push_back(std::move(record));
  }

  refresh_best(study);
  return study;
}

}  // namespace changedet
