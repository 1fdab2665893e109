#include <string>
#include <vector>

#include "CLI11.hpp"
#include "changedet/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"changedet - longitudinal difference-map classification pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::string output_dir;
  int parallelism = -1;
  std::int64_t seed = -1;

  const std::vector<std::string> commands = {"synth",    "preprocess", "train", "study",
                                             "evaluate", "compare",    "infer"};
  for (const auto& name : commands) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "experiment config file (JSON)")->required();
    sub->add_option("--set", overrides, "override a config field: key.path=value")
        ->take_all()
        ->allow_extra_args(false);
    sub->add_option("--output", output_dir, "override output.dir");
    sub->add_option("--parallelism", parallelism, "override parallelism");
    sub->add_option("--seed", seed, "override the master seed");
  }

  CLI11_PARSE(app, argc, argv);

  const std::string command = app.get_subcommands().front()->get_name();
  if (!output_dir.empty()) overrides.push_back("output.dir=" + output_dir);
  if (parallelism > 0) overrides.push_back("parallelism=" + std::to_string(parallelism));
  if (seed >= 0) overrides.push_back("seed=" + std::to_string(seed));

  return changedet::cli::execute(command, config_path, overrides);
}
