#pragma once

#include <string>
#include <vector>

namespace changedet::cli {

// Exit codes: 0 success, 1 runtime failure, 2 invalid config, 3 missing
// input file. Failures print a single-line `error: <kind>: <message>`
// diagnostic to stderr. Every command persists the resolved config
// (including the master seed) as run_config.json in the output directory.
int execute(const std::string& command, const std::string& config_path,
            const std::vector<std::string>& overrides);

}  // namespace changedet::cli
