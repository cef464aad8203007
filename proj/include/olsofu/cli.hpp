// include/olsofu/cli.hpp
//
// Command implementations behind the `olsofu` executable. They return the
// process exit code: 0 ok, 1 validation failure, 2 config error, 3 training
// divergence, 4 run-time error.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <set>
#include <string>

#include "olsofu/config.hpp"
#include "olsofu/harness.hpp"

namespace olsofu {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitTraining = 3;
inline constexpr int kExitRuntime = 4;

struct CliOptions {
  std::optional<std::filesystem::path> config;
  std::optional<std::filesystem::path> out;
  std::optional<std::uint64_t> seed;
  int jobs = 1;
  std::optional<Order> order;
  std::set<std::string> only;  // validate: restrict to these check ids
};

// Loads the config (defaults when no path is given) and applies the flag
// and OLSOFU_OUT overrides.
RunConfig resolve_config(const CliOptions& opts);

// f_0 from the checkpoint named in the config, or trained inline.
Pretrained obtain_pretrained(const RunConfig& cfg);

int cmd_pretrain(const CliOptions& opts, std::ostream& out, std::ostream& err);
int cmd_run(const CliOptions& opts, std::ostream& out, std::ostream& err);
int cmd_sweep(const CliOptions& opts, std::ostream& out, std::ostream& err);
int cmd_validate(const CliOptions& opts, std::ostream& out, std::ostream& err);

int run_cli(int argc, char** argv);

}  // namespace olsofu
