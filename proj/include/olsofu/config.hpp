// include/olsofu/config.hpp
//
// JSON configuration: one document mirrors Scenario plus training, output
// and sweep settings. Every key has an explicit default, unknown keys are
// rejected, and the resolved document can be written back out.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "olsofu/harness.hpp"

namespace olsofu {

struct SweepAxes {
  std::vector<Algorithm> algorithms;
  std::vector<SslKind> ssl;
  std::vector<ShiftKind> shifts;
  std::vector<CorruptionSpec> corruptions;
  std::vector<std::uint64_t> run_seeds;
};

struct RunConfig {
  Scenario scenario;
  std::optional<std::string> checkpoint;  // binary f_0; pretrain inline when unset
  std::string out_dir = "olsofu_out";
  SweepAxes sweep;
};

// Defaults as a JSON document; the schema for validation and --help.
nlohmann::ordered_json default_config_json();
nlohmann::ordered_json to_json(const RunConfig& cfg);

// Throws ConfigError on malformed JSON, unknown keys, wrong types or values
// that fail validation.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

// One "key = default" line per leaf key.
std::string config_help();

}  // namespace olsofu
