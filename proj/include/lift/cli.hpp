#pragma once

#include <string>
#include <vector>

#include "json.hpp"

namespace lift::cli {

inline constexpr const char* kToolVersion = "0.1.0";

/// Runs one command line (without the program name). Returns 0 on success, 1
/// for usage and validation errors, 2 for I/O and format errors.
int run(const std::vector<std::string>& args);
int run(int argc, char** argv);

/// Record written next to every output: resolved options, seed, paths, version.
struct RunManifest {
  std::string subcommand;
  nlohmann::json config;
  std::uint64_t seed = 0;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::string tool_version = kToolVersion;
};

void to_json(nlohmann::json& j, const RunManifest& m);
void from_json(const nlohmann::json& j, RunManifest& m);

}  // namespace lift::cli
