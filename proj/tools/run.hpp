#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mfgrom/model.hpp"

namespace mfgrom::cli {

inline constexpr const char* kSchema = "mfgrom.run/1";
inline constexpr const char* kToolVersion = "0.1.0";

/// Malformed or out-of-range configuration. Maps to exit code 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  nlohmann::json raw;  ///< validated document, task sections included
  std::string task;
  ModelParams model;
  std::string output = "out";
  std::uint64_t seed = 0;
};

struct RunManifest {
  std::string config_hash;
  std::string tool_version = kToolVersion;
  std::uint64_t seed = 0;
  std::string started;
  std::string finished;
  std::vector<std::string> files;
  std::map<std::string, std::string> statuses;
  int exit_code = 0;

  nlohmann::json to_json() const;
};

/// Validates a config document. Throws ConfigError on unknown keys, wrong
/// types, an unknown task, or invalid model parameters.
RunConfig parse_config(const nlohmann::json& doc);

/// Runs the task and writes its files plus manifest.json into out_dir.
/// Exit code 0 on success, 2 when a solver did not converge.
RunManifest run(const RunConfig& cfg, const std::string& out_dir, int workers = 1);

/// Named presets: "ss-case", "sc-case", "pde-tworotation".
std::vector<std::string> demo_names();
nlohmann::json demo_config(const std::string& name);

/// FNV-1a 64 of the canonical dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& doc);

}  // namespace mfgrom::cli
