#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ntklab/errors.hpp"

namespace ntklab::cli {

using Json = nlohmann::json;

/// Reads one JSON object, filling defaults and recording every key it was
/// asked about. finish() rejects keys nobody asked for.
class ConfigReader {
 public:
  explicit ConfigReader(const Json& config);

  template <typename T>
  T get(const std::string& key, const T& fallback) {
    seen_.insert(key);
    T value = fallback;
    if (config_.contains(key) && !config_.at(key).is_null()) {
      try {
        value = config_.at(key).get<T>();
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config key '" + key + "': " + e.what());
      }
    }
    effective_[key] = value;
    return value;
  }

  /// Like get(), but the key may be absent without a default being echoed.
  template <typename T>
  std::optional<T> maybe(const std::string& key) {
    seen_.insert(key);
    if (!config_.contains(key) || config_.at(key).is_null()) {
      effective_[key] = nullptr;
      return std::nullopt;
    }
    try {
      T value = config_.at(key).get<T>();
      effective_[key] = value;
      return value;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    }
  }

  /// Records an explicit value (e.g. a command-line override) for key.
  void set(const std::string& key, const Json& value) {
    seen_.insert(key);
    effective_[key] = value;
  }

  void finish() const;
  /// The config with defaults filled in.
  const Json& effective() const { return effective_; }

 private:
  Json config_;
  Json effective_ = Json::object();
  std::set<std::string> seen_;
};

struct Check {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// What a subcommand produced.
struct CommandResult {
  std::vector<Check> checks;
  std::vector<std::string> outputs;  // file names relative to the output directory
  Json effective_config;
  std::uint64_t seed = 0;
  bool partial = false;
  std::vector<std::string> notes;

  bool passed() const;
};

const std::vector<std::string>& subcommands();

/// Runs one subcommand; outputs are written under out_dir. Throws ConfigError
/// for bad configs before any compute.
CommandResult run_command(const std::string& name, const Json& config, const std::filesystem::path& out_dir,
                          std::optional<std::uint64_t> seed_override);

struct RunOutcome {
  int exit_code = 0;
  CommandResult result;
  std::string error;
};

/// run_command plus manifest.json. Exit 0 only if every check passed; the
/// manifest is written even when the command fails.
RunOutcome execute(const std::string& name, const Json& config, const std::filesystem::path& out_dir,
                   std::optional<std::uint64_t> seed_override);

}  // namespace ntklab::cli
