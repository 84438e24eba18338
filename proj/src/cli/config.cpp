#include <algorithm>
#include <chrono>
#include <ctime>

#include <fmt/format.h>

#include "ntklab/cli.hpp"
#include "ntklab/io.hpp"

namespace ntklab::cli {

ConfigReader::ConfigReader(const Json& config) : config_(config) {
  if (config_.is_null()) config_ = Json::object();
  if (!config_.is_object()) throw ConfigError("config must be a JSON object");
}

void ConfigReader::finish() const {
  std::vector<std::string> unknown;
  for (const auto& item : config_.items()) {
    if (!seen_.count(item.key())) unknown.push_back(item.key());
  }
  if (!unknown.empty()) {
    std::string list;
    for (const auto& k : unknown) list += (list.empty() ? "" : ", ") + k;
    throw ConfigError(fmt::format("unknown config keys: {}", list));
  }
}

bool CommandResult::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
}

namespace {

std::string utc_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

RunOutcome execute(const std::string& name, const Json& config, const std::filesystem::path& out_dir,
                   std::optional<std::uint64_t> seed_override) {
  RunOutcome outcome;
  const std::string started = utc_now();
  const auto t0 = std::chrono::steady_clock::now();
  std::filesystem::create_directories(out_dir);
  std::string status = "ok";
  try {
    outcome.result = run_command(name, config, out_dir, seed_override);
    if (!outcome.result.passed()) status = "checks_failed";
  } catch (const ConfigError& e) {
    outcome.error = e.what();
    status = "config_error";
  } catch (const std::exception& e) {
    outcome.error = e.what();
    status = "error";
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  Json manifest;
  manifest["subcommand"] = name;
  manifest["version"] = NTKLAB_VERSION;
  manifest["status"] = status;
  manifest["seed"] = outcome.result.seed;
  manifest["config"] = outcome.result.effective_config.is_null() ? config : outcome.result.effective_config;
  manifest["started_utc"] = started;
  manifest["wall_clock_seconds"] = seconds;
  manifest["partial"] = outcome.result.partial;
  if (!outcome.error.empty()) manifest["error"] = outcome.error;
  Json checks = Json::array();
  for (const Check& c : outcome.result.checks) {
    checks.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
  }
  manifest["checks"] = checks;
  manifest["notes"] = outcome.result.notes;
  Json outputs = Json::array();
  for (const std::string& f : outcome.result.outputs) {
    outputs.push_back({{"file", f}, {"sha256", sha256_file(out_dir / f)}});
  }
  manifest["outputs"] = outputs;
  write_file_atomic(out_dir / "manifest.json", manifest.dump(2) + "\n");

  if (status == "ok") {
    outcome.exit_code = 0;
  } else if (status == "checks_failed") {
    outcome.exit_code = 1;
  } else if (status == "config_error") {
    outcome.exit_code = 2;
  } else {
    outcome.exit_code = 3;
  }
  return outcome;
}

}  // namespace ntklab::cli
