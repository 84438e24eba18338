#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "ntklab/cli.hpp"

int main(int argc, char** argv) {
  using ntklab::cli::Json;
  CLI::App app{"Attention-network NTK experiments"};
  app.require_subcommand(1);
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  for (const std::string& name : ntklab::cli::subcommands()) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--out", out_dir, "output directory")->required();
    sub->add_option("--seed", seed, "overrides the config seed");
  }
  CLI11_PARSE(app, argc, argv);
  const std::string name = app.get_subcommands().front()->get_name();

  Json config = Json::object();
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    try {
      config = Json::parse(in);
    } catch (const Json::exception& e) {
      std::cerr << "lab: cannot parse " << config_path << ": " << e.what() << "\n";
      return 2;
    }
  }
  const auto outcome = ntklab::cli::execute(name, config, out_dir, seed);
  for (const auto& c : outcome.result.checks) {
    std::cout << (c.passed ? "PASS " : "FAIL ") << c.name;
    if (!c.detail.empty()) std::cout << " (" << c.detail << ")";
    std::cout << "\n";
  }
  for (const auto& n : outcome.result.notes) std::cout << "note: " << n << "\n";
  if (!outcome.error.empty()) std::cerr << "lab " << name << ": " << outcome.error << "\n";
  return outcome.exit_code;
}
