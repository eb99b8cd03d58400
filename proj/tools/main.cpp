#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "pipeline.hpp"
#include "subnetscope/error.hpp"

using namespace subnetscope;
using namespace subnetscope::cli;

namespace {

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("subnetscope");
  logger->set_pattern("[%H:%M:%S] %^%l%$ %v");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::info);
  if (const char* env = std::getenv("SUBNETSCOPE_LOG")) {
    const std::string v = env;
    if (v == "error") spdlog::set_level(spdlog::level::err);
    else if (v == "debug") spdlog::set_level(spdlog::level::debug);
    else if (v != "info") spdlog::warn("SUBNETSCOPE_LOG={} not recognised, using info", v);
  }
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();

  CLI::App app{"Class-specific subnetwork extraction, explanation and adversarial detection"};
  app.set_version_flag("--version", version());
  app.require_subcommand(1, 1);
  app.fallthrough();

  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  std::optional<std::size_t> workers;
  std::optional<std::uint64_t> seed;
  bool print_config = false;

  app.add_option("--config", config_path, "JSON run configuration");
  app.add_option("--set", overrides, "Override a config key, e.g. extract.gamma=0.3 (repeatable)");
  app.add_option("--out", out_dir, "Output directory");
  app.add_option("--workers", workers, "Worker threads for per-class and per-method jobs");
  app.add_option("--seed", seed, "Seed applied to every stage");
  app.add_flag("--print-config", print_config, "Print the resolved configuration and exit");

  for (const auto& name : stage_names()) app.add_subcommand(name, "Run the " + name + " stage");
  app.add_subcommand("all", "Run every stage in order");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  RunConfig config;
  try {
    config = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    nlohmann::json doc = to_json(config);
    for (const auto& o : overrides) apply_override(doc, o);
    config = run_config_from_json(doc);
    if (!out_dir.empty()) config.output = out_dir;
    if (workers) {
      if (*workers < 1) throw ConfigError("config key 'workers': must be >= 1");
      config.workers = *workers;
    }
    if (seed) set_all_seeds(config, *seed);
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }

  if (print_config) {
    std::cout << to_json(config).dump(2) << "\n";
    return 0;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    if (command == "all") run_pipeline(config);
    else run_stage(command, config);
  } catch (const std::exception& e) {
    spdlog::error("{}: {}", command, e.what());
    return exit_code_for(e);
  }
  return 0;
}
