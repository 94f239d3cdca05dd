#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "run.hpp"

int main(int argc, char** argv) {
  using namespace mfgrom::cli;
  CLI::App app{"Gaussian mean-field game reduced-order solver"};
  std::string config_path, out_dir, demo;
  int workers = 1;
  bool list = false;
  app.add_option("--config", config_path, "JSON run configuration");
  app.add_option("--demo", demo, "named preset (see --list-demos)");
  app.add_option("--out", out_dir, "output directory (defaults to the config's output)");
  app.add_option("--workers", workers, "threads for branch continuation")->check(CLI::PositiveNumber);
  app.add_flag("--list-demos", list, "print preset names and exit");
  CLI11_PARSE(app, argc, argv);

  if (list) {
    for (const auto& n : demo_names()) std::cout << n << "\n";
    return 0;
  }
  if (config_path.empty() == demo.empty()) {
    std::cerr << "error: give exactly one of --config or --demo\n";
    return 1;
  }

  RunConfig cfg;
  try {
    nlohmann::json doc;
    if (!demo.empty()) {
      doc = demo_config(demo);
    } else {
      std::ifstream is(config_path);
      if (!is) throw ConfigError("cannot open " + config_path);
      try {
        doc = nlohmann::json::parse(is);
      } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("invalid JSON: ") + e.what());
      }
    }
    cfg = parse_config(doc);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  }
  if (out_dir.empty()) out_dir = cfg.output;

  try {
    const RunManifest m = run(cfg, out_dir, workers);
    for (const auto& [k, v] : m.statuses) std::cout << k << ": " << v << "\n";
    std::cout << "wrote " << m.files.size() << " files to " << out_dir << "\n";
    return m.exit_code;
  } catch (const mfgrom::ConvergenceError& e) {
    std::cerr << "did not converge: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
