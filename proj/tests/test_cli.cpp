#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "run.hpp"

using namespace mfgrom;
using namespace mfgrom::cli;
using Catch::Matchers::WithinAbs;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

json sc_model() { return {{"sigma", 1}, {"mu", 2}, {"g", 4}, {"h", 0}, {"alpha", 3}, {"epsilon", 0.05}}; }

json base(const std::string& task) { return {{"schema", kSchema}, {"task", task}, {"model", sc_model()}}; }

fs::path scratch(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("mfgrom_cli_test_" + name);
  fs::remove_all(d);
  return d;
}

std::string slurp(const fs::path& f) {
  std::ifstream in(f, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& f) { return json::parse(slurp(f)); }

int run_exe(const std::string& args) {
  const std::string cmd = std::string("\"") + MFGROM_EXE + "\" " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

fs::path write_config(const std::string& name, const json& doc) {
  const fs::path f = fs::temp_directory_path() / ("mfgrom_cli_test_" + name + ".json");
  std::ofstream(f) << doc.dump(2);
  return f;
}

}  // namespace

TEST_CASE("config validation rejects malformed documents", "[cli]") {
  CHECK_NOTHROW(parse_config(base("equilibria")));

  json unknown_top = base("equilibria");
  unknown_top["colour"] = "red";
  CHECK_THROWS_AS(parse_config(unknown_top), ConfigError);

  json unknown_model = base("equilibria");
  unknown_model["model"]["beta"] = 1;
  CHECK_THROWS_AS(parse_config(unknown_model), ConfigError);

  json negative_mu = base("equilibria");
  negative_mu["model"]["mu"] = -2;
  CHECK_THROWS_AS(parse_config(negative_mu), ConfigError);

  json missing_key = base("equilibria");
  missing_key["model"].erase("epsilon");
  CHECK_THROWS_AS(parse_config(missing_key), ConfigError);

  json wrong_type = base("equilibria");
  wrong_type["model"]["sigma"] = "one";
  CHECK_THROWS_AS(parse_config(wrong_type), ConfigError);

  json wrong_schema = base("equilibria");
  wrong_schema["schema"] = "mfgrom.run/0";
  CHECK_THROWS_AS(parse_config(wrong_schema), ConfigError);

  CHECK_THROWS_AS(parse_config(base("plot")), ConfigError);

  json bad_section = base("bvp");
  bad_section["bvp"] = {{"bc", {{"q1_0", -10}, {"q2_0", 4.5}, {"q1_T", 10}, {"q2_T", 4.5}}},
                        {"T", 6},
                        {"colour", 1}};
  CHECK_THROWS_AS(parse_config(bad_section), ConfigError);

  json bad_seed = base("equilibria");
  bad_seed["seed"] = -3;
  CHECK_THROWS_AS(parse_config(bad_seed), ConfigError);
}

TEST_CASE("bundled demos embed the exact parameter sets", "[cli]") {
  CHECK(demo_names() == std::vector<std::string>{"ss-case", "sc-case", "pde-tworotation"});
  const RunConfig ss = parse_config(demo_config("ss-case"));
  CHECK(ss.model.sigma == 1);
  CHECK(ss.model.mu == 2);
  CHECK(ss.model.g == 4);
  CHECK(ss.model.h == 0);
  CHECK(ss.model.alpha == 1);
  CHECK(ss.model.epsilon == 0.05);

  const RunConfig sc = parse_config(demo_config("sc-case"));
  CHECK(sc.model.alpha == 3);
  CHECK(sc.model.epsilon == 0.05);

  const json pde = demo_config("pde-tworotation");
  CHECK_NOTHROW(parse_config(pde));
  CHECK(pde["pde"]["grid"] == json({{"L", 40}, {"Nx", 500}, {"Nt", 500}, {"T", 9.5}}));
  CHECK(pde["pde"]["config"]["delta"] == 0.5);
  CHECK(pde["pde"]["config"]["eps_p"] == 0.01);
  CHECK(pde["pde"]["config"]["k_max"] == 1000);
  CHECK(pde["pde"]["config"]["tol"] == 1e-6);

  CHECK_THROWS_AS(demo_config("nope"), ConfigError);
}

TEST_CASE("config hash is stable and sensitive", "[cli]") {
  const json a = base("equilibria");
  json b = a;
  CHECK(config_hash(a) == config_hash(b));
  CHECK(config_hash(a).size() == 16);
  b["model"]["g"] = 4.0000001;
  CHECK(config_hash(a) != config_hash(b));
}

TEST_CASE("linearize task reports the SC equilibrium", "[cli]") {
  const fs::path out = scratch("linearize");
  const RunManifest m = run(parse_config(demo_config("sc-case")), out.string());
  CHECK(m.exit_code == 0);
  const json j = read_json(out / "linearize.json");
  CHECK_THAT(j["equilibrium"]["q2"].get<double>(), WithinAbs(3.81, 5e-3));
  CHECK_THAT(j["eigenvalues"]["lambda"].get<double>(), WithinAbs(0.233, 1e-3));
  CHECK_THAT(j["eigenvalues"]["nu"].get<double>(), WithinAbs(13.8, 0.05));
  fs::remove_all(out);
}

TEST_CASE("manifest lists every file and CSV bodies are reproducible", "[cli]") {
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  json doc = demo_config("ss-case");
  doc["seed"] = 7;
  const RunConfig cfg = parse_config(doc);
  const RunManifest ma = run(cfg, a.string());
  const RunManifest mb = run(cfg, b.string());
  CHECK(ma.exit_code == 0);
  CHECK(ma.config_hash == mb.config_hash);

  std::set<std::string> on_disk;
  for (const auto& e : fs::directory_iterator(a)) on_disk.insert(e.path().filename().string());
  const std::set<std::string> listed(ma.files.begin(), ma.files.end());
  CHECK(listed == on_disk);
  CHECK(listed.count("branch.csv") == 1);

  const json man = read_json(a / "manifest.json");
  CHECK(man["seed"] == 7);
  CHECK(man["config_hash"] == ma.config_hash);
  CHECK(man["tool_version"] == kToolVersion);
  CHECK(man["statuses"].contains("continue"));

  int csvs = 0;
  for (const auto& f : ma.files) {
    if (fs::path(f).extension() != ".csv") continue;
    ++csvs;
    const std::string body = slurp(a / f);
    CHECK(body == slurp(b / f));
    CHECK(body.find('\r') == std::string::npos);
  }
  CHECK(csvs >= 2);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("CSV numbers carry 17 significant digits", "[cli]") {
  const fs::path out = scratch("digits");
  run(parse_config(base("equilibria")), out.string());
  const std::string csv = slurp(out / "equilibria.csv");
  const auto line_end = csv.find('\n');
  const std::string row = csv.substr(line_end + 1, csv.find('\n', line_end + 1) - line_end - 1);
  const std::string q2 = row.substr(row.find(',') + 1, row.find(',', row.find(',') + 1) - row.find(',') - 1);
  const double v = std::stod(q2);
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  CHECK(q2 == buf);
  fs::remove_all(out);
}

TEST_CASE("executable exit codes", "[cli]") {
  SECTION("demo run succeeds") {
    const fs::path out = scratch("exe_demo");
    CHECK(run_exe("--demo sc-case --out " + out.string()) == 0);
    CHECK(fs::exists(out / "manifest.json"));
    fs::remove_all(out);
  }
  SECTION("malformed config exits 1 and writes nothing") {
    const fs::path out = scratch("exe_bad");
    json doc = base("equilibria");
    doc["model"]["mu"] = -2;
    CHECK(run_exe("--config " + write_config("bad", doc).string() + " --out " + out.string()) == 1);
    CHECK(!fs::exists(out));
  }
  SECTION("unparseable JSON exits 1") {
    const fs::path f = fs::temp_directory_path() / "mfgrom_cli_test_garbage.json";
    std::ofstream(f) << "{ not json";
    const fs::path out = scratch("exe_garbage");
    CHECK(run_exe("--config " + f.string() + " --out " + out.string()) == 1);
    CHECK(!fs::exists(out));
  }
  SECTION("non-convergence exits 2 with artifacts") {
    const fs::path out = scratch("exe_nc");
    json doc = base("bvp");
    doc["bvp"] = {{"bc", {{"q1_0", -10}, {"q2_0", 4.5}, {"q1_T", 10}, {"q2_T", 4.5}}}, {"T", 6}};
    CHECK(run_exe("--config " + write_config("nc", doc).string() + " --out " + out.string()) == 2);
    CHECK(fs::exists(out / "bvp_last_iterate.csv"));
    const json man = read_json(out / "manifest.json");
    CHECK(man["exit_code"] == 2);
    CHECK(man["statuses"]["bvp"] == "not-converged");
    fs::remove_all(out);
  }
  SECTION("conflicting flags exit 1") {
    CHECK(run_exe("--demo sc-case --config x.json") == 1);
    CHECK(run_exe("--demo nope") == 1);
  }
}

TEST_CASE("SC diagram over three branches shows multiplicity beyond T = 5.5", "[cli]") {
  const fs::path out = scratch("diagram");
  json doc = base("diagram");
  doc["diagram"] = {{"bc", {{"q1_0", -10}, {"q2_0", 4.5}, {"q1_T", 10}, {"q2_T", 4.5}}},
                    {"T_end", 8},
                    {"T_step", 0.5},
                    {"branches",
                     {{{"label", "B1"}, {"guess", "straight"}, {"T", 0.2}},
                      {{"label", "B2"}, {"guess", "tube"}, {"delta_E", 1}, {"half_periods", 1}},
                      {{"label", "B3"}, {"guess", "tube"}, {"delta_E", 1}, {"half_periods", 2}}}}};
  const RunManifest m = run(parse_config(doc), out.string(), 3);
  std::istringstream csv(slurp(out / "multiplicity.csv"));
  std::string line;
  std::getline(csv, line);
  CHECK(line == "T,solutions,distinct_n");
  int best = 0;
  while (std::getline(csv, line)) {
    double T = 0;
    int n = 0;
    REQUIRE(std::sscanf(line.c_str(), "%lf,%d", &T, &n) == 2);
    if (T > 5.5) best = std::max(best, n);
  }
  INFO("exit code " << m.exit_code);
  CHECK(best >= 2);
  fs::remove_all(out);
}
