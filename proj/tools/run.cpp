#include "run.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "mfgrom/bvp.hpp"
#include "mfgrom/orbits.hpp"
#include "mfgrom/pde.hpp"
#include "mfgrom/spectral.hpp"

namespace mfgrom::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const std::set<std::string> kTasks = {"equilibria", "linearize", "orbit", "tube", "bvp",
                                      "continue", "diagram", "pde", "compare"};

// Read-only view of one config object that rejects unknown keys up front.
class ConfigSection {
 public:
  ConfigSection(const json* j, std::string where, std::set<std::string> allowed)
      : j_(j), where_(std::move(where)) {
    if (!j_) return;
    if (!j_->is_object()) throw ConfigError(where_ + ": expected an object");
    for (const auto& [k, v] : j_->items())
      if (!allowed.count(k)) throw ConfigError(where_ + ": unknown key '" + k + "'");
  }

  bool has(const std::string& k) const { return j_ && j_->contains(k) && !(*j_)[k].is_null(); }

  double num(const std::string& k, double def) const { return has(k) ? num(k) : def; }
  double num(const std::string& k) const {
    if (!has(k)) throw ConfigError(where_ + ": missing '" + k + "'");
    const json& v = (*j_)[k];
    if (!v.is_number()) throw ConfigError(where_ + "." + k + ": expected a number");
    return v.get<double>();
  }
  int integer(const std::string& k, int def) const {
    if (!has(k)) return def;
    const json& v = (*j_)[k];
    if (!v.is_number_integer()) throw ConfigError(where_ + "." + k + ": expected an integer");
    return v.get<int>();
  }
  bool flag(const std::string& k, bool def) const {
    if (!has(k)) return def;
    if (!(*j_)[k].is_boolean()) throw ConfigError(where_ + "." + k + ": expected a boolean");
    return (*j_)[k].get<bool>();
  }
  std::string str(const std::string& k, const std::string& def, const std::set<std::string>& choices) const {
    if (!has(k)) return def;
    const json& v = (*j_)[k];
    if (!v.is_string()) throw ConfigError(where_ + "." + k + ": expected a string");
    const std::string s = v.get<std::string>();
    if (!choices.empty() && !choices.count(s)) throw ConfigError(where_ + "." + k + ": unsupported value '" + s + "'");
    return s;
  }
  std::vector<double> numbers(const std::string& k, std::vector<double> def) const {
    if (!has(k)) return def;
    const json& v = (*j_)[k];
    if (!v.is_array()) throw ConfigError(where_ + "." + k + ": expected an array of numbers");
    std::vector<double> out;
    for (const auto& e : v) {
      if (!e.is_number()) throw ConfigError(where_ + "." + k + ": expected an array of numbers");
      out.push_back(e.get<double>());
    }
    return out;
  }
  const json* sub(const std::string& k) const { return has(k) ? &(*j_)[k] : nullptr; }
  const std::string& where() const { return where_; }

 private:
  const json* j_;
  std::string where_;
};

double positive(double v, const std::string& what) {
  if (!(v > 0)) throw ConfigError(what + " must be positive");
  return v;
}

// ---- section parsers (used for validation and for running) ----

ModelParams parse_model(const json* j) {
  if (!j) throw ConfigError("model: section is required");
  ConfigSection s(j, "model", {"sigma", "mu", "g", "h", "alpha", "epsilon"});
  ModelParams p;
  p.sigma = s.num("sigma");
  p.mu = s.num("mu");
  p.g = s.num("g");
  p.h = s.num("h");
  p.alpha = s.num("alpha");
  p.epsilon = s.num("epsilon");
  try {
    p.validate();
  } catch (const DomainError& e) {
    throw ConfigError(e.what());
  }
  return p;
}

struct EqSpec {
  double q2_min = 0.1, q2_max = 200;
  int scan = 20000, index = 0;
};

EqSpec parse_eq(const json* j) {
  ConfigSection s(j, "equilibria", {"q2_min", "q2_max", "scan", "index"});
  EqSpec e;
  e.q2_min = positive(s.num("q2_min", e.q2_min), "equilibria.q2_min");
  e.q2_max = s.num("q2_max", e.q2_max);
  if (!(e.q2_max > e.q2_min)) throw ConfigError("equilibria: q2_max must exceed q2_min");
  e.scan = s.integer("scan", e.scan);
  e.index = s.integer("index", e.index);
  if (e.scan < 2 || e.index < 0) throw ConfigError("equilibria: bad scan or index");
  return e;
}

BoundaryConditions parse_bc(const json* j, const std::string& where) {
  ConfigSection s(j, where, {"q1_0", "q2_0", "q1_T", "q2_T"});
  BoundaryConditions bc;
  bc.q1_0 = s.num("q1_0", bc.q1_0);
  bc.q2_0 = positive(s.num("q2_0", bc.q2_0), where + ".q2_0");
  bc.q1_T = s.num("q1_T", bc.q1_T);
  bc.q2_T = positive(s.num("q2_T", bc.q2_T), where + ".q2_T");
  return bc;
}

struct SeedSpec {
  std::string guess = "straight";
  double T = 0;  ///< horizon for straight seeds
  double delta_E = 0.1;
  int half_periods = 0;
  int nodes = 201;
};

const std::set<std::string> kSeedKeys = {"guess", "T", "delta_E", "half_periods", "nodes"};

SeedSpec parse_seed(const ConfigSection& s, bool need_T) {
  SeedSpec d;
  d.guess = s.str("guess", d.guess, {"straight", "tube"});
  if (d.guess == "straight" && need_T) d.T = positive(s.num("T"), s.where() + ".T");
  else d.T = s.num("T", 0.0);
  d.delta_E = positive(s.num("delta_E", d.delta_E), s.where() + ".delta_E");
  d.half_periods = s.integer("half_periods", d.half_periods);
  d.nodes = s.integer("nodes", d.nodes);
  if (d.half_periods < 0 || d.nodes < 3) throw ConfigError(s.where() + ": bad half_periods or nodes");
  return d;
}

BvpOptions parse_bvp_options(const ConfigSection& s) {
  BvpOptions o;
  o.tol = positive(s.num("tol", o.tol), s.where() + ".tol");
  o.max_refinements = s.integer("max_refinements", o.max_refinements);
  o.max_nodes = std::size_t(s.integer("max_nodes", int(o.max_nodes)));
  return o;
}

struct BvpSpec {
  BoundaryConditions bc;
  SeedSpec seed;
  BvpOptions opts;
  double q1_window = 0.5;
};

BvpSpec parse_bvp(const json* j, const std::string& where, bool need_T = true,
                  std::set<std::string> extra = {}) {
  std::set<std::string> keys = kSeedKeys;
  keys.insert({"bc", "tol", "max_refinements", "max_nodes", "q1_window"});
  keys.merge(extra);
  ConfigSection s(j, where, keys);
  BvpSpec b;
  b.bc = parse_bc(s.sub("bc"), where + ".bc");
  b.seed = parse_seed(s, need_T);
  b.opts = parse_bvp_options(s);
  b.q1_window = positive(s.num("q1_window", b.q1_window), where + ".q1_window");
  return b;
}

struct ContinueSpec {
  BvpSpec bvp;
  ContinuationOptions opts;
};

ContinuationOptions parse_continuation(const ConfigSection& s, const BvpSpec& b) {
  ContinuationOptions o;
  o.T_end = positive(s.num("T_end", o.T_end), s.where() + ".T_end");
  o.dT0 = positive(s.num("dT0", o.dT0), s.where() + ".dT0");
  o.dT_min = positive(s.num("dT_min", o.dT_min), s.where() + ".dT_min");
  o.dT_max = positive(s.num("dT_max", o.dT_max), s.where() + ".dT_max");
  o.max_points = s.integer("max_points", o.max_points);
  o.arclength_fallback = s.flag("arclength", o.arclength_fallback);
  o.q1_window = b.q1_window;
  o.bvp = b.opts;
  if (o.max_points < 1) throw ConfigError(s.where() + ".max_points must be >= 1");
  return o;
}

const std::set<std::string> kContinueKeys = {"bc", "tol", "max_refinements", "max_nodes", "q1_window",
                                             "T_end", "dT0", "dT_min", "dT_max", "max_points", "arclength",
                                             "guess", "T", "delta_E", "half_periods", "nodes"};

ContinueSpec parse_continue(const json* j) {
  ContinueSpec c;
  c.bvp = parse_bvp(j, "continue", true, kContinueKeys);
  ConfigSection s(j, "continue", kContinueKeys);
  c.opts = parse_continuation(s, c.bvp);
  return c;
}

struct DiagramSpec {
  BoundaryConditions bc;
  ContinuationOptions opts;
  std::vector<std::pair<std::string, SeedSpec>> branches;
  double T_step = 0.1;
};

DiagramSpec parse_diagram(const json* j) {
  ConfigSection s(j, "diagram", {"bc", "branches", "T_end", "dT0", "dT_min", "dT_max", "max_points", "arclength",
                           "tol", "max_refinements", "max_nodes", "q1_window", "T_step"});
  DiagramSpec d;
  d.bc = parse_bc(s.sub("bc"), "diagram.bc");
  BvpSpec shared;
  shared.opts = parse_bvp_options(s);
  shared.q1_window = positive(s.num("q1_window", 0.5), "diagram.q1_window");
  d.opts = parse_continuation(s, shared);
  d.T_step = positive(s.num("T_step", d.T_step), "diagram.T_step");
  const json* br = s.sub("branches");
  if (!br || !br->is_array() || br->empty()) throw ConfigError("diagram.branches: expected a non-empty array");
  for (std::size_t i = 0; i < br->size(); ++i) {
    const std::string where = "diagram.branches[" + std::to_string(i) + "]";
    std::set<std::string> keys = kSeedKeys;
    keys.insert("label");
    ConfigSection b(&(*br)[i], where, keys);
    d.branches.emplace_back(b.str("label", "B" + std::to_string(i + 1), {}), parse_seed(b, true));
  }
  return d;
}

struct PdeSpec {
  Grid grid;
  PdeConfig cfg;
  double X0 = -10, S0 = 4.5, X1 = 10, S1 = 4.5;
  bool warm = false;
  BvpSpec warm_bvp;
  double q1_window = 0.5;
};

PdeSpec parse_pde(const json* j, const std::string& where) {
  ConfigSection s(j, where, {"grid", "config", "m_ic", "m_fc", "warm_start", "q1_window"});
  PdeSpec d;
  ConfigSection g(s.sub("grid"), where + ".grid", {"L", "Nx", "Nt", "T"});
  d.grid.L = g.num("L", d.grid.L);
  d.grid.Nx = g.integer("Nx", d.grid.Nx);
  d.grid.Nt = g.integer("Nt", d.grid.Nt);
  d.grid.T = g.num("T", d.grid.T);
  ConfigSection c(s.sub("config"), where + ".config", {"eps_p", "delta", "k_max", "tol", "newton_tol", "newton_max"});
  d.cfg.eps_p = c.num("eps_p", d.cfg.eps_p);
  d.cfg.delta = c.num("delta", d.cfg.delta);
  d.cfg.k_max = c.integer("k_max", d.cfg.k_max);
  d.cfg.tol = c.num("tol", d.cfg.tol);
  d.cfg.newton_tol = c.num("newton_tol", d.cfg.newton_tol);
  d.cfg.newton_max = c.integer("newton_max", d.cfg.newton_max);
  try {
    d.grid.validate();
    d.cfg.validate();
  } catch (const DomainError& e) {
    throw ConfigError(e.what());
  }
  ConfigSection mi(s.sub("m_ic"), where + ".m_ic", {"X", "S"});
  ConfigSection mf(s.sub("m_fc"), where + ".m_fc", {"X", "S"});
  d.X0 = mi.num("X", d.X0);
  d.S0 = positive(mi.num("S", d.S0), where + ".m_ic.S");
  d.X1 = mf.num("X", d.X1);
  d.S1 = positive(mf.num("S", d.S1), where + ".m_fc.S");
  if (s.has("warm_start")) {
    d.warm = true;
    d.warm_bvp = parse_bvp(s.sub("warm_start"), where + ".warm_start", false);
  }
  d.q1_window = positive(s.num("q1_window", d.q1_window), where + ".q1_window");
  return d;
}

struct OrbitSpec {
  std::vector<double> delta_E{1e-6, 0.1, 1.0, 1.6};
  bool samples = true;
};

OrbitSpec parse_orbit(const json* j) {
  ConfigSection s(j, "orbit", {"delta_E", "samples"});
  OrbitSpec o;
  o.delta_E = s.numbers("delta_E", o.delta_E);
  for (double v : o.delta_E) positive(v, "orbit.delta_E entries");
  o.samples = s.flag("samples", o.samples);
  return o;
}

struct TubeSpec {
  double delta_E = 0.01;
  TubeBranch branch = TubeBranch::Stable;
  int side = -1;
  TubeOptions opts;
};

TubeSpec parse_tube(const json* j) {
  ConfigSection s(j, "tube", {"delta_E", "branch", "side", "n_strands", "t_int", "q1_stop", "d"});
  TubeSpec t;
  t.delta_E = positive(s.num("delta_E", t.delta_E), "tube.delta_E");
  t.branch = s.str("branch", "stable", {"stable", "unstable"}) == "stable" ? TubeBranch::Stable : TubeBranch::Unstable;
  t.side = s.integer("side", t.side);
  if (t.side != 1 && t.side != -1) throw ConfigError("tube.side must be +1 or -1");
  t.opts.n_strands = s.integer("n_strands", 32);
  t.opts.t_int = positive(s.num("t_int", 200.0), "tube.t_int");
  t.opts.q1_stop = positive(s.num("q1_stop", 10.0), "tube.q1_stop");
  t.opts.d = s.num("d", 0.0);
  if (t.opts.n_strands < 1) throw ConfigError("tube.n_strands must be >= 1");
  return t;
}

struct CompareSpec {
  BvpSpec bvp;
  PdeSpec pde;
};

CompareSpec parse_compare(const json* j) {
  ConfigSection s(j, "compare", {"bvp", "pde"});
  CompareSpec c;
  c.pde = parse_pde(s.sub("pde"), "compare.pde");
  c.bvp = parse_bvp(s.sub("bvp"), "compare.bvp", false);
  return c;
}

// ---- output helpers ----

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

class Writer {
 public:
  explicit Writer(fs::path dir, RunManifest& m) : dir_(std::move(dir)), m_(m) {}

  void file(const std::string& name, const std::string& body) {
    std::ofstream os(dir_ / name, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + (dir_ / name).string());
    os << body;
    m_.files.push_back(name);
  }
  void json_file(const std::string& name, const json& j) { file(name, j.dump(2) + "\n"); }

 private:
  fs::path dir_;
  RunManifest& m_;
};

std::string trajectory_csv(const ModelParams& p, const Trajectory& t) {
  std::ostringstream os;
  write_trajectory_csv(os, p, t);
  return os.str();
}

json eq_json(const Equilibrium& e) {
  return {{"q2", e.q2()}, {"kind", to_string(e.kind)}, {"a", e.a}, {"b", e.b}, {"c", e.c}, {"d", e.d},
          {"rate1", e.rate1}, {"rate2", e.rate2}, {"energy", e.energy}};
}

Equilibrium pick_equilibrium(const ModelParams& p, const EqSpec& s) {
  const auto eqs = find_equilibria(p, s.q2_min, s.q2_max, s.scan);
  if (int(eqs.size()) <= s.index) throw DomainError("no equilibrium with the requested index in the scan range");
  return eqs[s.index];
}

std::optional<BvpSolution> build_seed(const ModelParams& p, const Equilibrium& eq, const BoundaryConditions& bc,
                                      const SeedSpec& s, double T_override = 0) {
  if (s.guess == "tube") return tube_seed_guess(p, eq, bc, eq.energy + s.delta_E, s.half_periods, std::max(s.nodes, 801));
  const double T = T_override > 0 ? T_override : s.T;
  return straight_line_guess(p, bc, T, s.nodes);
}

json phases_json(const Phases& ph) {
  return {{"defined", ph.defined}, {"t_a", ph.t_a}, {"tau_erg", ph.tau_erg}, {"t_d", ph.t_d}};
}

json solution_json(const BvpSolution& s) {
  return {{"T", s.T}, {"energy", s.energy}, {"nodes", s.size()}, {"defect", s.residual},
          {"bc_residual", s.bc_residual}, {"rotations", s.rotations}, {"phases", phases_json(s.phases)},
          {"newton_iterations", s.newton_iterations}};
}

// Solves a BVP section; fills status and writes the solution file.
std::optional<BvpSolution> run_bvp(const ModelParams& p, const Equilibrium& eq, const BvpSpec& b, double T_override,
                                   Writer& w, RunManifest& m, const std::string& prefix) {
  auto seed = build_seed(p, eq, b.bc, b.seed, T_override);
  if (!seed) {
    m.statuses[prefix] = "seed-unavailable";
    return std::nullopt;
  }
  const double T = T_override > 0 ? T_override : seed->T;
  try {
    BvpSolution s = solve_bvp(p, b.bc, T, *seed, b.opts);
    s.rotations = rotation_count(p, s, eq, b.q1_window);
    s.phases = phase_decomposition(s, eq, b.q1_window);
    w.file(prefix + "_solution.csv", trajectory_csv(p, s.as_trajectory(p)));
    json j = solution_json(s);
    j["converged"] = true;
    w.json_file(prefix + ".json", j);
    m.statuses[prefix] = "converged";
    return s;
  } catch (const BvpConvergenceError& e) {
    const BvpSolution& last = e.last_iterate();
    w.file(prefix + "_last_iterate.csv", trajectory_csv(p, last.as_trajectory(p)));
    w.json_file(prefix + ".json", {{"converged", false}, {"error", e.what()}, {"T", T}});
    m.statuses[prefix] = "not-converged";
    return std::nullopt;
  }
}

std::string table_csv(const Table& t, const Grid& g) {
  std::string out = "t";
  for (int i = 0; i <= g.Nx; ++i) out += "," + num(g.x(i));
  out += "\n";
  for (Eigen::Index n = 0; n < t.rows(); ++n) {
    out += num(g.t(int(n)));
    for (Eigen::Index i = 0; i < t.cols(); ++i) out += "," + num(t(n, i));
    out += "\n";
  }
  return out;
}

// Runs the PDE section; returns the extracted moment series when available.
std::optional<MomentSeries> run_pde(const ModelParams& p, const Equilibrium& eq, const PdeSpec& d,
                                    const std::optional<BvpSolution>& warm, Writer& w, RunManifest& m) {
  const Row mi = gaussian_density(d.X0, p.epsilon * d.S0, d.grid);
  const Row mf = gaussian_density(d.X1, p.epsilon * d.S1, d.grid);
  Table warm_M;
  if (warm) warm_M = warm_start_density(p, *warm, d.grid);
  const PdeResult r = picard_solve(p, mi, mf, d.grid, d.cfg, warm ? &warm_M : nullptr);

  std::string log = "k,err_u,err_m\n";
  for (const auto& e : r.log.entries) log += std::to_string(e.k) + "," + num(e.err_u) + "," + num(e.err_m) + "\n";
  w.file("density.csv", table_csv(r.fields.M, d.grid));
  w.file("value.csv", table_csv(r.fields.U, d.grid));
  w.file("convergence.csv", log);

  std::optional<MomentSeries> ms;
  json summary = {{"converged", r.log.converged}, {"iterations", r.log.iterations()},
                  {"final_density_error", r.final_density_error}, {"mass_drift", r.mass_drift},
                  {"min_density", r.min_density}, {"negative_density", r.negative_density_flag},
                  {"dt", d.grid.dt()}, {"dx", d.grid.dx()}};
  if (!r.failure.empty()) summary["failure"] = r.failure;
  try {
    ms = extract_moments(r.fields, d.grid, p);
    std::string csv = "t,X,S,P,Lambda,q1,p1,q2,p2\n";
    for (std::size_t n = 0; n < ms->t.size(); ++n) {
      const auto& l = ms->lagrangian[n];
      const auto& x = ms->phase[n];
      csv += num(ms->t[n]) + "," + num(l.X) + "," + num(l.S) + "," + num(l.P) + "," + num(l.Lambda) + "," +
             num(x[0]) + "," + num(x[1]) + "," + num(x[2]) + "," + num(x[3]) + "\n";
    }
    w.file("phase.csv", csv);
    summary["rotation_count"] = count_p2_crossings(ms->phase, d.q1_window);
  } catch (const DomainError& e) {
    summary["rotation_count"] = nullptr;
    summary["extraction_error"] = e.what();
  }
  (void)eq;
  w.json_file("pde_summary.json", summary);
  m.statuses["pde"] = r.log.converged ? "converged" : "not-converged";
  return ms;
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void validate_task_section(const RunConfig& c) {
  const json& r = c.raw;
  auto sec = [&](const char* k) { return r.contains(k) ? &r[k] : nullptr; };
  parse_eq(sec("equilibria"));
  if (c.task == "orbit") parse_orbit(sec("orbit"));
  if (c.task == "tube") parse_tube(sec("tube"));
  if (c.task == "bvp") parse_bvp(sec("bvp"), "bvp");
  if (c.task == "continue") parse_continue(sec("continue"));
  if (c.task == "diagram") parse_diagram(sec("diagram"));
  if (c.task == "pde") parse_pde(sec("pde"), "pde");
  if (c.task == "compare") parse_compare(sec("compare"));
}

}  // namespace

json RunManifest::to_json() const {
  return {{"schema", kSchema}, {"config_hash", config_hash}, {"tool_version", tool_version}, {"seed", seed},
          {"started", started}, {"finished", finished}, {"files", files}, {"statuses", statuses},
          {"exit_code", exit_code}};
}

std::string config_hash(const json& doc) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : doc.dump()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

RunConfig parse_config(const json& doc) {
  std::set<std::string> top = {"schema", "task", "model", "output", "seed"};
  for (const auto& t : kTasks) top.insert(t);
  ConfigSection s(&doc, "config", top);
  if (s.str("schema", "", {}) != kSchema) throw ConfigError(std::string("config: schema must be '") + kSchema + "'");
  RunConfig c;
  c.raw = doc;
  c.task = s.str("task", "", kTasks);
  if (c.task.empty()) throw ConfigError("config: missing task");
  c.model = parse_model(s.sub("model"));
  c.output = s.str("output", c.output, {});
  if (s.has("seed")) {
    const json& sd = doc["seed"];
    if (!sd.is_number_integer() || (!sd.is_number_unsigned() && sd.get<std::int64_t>() < 0))
      throw ConfigError("config.seed: expected a non-negative integer");
    c.seed = doc["seed"].get<std::uint64_t>();
  }
  validate_task_section(c);
  return c;
}

RunManifest run(const RunConfig& c, const std::string& out_dir, int workers) {
  RunManifest m;
  m.started = utc_now();
  m.config_hash = config_hash(c.raw);
  m.seed = c.seed;
  fs::create_directories(out_dir);
  Writer w(out_dir, m);
  w.json_file("config.json", c.raw);

  const ModelParams& p = c.model;
  const json& r = c.raw;
  auto sec = [&](const char* k) { return r.contains(k) ? &r[k] : nullptr; };
  const EqSpec es = parse_eq(sec("equilibria"));

  if (c.task == "equilibria") {
    const auto eqs = find_equilibria(p, es.q2_min, es.q2_max, es.scan);
    std::string csv = "index,q2,kind,a,b,c,d,rate1,rate2,energy\n";
    json arr = json::array();
    for (std::size_t i = 0; i < eqs.size(); ++i) {
      const auto& e = eqs[i];
      csv += std::to_string(i) + "," + num(e.q2()) + "," + to_string(e.kind) + "," + num(e.a) + "," + num(e.b) +
             "," + num(e.c) + "," + num(e.d) + "," + num(e.rate1) + "," + num(e.rate2) + "," + num(e.energy) + "\n";
      arr.push_back(eq_json(e));
    }
    w.file("equilibria.csv", csv);
    w.json_file("equilibria.json", {{"equilibria", arr}});
    m.statuses["equilibria"] = eqs.empty() ? "none-found" : "ok";
  } else {
    const Equilibrium eq = pick_equilibrium(p, es);
    if (c.task == "linearize") {
      const EigenBasis B = eigen_basis(eq);
      json T = json::array();
      for (int i = 0; i < 4; ++i) T.push_back({B.T(i, 0), B.T(i, 1), B.T(i, 2), B.T(i, 3)});
      json j = {{"equilibrium", eq_json(eq)}, {"T", T}, {"a1", B.a1}, {"a2", B.a2},
                {"q1_coefficient", B.T(0, 0)}};
      if (eq.kind == EquilibriumKind::SaddleCenter) {
        j["eigenvalues"] = {{"lambda", eq.rate1}, {"nu", eq.rate2}};
        j["orbit_energy_upper_bound"] = orbit_energy_upper_bound(p, eq);
        j["linear_period"] = 2 * 3.14159265358979323846 / eq.rate2;
      } else {
        j["eigenvalues"] = {{"gamma1", eq.rate1}, {"gamma2", eq.rate2}};
      }
      w.json_file("linearize.json", j);
      m.statuses["linearize"] = "ok";
    } else if (c.task == "orbit") {
      const OrbitSpec o = parse_orbit(sec("orbit"));
      std::string csv = "delta_E,E,period,lambda_u,det_M,closure\n";
      bool all = true;
      for (std::size_t k = 0; k < o.delta_E.size(); ++k) {
        try {
          const PeriodicOrbit po = orbit_at_energy(p, eq, eq.energy + o.delta_E[k]);
          csv += num(o.delta_E[k]) + "," + num(po.energy) + "," + num(po.period) + "," + num(po.lambda_u) + "," +
                 num(po.monodromy.determinant()) + "," + num(po.closure_residual) + "\n";
          if (o.samples) w.file("orbit_" + std::to_string(k) + ".csv", trajectory_csv(p, po.samples));
        } catch (const OrbitError& e) {
          csv += num(o.delta_E[k]) + ",nan,nan,nan,nan,nan\n";
          all = false;
        }
      }
      w.file("orbits.csv", csv);
      m.statuses["orbit"] = all ? "ok" : "some-energies-without-orbit";
    } else if (c.task == "tube") {
      const TubeSpec t = parse_tube(sec("tube"));
      const PeriodicOrbit po = orbit_at_energy(p, eq, eq.energy + t.delta_E);
      const TubeManifold tm = tube(p, po, t.branch, t.side, t.opts);
      std::string csv = "strand,tau,t,q1,p1,q2,p2,E\n";
      int reached = 0;
      double lo = 1e300, hi = -1e300;
      for (std::size_t k = 0; k < tm.strands.size(); ++k) {
        const auto& s = tm.strands[k];
        for (std::size_t i = 0; i < s.traj.size(); ++i) {
          const auto& x = s.traj.states[i];
          csv += std::to_string(k) + "," + num(s.tau) + "," + num(s.traj.times[i]) + "," + num(x[0]) + "," +
                 num(x[1]) + "," + num(x[2]) + "," + num(x[3]) + "," + num(energy(p, x)) + "\n";
        }
        if (s.reached_stop) {
          ++reached;
          lo = std::min(lo, s.stop_state[kQ2]);
          hi = std::max(hi, s.stop_state[kQ2]);
        }
      }
      w.file("tube.csv", csv);
      json j = {{"energy", tm.energy}, {"period", po.period}, {"lambda_u", po.lambda_u}, {"d", tm.d},
                {"branch", to_string(tm.branch)}, {"side", tm.side}, {"n_strands", tm.strands.size()},
                {"reached_stop", reached}};
      if (reached) j["stop_q2_range"] = {lo, hi};
      w.json_file("tube.json", j);
      m.statuses["tube"] = "ok";
    } else if (c.task == "bvp") {
      const BvpSpec b = parse_bvp(sec("bvp"), "bvp");
      run_bvp(p, eq, b, b.seed.T, w, m, "bvp");
    } else if (c.task == "continue") {
      const ContinueSpec cs = parse_continue(sec("continue"));
      auto seed_guess = build_seed(p, eq, cs.bvp.bc, cs.bvp.seed);
      std::optional<BvpSolution> seed;
      if (seed_guess) {
        try {
          seed = solve_bvp(p, cs.bvp.bc, seed_guess->T, *seed_guess, cs.bvp.opts);
        } catch (const ConvergenceError&) {
        }
      }
      if (!seed) {
        m.statuses["continue"] = "seed-not-converged";
      } else {
        const Branch br = continue_branch(p, cs.bvp.bc, eq, *seed, cs.opts, "branch");
        std::string csv = "T,E,n,arclength\n";
        for (const auto& pt : br.points)
          csv += num(pt.T) + "," + num(pt.E) + "," + std::to_string(pt.rotations) + "," + (pt.arclength ? "1" : "0") + "\n";
        w.file("branch.csv", csv);
        w.file("branch_last_solution.csv", trajectory_csv(p, br.solutions.back().as_trajectory(p)));
        w.json_file("branch.json", {{"status", to_string(br.status)}, {"note", br.note}, {"topology", br.topology},
                                    {"points", br.points.size()}, {"equilibrium_energy", eq.energy},
                                    {"last", solution_json(br.solutions.back())}});
        m.statuses["continue"] = to_string(br.status);
      }
    } else if (c.task == "diagram") {
      const DiagramSpec ds = parse_diagram(sec("diagram"));
      std::vector<BranchSpec> specs;
      for (const auto& [label, sd] : ds.branches) {
        auto g = build_seed(p, eq, ds.bc, sd);
        if (!g) {
          m.statuses["diagram:" + label] = "seed-unavailable";
          continue;
        }
        try {
          BranchSpec b{label, solve_bvp(p, ds.bc, g->T, *g, ds.opts.bvp), ds.opts};
          specs.push_back(std::move(b));
        } catch (const ConvergenceError&) {
          m.statuses["diagram:" + label] = "seed-not-converged";
        }
      }
      const Diagram dg = bifurcation_diagram(p, ds.bc, eq, specs, workers);
      std::string csv = "branch,T,E,n\n";
      for (const auto& row : dg.rows) csv += row.branch + "," + num(row.T) + "," + num(row.E) + "," + std::to_string(row.n) + "\n";
      w.file("diagram.csv", csv);
      std::string mult = "T,solutions,distinct_n\n";
      const int steps = int(std::floor(ds.opts.T_end / ds.T_step + 1e-9));
      for (int k = 1; k <= steps; ++k) {
        const double T = k * ds.T_step;
        const auto rows = dg.solutions_at(T);
        std::set<int> ns;
        for (const auto& row : rows) ns.insert(row.n);
        mult += num(T) + "," + std::to_string(rows.size()) + "," + std::to_string(ns.size()) + "\n";
      }
      w.file("multiplicity.csv", mult);
      json br = json::array();
      for (const auto& b : dg.branches) {
        br.push_back({{"label", b.label}, {"status", to_string(b.status)}, {"note", b.note},
                      {"topology", b.topology}, {"points", b.points.size()},
                      {"T_range", {b.points.front().T, b.points.back().T}}});
        m.statuses["diagram:" + b.label] = to_string(b.status);
      }
      w.json_file("diagram.json", {{"branches", br}});
    } else if (c.task == "pde") {
      const PdeSpec d = parse_pde(sec("pde"), "pde");
      std::optional<BvpSolution> warm;
      if (d.warm) warm = run_bvp(p, eq, d.warm_bvp, d.grid.T, w, m, "warm_start");
      run_pde(p, eq, d, warm, w, m);
    } else if (c.task == "compare") {
      const CompareSpec cs = parse_compare(sec("compare"));
      const auto bvp = run_bvp(p, eq, cs.bvp, cs.pde.grid.T, w, m, "bvp");
      const auto ms = run_pde(p, eq, cs.pde, bvp, w, m);
      json j = {{"bvp_available", bool(bvp)}, {"pde_moments_available", bool(ms)}};
      if (bvp && ms) {
        const TopologyReport t = compare_topology(p, *ms, *bvp, eq, cs.bvp.q1_window);
        j.update({{"n_pde", t.n_pde}, {"n_bvp", t.n_bvp}, {"match", t.match}, {"max_q_deviation", t.max_q_deviation}});
      }
      w.json_file("topology.json", j);
    }
  }

  m.exit_code = 0;
  for (const auto& [k, v] : m.statuses)
    if (v == "not-converged" || v == "seed-not-converged" || v == "seed-unavailable") m.exit_code = 2;
  m.finished = utc_now();
  m.files.push_back("manifest.json");
  std::ofstream(fs::path(out_dir) / "manifest.json") << m.to_json().dump(2) << "\n";
  return m;
}

std::vector<std::string> demo_names() { return {"ss-case", "sc-case", "pde-tworotation"}; }

json demo_config(const std::string& name) {
  const json sc_model = {{"sigma", 1}, {"mu", 2}, {"g", 4}, {"h", 0}, {"alpha", 3}, {"epsilon", 0.05}};
  const json ss_model = {{"sigma", 1}, {"mu", 2}, {"g", 4}, {"h", 0}, {"alpha", 1}, {"epsilon", 0.05}};
  if (name == "ss-case")
    return {{"schema", kSchema}, {"task", "continue"}, {"model", ss_model},
            {"continue", {{"guess", "straight"}, {"T", 0.3}, {"T_end", 12}}}};
  if (name == "sc-case")
    return {{"schema", kSchema}, {"task", "linearize"}, {"model", sc_model}};
  if (name == "pde-tworotation")
    return {{"schema", kSchema}, {"task", "pde"}, {"model", sc_model},
            {"pde", {{"grid", {{"L", 40}, {"Nx", 500}, {"Nt", 500}, {"T", 9.5}}},
                     {"config", {{"eps_p", 0.01}, {"delta", 0.5}, {"k_max", 1000}, {"tol", 1e-6}}},
                     {"m_ic", {{"X", -10}, {"S", 4.5}}},
                     {"m_fc", {{"X", 10}, {"S", 4.5}}}}}};
  throw ConfigError("unknown demo '" + name + "'");
}

}  // namespace mfgrom::cli
