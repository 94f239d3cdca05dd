#include "mfgrom/bvp.hpp"

#include <Eigen/SparseCore>
#include <Eigen/SparseLU>

#include <algorithm>
#include <cmath>
#include <future>
#include <limits>
#include <string>

namespace mfgrom {

namespace {

using SpMat = Eigen::SparseMatrix<double>;
using Triplet = Eigen::Triplet<double>;
using VecX = Eigen::VectorXd;

// Solution on the normalized mesh tau in [0, 1], t = T * tau.
struct TauMesh {
  std::vector<double> tau;
  std::vector<PhaseState> y;

  int intervals() const { return int(tau.size()) - 1; }
};

Vector4 row_weights(const ModelParams& p) {
  return {1.0, 1.0, 1.0, 1.0 / (p.epsilon * p.epsilon * p.mu)};
}

TauMesh to_tau(const BvpSolution& s) {
  TauMesh m;
  const double T = s.mesh.back() - s.mesh.front();
  m.tau.reserve(s.size());
  for (double t : s.mesh) m.tau.push_back((t - s.mesh.front()) / T);
  m.tau.back() = 1.0;
  m.y = s.states;
  return m;
}

VecX pack(const TauMesh& m) {
  VecX Y(4 * m.y.size());
  for (std::size_t i = 0; i < m.y.size(); ++i) Y.segment<4>(4 * i) = m.y[i];
  return Y;
}

void unpack(const VecX& Y, TauMesh& m) {
  for (std::size_t i = 0; i < m.y.size(); ++i) m.y[i] = Y.segment<4>(4 * i);
}

bool admissible(const VecX& Y, double floor) {
  for (Eigen::Index i = kQ2; i < Y.size(); i += 4)
    if (!(Y[i] > floor) || !std::isfinite(Y[i])) return false;
  return Y.allFinite();
}

// Interpolates a mesh solution at new tau nodes with cubic Hermite pieces.
TauMesh resample(const ModelParams& p, const TauMesh& m, double T, const std::vector<double>& taus) {
  TauMesh out;
  out.tau = taus;
  out.y.resize(taus.size());
  std::size_t k = 0;
  for (std::size_t j = 0; j < taus.size(); ++j) {
    const double s = taus[j];
    while (k + 2 < m.tau.size() && m.tau[k + 1] < s) ++k;
    const double ta = m.tau[k], tb = m.tau[k + 1];
    const double h = tb - ta;
    const double u = std::clamp((s - ta) / h, 0.0, 1.0);
    const PhaseState fa = T * vector_field(p, m.y[k]);
    const PhaseState fb = T * vector_field(p, m.y[k + 1]);
    const double u2 = u * u, u3 = u2 * u;
    out.y[j] = (2 * u3 - 3 * u2 + 1) * m.y[k] + (u3 - 2 * u2 + u) * h * fa +
               (-2 * u3 + 3 * u2) * m.y[k + 1] + (u3 - u2) * h * fb;
  }
  return out;
}

// Hermite-Simpson residual and Jacobian. Rows: 2 initial conditions, 4 per
// interval, 2 final conditions. With `t_column`, a final column holds dF/dT.
class Collocation {
 public:
  Collocation(const ModelParams& p, const BoundaryConditions& bc, const std::vector<double>& tau)
      : p_(p), bc_(bc), tau_(tau), w_(row_weights(p)) {}

  int unknowns() const { return 4 * int(tau_.size()); }

  /// Newton tolerances are relative to the largest scaled rate on the mesh.
  double scale(const VecX& Y) const {
    double s = 1.0;
    for (Eigen::Index i = 0; i < Y.size(); i += 4)
      s = std::max(s, vector_field(p_, PhaseState(Y.segment<4>(i))).cwiseProduct(w_).lpNorm<Eigen::Infinity>());
    return s;
  }

  void residual(const VecX& Y, double T, VecX& F) const {
    const int N = int(tau_.size()) - 1;
    F.resize(unknowns());
    F[0] = Y[kQ1] - bc_.q1_0;
    F[1] = Y[kQ2] - bc_.q2_0;
    PhaseState fa = vector_field(p_, PhaseState(Y.segment<4>(0)));
    for (int i = 0; i < N; ++i) {
      const PhaseState ya = Y.segment<4>(4 * i), yb = Y.segment<4>(4 * i + 4);
      const PhaseState fb = vector_field(p_, yb);
      const double h = T * (tau_[i + 1] - tau_[i]);
      const PhaseState ym = 0.5 * (ya + yb) + h / 8 * (fa - fb);
      const PhaseState fm = vector_field(p_, ym);
      const PhaseState r = (yb - ya) / h - (fa + 4 * fm + fb) / 6;
      F.segment<4>(2 + 4 * i) = r.cwiseProduct(w_);
      fa = fb;
    }
    const int last = 4 * N;
    F[2 + 4 * N] = Y[last + kQ1] - bc_.q1_T;
    F[3 + 4 * N] = Y[last + kQ2] - bc_.q2_T;
  }

  /// Jacobian; if dFdT is non-null it receives the T-derivative column.
  void jacobian(const VecX& Y, double T, SpMat& Jm, VecX* dFdT) const {
    const int N = int(tau_.size()) - 1;
    std::vector<Triplet> trip;
    trip.reserve(32 * N + 8);
    trip.emplace_back(0, kQ1, 1.0);
    trip.emplace_back(1, kQ2, 1.0);
    if (dFdT) dFdT->setZero(unknowns());
    const Matrix4 I = Matrix4::Identity();
    PhaseState fa = vector_field(p_, PhaseState(Y.segment<4>(0)));
    Matrix4 Ja = state_jacobian(p_, PhaseState(Y.segment<4>(0)));
    for (int i = 0; i < N; ++i) {
      const PhaseState ya = Y.segment<4>(4 * i), yb = Y.segment<4>(4 * i + 4);
      const PhaseState fb = vector_field(p_, yb);
      const Matrix4 Jb = state_jacobian(p_, yb);
      const double dtau = tau_[i + 1] - tau_[i];
      const double h = T * dtau;
      const PhaseState ym = 0.5 * (ya + yb) + h / 8 * (fa - fb);
      const Matrix4 Jmid = state_jacobian(p_, ym);
      const Matrix4 Da = -I / h - (Ja + 4 * Jmid * (0.5 * I + h / 8 * Ja)) / 6;
      const Matrix4 Db = I / h - (Jb + 4 * Jmid * (0.5 * I - h / 8 * Jb)) / 6;
      const int r0 = 2 + 4 * i;
      for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) {
          if (Da(r, c) != 0) trip.emplace_back(r0 + r, 4 * i + c, w_[r] * Da(r, c));
          if (Db(r, c) != 0) trip.emplace_back(r0 + r, 4 * i + 4 + c, w_[r] * Db(r, c));
        }
      if (dFdT) {
        const PhaseState d = dtau * (-(yb - ya) / (h * h) - (4.0 / 6.0) * Jmid * (fa - fb) / 8);
        dFdT->segment<4>(r0) = d.cwiseProduct(w_);
      }
      fa = fb;
      Ja = Jb;
    }
    trip.emplace_back(2 + 4 * N, 4 * N + kQ1, 1.0);
    trip.emplace_back(3 + 4 * N, 4 * N + kQ2, 1.0);
    Jm.resize(unknowns(), unknowns());
    Jm.setFromTriplets(trip.begin(), trip.end());
  }

 private:
  const ModelParams& p_;
  const BoundaryConditions& bc_;
  const std::vector<double>& tau_;
  Vector4 w_;
};

struct NewtonResult {
  bool converged = false;
  int iterations = 0;
  double residual = 0;
};

// Damped Newton at fixed T on the square collocation system.
NewtonResult newton_fixed_T(const ModelParams& p, const BoundaryConditions& bc, TauMesh& m,
                            double T, const BvpOptions& o) {
  Collocation col(p, bc, m.tau);
  VecX Y = pack(m), F, Fn, dY;
  SpMat J;
  Eigen::SparseLU<SpMat, Eigen::COLAMDOrdering<int>> lu;
  bool analyzed = false;
  NewtonResult res;
  try {
    col.residual(Y, T, F);
  } catch (const DomainError&) {
    res.residual = std::numeric_limits<double>::infinity();
    return res;
  }
  for (int it = 0; it < o.max_newton; ++it) {
    res.iterations = it;
    res.residual = F.lpNorm<Eigen::Infinity>() / col.scale(Y);
    if (res.residual < o.newton_tol) {
      res.converged = true;
      break;
    }
    col.jacobian(Y, T, J, nullptr);
    if (!analyzed) {
      lu.analyzePattern(J);
      analyzed = true;
    }
    lu.factorize(J);
    if (lu.info() != Eigen::Success) break;
    dY = lu.solve(-F);
    if (!dY.allFinite()) break;

    const double f0 = F.squaredNorm();
    double lam = 1.0;
    bool accepted = false;
    while (lam > 1.0 / 4096) {
      const VecX Yn = Y + lam * dY;
      bool ok = admissible(Yn, o.q2_floor);
      if (ok) {
        // Collocation midpoints can reach q2 <= 0 even when every node is inside.
        try {
          col.residual(Yn, T, Fn);
        } catch (const DomainError&) {
          ok = false;
        }
      }
      if (ok) {
        if (Fn.allFinite() && Fn.squaredNorm() < (1 - 1e-4 * lam) * f0) {
          Y = Yn;
          F = Fn;
          accepted = true;
          break;
        }
      }
      lam *= 0.5;
    }
    if (!accepted) break;
  }
  res.residual = F.lpNorm<Eigen::Infinity>() / col.scale(Y);
  if (res.residual < o.newton_tol) res.converged = true;
  unpack(Y, m);
  return res;
}

std::vector<double> interval_defects(const ModelParams& p, const TauMesh& m, double T) {
  const Vector4 w = row_weights(p);
  IntegrateOptions io;
  io.rtol = 1e-12;
  io.atol = 1e-14;
  std::vector<double> d(m.intervals(), 0.0);
  for (int i = 0; i < m.intervals(); ++i) {
    const double h = T * (m.tau[i + 1] - m.tau[i]);
    PhaseState yb;
    try {
      yb = flow(p, m.y[i], h, io);
    } catch (const std::exception&) {
      d[i] = std::numeric_limits<double>::infinity();
      continue;
    }
    double worst = 0;
    for (int c = 0; c < 4; ++c) {
      const double diff = std::abs(yb[c] - m.y[i + 1][c]) * w[c];
      worst = std::max(worst, diff / (1.0 + std::abs(m.y[i + 1][c]) * w[c]));
    }
    d[i] = worst;
  }
  return d;
}

BvpSolution to_solution(const ModelParams& p, const TauMesh& m, double T) {
  BvpSolution s;
  s.T = T;
  s.mesh.reserve(m.tau.size());
  for (double t : m.tau) s.mesh.push_back(T * t);
  s.states = m.y;
  s.energy = energy(p, m.y.front());
  return s;
}

double bc_error(const BoundaryConditions& bc, const TauMesh& m) {
  return std::max({std::abs(m.y.front()[kQ1] - bc.q1_0), std::abs(m.y.front()[kQ2] - bc.q2_0),
                   std::abs(m.y.back()[kQ1] - bc.q1_T), std::abs(m.y.back()[kQ2] - bc.q2_T)});
}

// Splits intervals whose defect exceeds tol.
std::vector<double> refined_taus(const TauMesh& m, const std::vector<double>& d, double tol) {
  std::vector<double> out;
  out.push_back(m.tau.front());
  for (int i = 0; i < m.intervals(); ++i) {
    int pieces = 1;
    if (d[i] > tol) {
      const double ratio = std::isfinite(d[i]) ? d[i] / tol : 1e10;
      pieces = std::clamp(int(std::ceil(std::pow(ratio, 0.2) * 1.2)), 2, 8);
    }
    for (int k = 1; k <= pieces; ++k)
      out.push_back(m.tau[i] + (m.tau[i + 1] - m.tau[i]) * k / pieces);
  }
  return out;
}

BvpSolution solve_on_mesh(const ModelParams& p, const BoundaryConditions& bc, TauMesh m, double T,
                          const BvpOptions& o) {
  int total_iterations = 0;
  double tol = o.tol;
  for (int r = 0;; ++r) {
    const NewtonResult nr = newton_fixed_T(p, bc, m, T, o);
    total_iterations += nr.iterations;
    if (!nr.converged) {
      BvpSolution last = to_solution(p, m, T);
      last.newton_iterations = total_iterations;
      throw BvpConvergenceError("solve_bvp: Newton stagnated (scaled residual " +
                                    std::to_string(nr.residual) + ")",
                                std::move(last));
    }
    const auto d = interval_defects(p, m, T);
    const double dmax = *std::max_element(d.begin(), d.end());
    BvpSolution s = to_solution(p, m, T);
    const double ev = s.energy_variation(p);
    // A small defect can still leave E drifting where |grad E| is large; tighten until it is flat.
    if (dmax <= o.tol && ev > o.energy_tol) tol = std::min(tol, 0.1 * dmax);
    const bool done = dmax <= tol && ev <= o.energy_tol;
    if (done || r >= o.max_refinements || m.tau.size() >= o.max_nodes) {
      s.residual = dmax;
      s.bc_residual = bc_error(bc, m);
      s.newton_iterations = total_iterations;
      if (dmax > o.tol) {
        throw BvpConvergenceError("solve_bvp: mesh refinement did not reach the defect tolerance",
                                  std::move(s));
      }
      if (ev > o.energy_tol) {
        throw BvpConvergenceError("solve_bvp: energy not constant along the mesh (" + std::to_string(ev) + ")",
                                  std::move(s));
      }
      return s;
    }
    m = resample(p, m, T, refined_taus(m, d, tol));
  }
}

}  // namespace

void BoundaryConditions::validate() const {
  if (!(q2_0 > 0) || !(q2_T > 0)) throw DomainError("BoundaryConditions: q2 values must be positive");
  if (!std::isfinite(q1_0) || !std::isfinite(q1_T)) throw DomainError("BoundaryConditions: non-finite q1");
}

Trajectory BvpSolution::as_trajectory(const ModelParams& p) const {
  return make_trajectory(p, mesh, states);
}

double BvpSolution::energy_variation(const ModelParams& p) const {
  double worst = 0;
  const double scale = std::max(1.0, std::abs(energy));
  for (const auto& x : states) worst = std::max(worst, std::abs(mfgrom::energy(p, x) - energy) / scale);
  return worst;
}

const char* to_string(BranchStatus s) {
  switch (s) {
    case BranchStatus::ReachedEnd: return "reached-end";
    case BranchStatus::Terminated: return "terminated";
    case BranchStatus::MaxPoints: return "max-points";
  }
  return "?";
}

BvpSolution straight_line_guess(const ModelParams& p, const BoundaryConditions& bc, double T,
                                int nodes) {
  bc.validate();
  if (!(T > 0) || nodes < 2) throw DomainError("straight_line_guess: need T > 0 and >= 2 nodes");
  BvpSolution g;
  g.T = T;
  const double v1 = (bc.q1_T - bc.q1_0) / T, v2 = (bc.q2_T - bc.q2_0) / T;
  for (int i = 0; i < nodes; ++i) {
    const double s = double(i) / (nodes - 1);
    g.mesh.push_back(T * s);
    g.states.push_back(make_state(bc.q1_0 + s * (bc.q1_T - bc.q1_0), -p.mu * v1,
                                  bc.q2_0 + s * (bc.q2_T - bc.q2_0),
                                  -p.epsilon * p.epsilon * p.mu * v2));
  }
  g.mesh.back() = T;
  g.energy = energy(p, g.states.front());
  return g;
}

BvpSolution guess_from_trajectory(const Trajectory& traj, double T, int nodes) {
  if (traj.size() < 2 || nodes < 2) throw DomainError("guess_from_trajectory: trajectory too short");
  const double t0 = traj.times.front(), t1 = traj.times.back();
  BvpSolution g;
  g.T = T;
  std::size_t k = 0;
  for (int i = 0; i < nodes; ++i) {
    const double s = double(i) / (nodes - 1);
    const double t = t0 + s * (t1 - t0);
    while (k + 2 < traj.size() && traj.times[k + 1] < t) ++k;
    const double ta = traj.times[k], tb = traj.times[k + 1], h = tb - ta;
    const double u = std::clamp((t - ta) / h, 0.0, 1.0);
    const double u2 = u * u, u3 = u2 * u;
    g.mesh.push_back(T * s);
    g.states.push_back((2 * u3 - 3 * u2 + 1) * traj.states[k] + (u3 - 2 * u2 + u) * h * traj.rates[k] +
                       (-2 * u3 + 3 * u2) * traj.states[k + 1] + (u3 - u2) * h * traj.rates[k + 1]);
  }
  g.mesh.back() = T;
  return g;
}

BvpSolution solve_bvp(const ModelParams& p, const BoundaryConditions& bc, double T,
                      const BvpSolution& guess, const BvpOptions& opts) {
  bc.validate();
  if (!(T > 0)) throw DomainError("solve_bvp: T must be positive");
  if (guess.size() < 2) throw DomainError("solve_bvp: guess mesh needs at least two nodes");
  for (const auto& x : guess.states)
    if (!(x[kQ2] > 0)) throw DomainError("solve_bvp: guess has q2 <= 0 (infeasible guess)");
  return solve_on_mesh(p, bc, to_tau(guess), T, opts);
}

double collocation_defect(const ModelParams& p, const BvpSolution& sol) {
  const auto d = interval_defects(p, to_tau(sol), sol.T);
  return *std::max_element(d.begin(), d.end());
}

BvpSolution refine_uniformly(const ModelParams& p, const BoundaryConditions& bc,
                             const BvpSolution& sol, const BvpOptions& opts) {
  const TauMesh m = to_tau(sol);
  std::vector<double> taus;
  for (int i = 0; i < m.intervals(); ++i) {
    taus.push_back(m.tau[i]);
    taus.push_back(0.5 * (m.tau[i] + m.tau[i + 1]));
  }
  taus.push_back(1.0);
  TauMesh fine = resample(p, m, sol.T, taus);
  NewtonResult nr = newton_fixed_T(p, bc, fine, sol.T, opts);
  if (!nr.converged) throw BvpConvergenceError("refine_uniformly: Newton failed", to_solution(p, fine, sol.T));
  BvpSolution s = to_solution(p, fine, sol.T);
  s.residual = collocation_defect(p, s);
  s.bc_residual = bc_error(bc, fine);
  s.newton_iterations = nr.iterations;
  return s;
}

int rotation_count(const ModelParams& p, const Trajectory& traj, const Equilibrium&, double q1_window,
                   int* tangential) {
  int plain = 0, grazing = 0;
  for (const auto& e : find_section_crossings(p, traj, Section::p2_zero())) {
    if (std::abs(e.state[kQ1]) > q1_window) continue;
    (e.grazing ? grazing : plain) += 1;
  }
  // A tangency shows up as a close pair of crossings inside one step.
  const int touches = (grazing + 1) / 2;
  if (tangential) *tangential = touches;
  return plain + touches;
}

int rotation_count(const ModelParams& p, const BvpSolution& sol, const Equilibrium& eq,
                   double q1_window, int* tangential) {
  return rotation_count(p, sol.as_trajectory(p), eq, q1_window, tangential);
}

Phases phase_decomposition(const BvpSolution& sol, const Equilibrium&, double q1_window) {
  Phases ph;
  const std::size_t n = sol.size();
  auto inside = [&](std::size_t k) { return std::abs(sol.states[k][kQ1]) <= q1_window; };
  auto cross_time = [&](std::size_t a, std::size_t b) {
    const double fa = std::abs(sol.states[a][kQ1]) - q1_window;
    const double fb = std::abs(sol.states[b][kQ1]) - q1_window;
    if (fa == fb) return sol.mesh[b];
    const double s = fa / (fa - fb);
    return sol.mesh[a] + s * (sol.mesh[b] - sol.mesh[a]);
  };
  std::size_t first = n, last = n;
  for (std::size_t k = 0; k < n; ++k)
    if (inside(k)) {
      if (first == n) first = k;
      last = k;
    }
  if (first == n) return ph;
  const double t_in = first == 0 ? sol.mesh.front() : cross_time(first - 1, first);
  const double t_out = last + 1 == n ? sol.mesh.back() : cross_time(last, last + 1);
  ph.t_a = t_in - sol.mesh.front();
  ph.t_d = sol.mesh.back() - t_out;
  ph.tau_erg = sol.T - ph.t_a - ph.t_d;
  ph.defined = true;
  return ph;
}

namespace {

struct ArcState {
  TauMesh m;
  double T;
};

// Weighted inner-product scale so p2 enters in velocity units and T counts
// like one mesh node.
VecX arc_weights(const ModelParams& p, int nodes) {
  const Vector4 w = row_weights(p);
  VecX W(4 * nodes + 1);
  for (int i = 0; i < nodes; ++i) W.segment<4>(4 * i) = w / std::sqrt(double(nodes));
  W[4 * nodes] = 1.0;
  return W;
}

// One pseudo-arclength corrector from predictor (Yp, Tp) along tangent t.
bool arclength_correct(const ModelParams& p, const BoundaryConditions& bc, const std::vector<double>& tau,
                       VecX& Y, double& T, const VecX& Yp, double Tp, const VecX& tan, const VecX& W,
                       const BvpOptions& o) {
  Collocation col(p, bc, tau);
  const int n = col.unknowns();
  VecX F, Fn, dFdT, rhs(n + 1), dz;
  SpMat J;
  Eigen::SparseLU<SpMat, Eigen::COLAMDOrdering<int>> lu;
  auto arc_res = [&](const VecX& Yc, double Tc) {
    double s = 0;
    for (int i = 0; i < n; ++i) s += W[i] * W[i] * tan[i] * (Yc[i] - Yp[i]);
    s += W[n] * W[n] * tan[n] * (Tc - Tp);
    return s;
  };
  Y = Yp;
  T = Tp;
  col.residual(Y, T, F);
  for (int it = 0; it < o.max_newton; ++it) {
    const double g = arc_res(Y, T);
    if (F.lpNorm<Eigen::Infinity>() < o.newton_tol * col.scale(Y) && std::abs(g) < 1e-10) return true;
    col.jacobian(Y, T, J, &dFdT);
    std::vector<Triplet> trip;
    trip.reserve(J.nonZeros() + 2 * n + 2);
    for (int k = 0; k < J.outerSize(); ++k)
      for (SpMat::InnerIterator itj(J, k); itj; ++itj) trip.emplace_back(itj.row(), itj.col(), itj.value());
    for (int i = 0; i < n; ++i) {
      if (dFdT[i] != 0) trip.emplace_back(i, n, dFdT[i]);
      trip.emplace_back(n, i, W[i] * W[i] * tan[i]);
    }
    trip.emplace_back(n, n, W[n] * W[n] * tan[n]);
    SpMat A(n + 1, n + 1);
    A.setFromTriplets(trip.begin(), trip.end());
    lu.compute(A);
    if (lu.info() != Eigen::Success) return false;
    rhs.head(n) = -F;
    rhs[n] = -g;
    dz = lu.solve(rhs);
    if (!dz.allFinite()) return false;
    const double f0 = F.squaredNorm() + g * g;
    double lam = 1.0;
    bool ok = false;
    while (lam > 1.0 / 1024) {
      const VecX Yn = Y + lam * dz.head(n);
      const double Tn = T + lam * dz[n];
      if (Tn > 0 && admissible(Yn, o.q2_floor)) {
        col.residual(Yn, Tn, Fn);
        const double gn = arc_res(Yn, Tn);
        if (Fn.allFinite() && Fn.squaredNorm() + gn * gn < (1 - 1e-4 * lam) * f0) {
          Y = Yn;
          T = Tn;
          F = Fn;
          ok = true;
          break;
        }
      }
      lam *= 0.5;
    }
    if (!ok) return false;
  }
  return F.lpNorm<Eigen::Infinity>() < o.newton_tol * col.scale(Y);
}

}  // namespace

Branch continue_branch(const ModelParams& p, const BoundaryConditions& bc, const Equilibrium& eq,
                       const BvpSolution& seed, const ContinuationOptions& opts, const std::string& label) {
  Branch br;
  br.label = label;
  auto record = [&](BvpSolution s, bool arc) {
    s.rotations = rotation_count(p, s, eq, opts.q1_window);
    s.phases = phase_decomposition(s, eq, opts.q1_window);
    br.points.push_back({s.T, s.energy, s.rotations, arc});
    br.solutions.push_back(std::move(s));
  };
  record(seed, false);

  const double dir = opts.T_end >= seed.T ? 1.0 : -1.0;
  double dT = dir * opts.dT0;
  bool use_arc = false;

  while (!use_arc) {
    const BvpSolution& cur = br.solutions.back();
    if (dir * (opts.T_end - cur.T) <= 1e-12) {
      br.status = BranchStatus::ReachedEnd;
      break;
    }
    if (int(br.points.size()) >= opts.max_points) {
      br.status = BranchStatus::MaxPoints;
      break;
    }
    double Tn = cur.T + dT;
    if (dir * (Tn - opts.T_end) > 0) Tn = opts.T_end;

    // Secant predictor on the current mesh when the previous point shares it.
    BvpSolution guess = cur;
    if (br.solutions.size() >= 2) {
      const BvpSolution& prev = br.solutions[br.solutions.size() - 2];
      if (prev.size() == cur.size() && std::abs(cur.T - prev.T) > 0) {
        const double s = (Tn - cur.T) / (cur.T - prev.T);
        for (std::size_t i = 0; i < cur.size(); ++i) guess.states[i] = cur.states[i] + s * (cur.states[i] - prev.states[i]);
      }
    }
    try {
      BvpSolution s = solve_bvp(p, bc, Tn, guess, opts.bvp);
      record(std::move(s), false);
      dT = dir * std::min(std::abs(dT) * 1.5, opts.dT_max);
    } catch (const std::exception&) {
      if (guess.states.data() != cur.states.data()) {
        // Retry with the plain previous solution before shrinking the step.
        try {
          BvpSolution s = solve_bvp(p, bc, Tn, cur, opts.bvp);
          record(std::move(s), false);
          continue;
        } catch (const std::exception&) {
        }
      }
      dT *= 0.5;
      if (std::abs(dT) < opts.dT_min) {
        if (opts.arclength_fallback && br.solutions.size() >= 2) {
          use_arc = true;
        } else {
          br.status = BranchStatus::Terminated;
          br.note = "natural continuation step underflow";
          break;
        }
      }
    }
  }

  if (use_arc) {
    // Pseudo-arclength on the mesh of the last solution.
    const BvpSolution& last = br.solutions.back();
    const TauMesh m = to_tau(last);
    const TauMesh mprev = resample(p, to_tau(br.solutions[br.solutions.size() - 2]),
                                   br.solutions[br.solutions.size() - 2].T, m.tau);
    const int nodes = int(m.tau.size());
    const int n = 4 * nodes;
    const VecX W = arc_weights(p, nodes);
    VecX z1(n + 1), z0(n + 1);
    z1.head(n) = pack(m);
    z1[n] = last.T;
    z0.head(n) = pack(mprev);
    z0[n] = br.solutions[br.solutions.size() - 2].T;
    auto wnorm = [&](const VecX& v) { return v.cwiseProduct(W).norm(); };
    VecX tan = z1 - z0;
    double ds = wnorm(tan);
    tan /= ds;
    const double ds_min = 1e-3 * ds;
    br.status = BranchStatus::Terminated;
    br.note = "arclength step underflow";
    while (int(br.points.size()) < opts.max_points) {
      const VecX zp = z1 + ds * tan;
      VecX Y;
      double T;
      const bool ok = arclength_correct(p, bc, m.tau, Y, T, zp.head(n), zp[n], tan, W, opts.bvp);
      if (!ok) {
        ds *= 0.5;
        if (ds < ds_min) break;
        continue;
      }
      TauMesh mc = m;
      unpack(Y, mc);
      BvpSolution s = to_solution(p, mc, T);
      const auto d = interval_defects(p, mc, T);
      s.residual = *std::max_element(d.begin(), d.end());
      s.bc_residual = bc_error(bc, mc);
      VecX z2(n + 1);
      z2.head(n) = Y;
      z2[n] = T;
      VecX sec = z2 - z1;
      const double len = wnorm(sec);
      if (len > 0) tan = sec / len;
      z1 = z2;
      record(std::move(s), true);
      ds *= 1.3;
      if (dir * (T - opts.T_end) >= 0) {
        br.status = BranchStatus::ReachedEnd;
        br.note.clear();
        break;
      }
      if (T < 1e-3) {
        br.note = "horizon collapsed to zero";
        break;
      }
    }
    if (int(br.points.size()) >= opts.max_points) br.status = BranchStatus::MaxPoints;
  }

  int topo = br.points.front().rotations;
  for (const auto& pt : br.points)
    if (pt.rotations != topo) topo = -1;
  br.topology = topo;
  return br;
}

std::optional<BvpSolution> tube_seed_guess(const ModelParams& p, const Equilibrium& eq,
                                           const BoundaryConditions& bc, double E, int half_periods,
                                           int nodes) {
  PeriodicOrbit po;
  try {
    po = orbit_at_energy(p, eq, E);
  } catch (const std::exception&) {
    return std::nullopt;
  }
  TubeOptions to;
  to.n_strands = 64;
  to.t_int = 400;
  to.q1_stop = std::abs(bc.q1_0);
  const TubeManifold st = tube(p, po, TubeBranch::Stable, bc.q1_0 < 0 ? -1 : 1, to);
  const TubeStrand* best = nullptr;
  for (const auto& s : st.strands) {
    if (!s.reached_stop) continue;
    if (!best || std::abs(s.stop_state[kQ2] - bc.q2_0) < std::abs(best->stop_state[kQ2] - bc.q2_0)) best = &s;
  }
  if (!best) return std::nullopt;

  Trajectory all = best->traj;  // times in [-t_s, 0]
  const double shift = -all.times.front();
  for (auto& t : all.times) t += shift;

  IntegrateOptions io{1e-11, 1e-13};
  try {
    // Orbit phase: continue from the end of the stable strand.
    const double t_orb = 0.5 * po.period * half_periods;
    if (t_orb > 0) {
      Trajectory mid = integrate(p, all.states.back(), 0.0, t_orb, io);
      const double t0 = all.times.back();
      for (std::size_t k = 1; k < mid.size(); ++k) {
        all.times.push_back(t0 + mid.times[k]);
        all.states.push_back(mid.states[k]);
        all.rates.push_back(mid.rates[k]);
      }
    }
    // Unstable strand from the matching orbit phase.
    const double tau_u = std::fmod(best->tau + 0.5 * po.period * half_periods, po.period);
    auto [xu, phi] = flow_with_stm(p, po.seed, tau_u, io);
    Vector4 v = phi * po.unstable_dir;
    v.normalize();
    const int side = bc.q1_T > 0 ? 1 : -1;
    const PhaseState start = xu + side * 1e-5 * po.q2_amplitude() * v;
    const double stop = std::abs(bc.q1_T);
    Trajectory out = integrate_until(p, start, 400,
                                     [&](double, const PhaseState& x) { return std::abs(x[kQ1]) >= stop; }, io);
    const auto hit = find_section_crossings(p, out, Section::q1_at(side * stop));
    if (hit.empty()) return std::nullopt;
    const double t0 = all.times.back();
    for (std::size_t k = 1; k < out.size() && out.times[k] < hit.front().time; ++k) {
      all.times.push_back(t0 + out.times[k]);
      all.states.push_back(out.states[k]);
      all.rates.push_back(out.rates[k]);
    }
    all.times.push_back(t0 + hit.front().time);
    all.states.push_back(hit.front().state);
    all.rates.push_back(vector_field(p, hit.front().state));
  } catch (const std::exception&) {
    return std::nullopt;
  }
  // Drop duplicate times introduced at the joins.
  Trajectory clean;
  for (std::size_t k = 0; k < all.size(); ++k) {
    if (!clean.empty() && all.times[k] <= clean.times.back()) continue;
    clean.times.push_back(all.times[k]);
    clean.states.push_back(all.states[k]);
    clean.rates.push_back(all.rates[k]);
  }
  BvpSolution g = guess_from_trajectory(clean, clean.times.back(), nodes);
  g.energy = energy(p, g.states.front());
  return g;
}

std::vector<DiagramRow> Diagram::solutions_at(double T) const {
  std::vector<DiagramRow> out;
  for (const auto& b : branches) {
    for (std::size_t k = 0; k + 1 < b.points.size(); ++k) {
      const auto &a = b.points[k], &c = b.points[k + 1];
      const double lo = std::min(a.T, c.T), hi = std::max(a.T, c.T);
      if (T < lo || T > hi) continue;
      const double s = hi > lo ? (T - a.T) / (c.T - a.T) : 0.0;
      out.push_back({b.label, T, a.E + s * (c.E - a.E), s < 0.5 ? a.rotations : c.rotations});
    }
    if (b.points.size() == 1 && std::abs(b.points[0].T - T) < 1e-12)
      out.push_back({b.label, T, b.points[0].E, b.points[0].rotations});
  }
  return out;
}

Diagram bifurcation_diagram(const ModelParams& p, const BoundaryConditions& bc, const Equilibrium& eq,
                            const std::vector<BranchSpec>& specs, int workers) {
  Diagram dg;
  dg.branches.resize(specs.size());
  const int w = std::max(1, workers);
  std::size_t next = 0;
  while (next < specs.size()) {
    std::vector<std::future<Branch>> batch;
    const std::size_t begin = next;
    for (; next < specs.size() && int(batch.size()) < w; ++next) {
      const BranchSpec& s = specs[next];
      batch.push_back(std::async(w > 1 ? std::launch::async : std::launch::deferred,
                                 [&p, &bc, &eq, &s] { return continue_branch(p, bc, eq, s.seed, s.options, s.label); }));
    }
    for (std::size_t i = 0; i < batch.size(); ++i) dg.branches[begin + i] = batch[i].get();
  }
  for (const auto& b : dg.branches)
    for (const auto& pt : b.points) dg.rows.push_back({b.label, pt.T, pt.E, pt.rotations});
  std::stable_sort(dg.rows.begin(), dg.rows.end(), [](const DiagramRow& a, const DiagramRow& b) {
    return a.branch != b.branch ? a.branch < b.branch : a.T < b.T;
  });
  return dg;
}

}  // namespace mfgrom
