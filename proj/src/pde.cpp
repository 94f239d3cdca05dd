#include "mfgrom/pde.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <string>

namespace mfgrom {

namespace {

// Tridiagonal matrix plus one extra entry in each boundary row, left by the
// one-sided second differences: c0 at (0, 2) and cN at (N, N-2).
struct BoundaryBanded {
  Row sub, diag, sup;
  double c0 = 0, cN = 0;

  explicit BoundaryBanded(int n) : sub(Row::Zero(n)), diag(Row::Zero(n)), sup(Row::Zero(n)) {}
};

Row solve_banded(BoundaryBanded A, Row rhs) {
  const int n = int(A.diag.size());
  // Fold the corner entries into the tridiagonal band using rows 1 and N-1.
  if (A.c0 != 0) {
    if (A.sup[1] == 0) throw ConvergenceError("tridiagonal solve: zero pivot in boundary elimination");
    const double r = A.c0 / A.sup[1];
    A.diag[0] -= r * A.sub[1];
    A.sup[0] -= r * A.diag[1];
    rhs[0] -= r * rhs[1];
  }
  if (A.cN != 0) {
    if (A.sub[n - 2] == 0) throw ConvergenceError("tridiagonal solve: zero pivot in boundary elimination");
    const double r = A.cN / A.sub[n - 2];
    A.diag[n - 1] -= r * A.sup[n - 2];
    A.sub[n - 1] -= r * A.diag[n - 2];
    rhs[n - 1] -= r * rhs[n - 2];
  }
  // Thomas sweep; sub[i] couples row i to column i-1.
  for (int i = 1; i < n; ++i) {
    if (A.diag[i - 1] == 0) throw ConvergenceError("tridiagonal solve: zero pivot");
    const double w = A.sub[i] / A.diag[i - 1];
    A.diag[i] -= w * A.sup[i - 1];
    rhs[i] -= w * rhs[i - 1];
  }
  if (A.diag[n - 1] == 0) throw ConvergenceError("tridiagonal solve: zero pivot");
  Row x(n);
  x[n - 1] = rhs[n - 1] / A.diag[n - 1];
  for (int i = n - 2; i >= 0; --i) x[i] = (rhs[i] - A.sup[i] * x[i + 1]) / A.diag[i];
  return x;
}

// First and second differences: central inside, one-sided at the two ends.
void differences(const Row& Z, double dx, Row& D, Row& Lap) {
  const int n = int(Z.size());
  D.resize(n);
  Lap.resize(n);
  for (int i = 1; i + 1 < n; ++i) {
    D[i] = (Z[i + 1] - Z[i - 1]) / (2 * dx);
    Lap[i] = (Z[i + 1] - 2 * Z[i] + Z[i - 1]) / (dx * dx);
  }
  D[0] = (Z[1] - Z[0]) / dx;
  Lap[0] = (Z[2] - 2 * Z[1] + Z[0]) / (dx * dx);
  D[n - 1] = (Z[n - 1] - Z[n - 2]) / dx;
  Lap[n - 1] = (Z[n - 1] - 2 * Z[n - 2] + Z[n - 3]) / (dx * dx);
}

double trapezoid(const Row& y, double dx) {
  return dx * (y.sum() - 0.5 * (y[0] + y[y.size() - 1]));
}

// HJB residual F1 at every node given U^{n+1} and M^{n+1}.
Row hjb_residual(const Row& U, const Row& U_next, const Row& M_next, const Grid& g,
                 const ModelParams& p, Row& D, Row& Lap) {
  const double dt = g.dt(), s2 = p.sigma * p.sigma;
  differences(U, g.dx(), D, Lap);
  Row F(U.size());
  for (Eigen::Index i = 0; i < U.size(); ++i) {
    const CostTerms c = cost_terms(p, g.x(int(i)), M_next[i]);
    F[i] = (U[i] - U_next[i]) / dt - 0.5 * s2 * Lap[i] + D[i] * D[i] / (2 * p.mu) + c.f + c.u0;
  }
  return F;
}

BoundaryBanded hjb_jacobian(const Row& D, const Grid& g, const ModelParams& p) {
  const int n = int(D.size());
  const double dt = g.dt(), dx = g.dx(), s2 = p.sigma * p.sigma, mu = p.mu;
  const double lap = s2 / (2 * dx * dx);
  BoundaryBanded J(n);
  for (int i = 1; i + 1 < n; ++i) {
    J.diag[i] = 1 / dt + 2 * lap;
    J.sub[i] = -lap - D[i] / (2 * mu * dx);
    J.sup[i] = -lap + D[i] / (2 * mu * dx);
  }
  J.diag[0] = 1 / dt - lap - D[0] / (mu * dx);
  J.sup[0] = 2 * lap + D[0] / (mu * dx);
  J.c0 = -lap;
  J.diag[n - 1] = 1 / dt - lap + D[n - 1] / (mu * dx);
  J.sub[n - 1] = 2 * lap - D[n - 1] / (mu * dx);
  J.cN = -lap;
  return J;
}

BoundaryBanded fp_matrix(const Row& U, const Grid& g, const ModelParams& p) {
  const int n = int(U.size());
  const double dt = g.dt(), dx = g.dx(), s2 = p.sigma * p.sigma, mu = p.mu;
  const double lap = s2 / (2 * dx * dx);
  Row D, Lap;
  differences(U, dx, D, Lap);
  BoundaryBanded A(n);
  for (int i = 1; i + 1 < n; ++i) {
    A.diag[i] = 1 / dt + 2 * lap - Lap[i] / mu;
    A.sub[i] = -lap + D[i] / (2 * mu * dx);
    A.sup[i] = -lap - D[i] / (2 * mu * dx);
  }
  A.diag[0] = 1 / dt - lap + D[0] / (mu * dx) - Lap[0] / mu;
  A.sup[0] = 2 * lap - D[0] / (mu * dx);
  A.c0 = -lap;
  A.diag[n - 1] = 1 / dt - lap - D[n - 1] / (mu * dx) - Lap[n - 1] / mu;
  A.sub[n - 1] = 2 * lap + D[n - 1] / (mu * dx);
  A.cN = -lap;
  return A;
}

Row banded_times(const BoundaryBanded& A, const Row& x) {
  const int n = int(x.size());
  Row y(n);
  for (int i = 0; i < n; ++i) {
    y[i] = A.diag[i] * x[i];
    if (i > 0) y[i] += A.sub[i] * x[i - 1];
    if (i + 1 < n) y[i] += A.sup[i] * x[i + 1];
  }
  y[0] += A.c0 * x[2];
  y[n - 1] += A.cN * x[n - 3];
  return y;
}

double safe_exp(double a) { return std::exp(std::min(a, 700.0)); }

}  // namespace

void Grid::validate() const {
  if (!(L > 0) || !(T > 0)) throw DomainError("Grid: L and T must be positive");
  if (Nx < 4 || Nt < 1) throw DomainError("Grid: need Nx >= 4 and Nt >= 1");
}

void PdeConfig::validate() const {
  if (!(eps_p > 0)) throw DomainError("PdeConfig: eps_p must be positive");
  if (!(delta >= 0 && delta < 1)) throw DomainError("PdeConfig: delta must lie in [0, 1)");
  if (!(tol > 0) || k_max < 1) throw DomainError("PdeConfig: tol > 0 and k_max >= 1 required");
  if (!(newton_tol > 0) || newton_max < 1) throw DomainError("PdeConfig: bad Newton settings");
}

std::vector<double> PdeFields::mass(const Grid& g) const {
  std::vector<double> out(M.rows());
  for (Eigen::Index n = 0; n < M.rows(); ++n) out[n] = trapezoid(M.row(n).transpose(), g.dx());
  return out;
}

Row gaussian_density(double X, double Sigma, const Grid& g) {
  g.validate();
  if (!(Sigma > 0)) throw DomainError("gaussian_density: Sigma must be positive");
  Row m(g.Nx + 1);
  const double norm = 1.0 / (std::sqrt(2 * std::numbers::pi) * Sigma);
  for (int i = 0; i <= g.Nx; ++i) {
    const double z = (g.x(i) - X) / Sigma;
    m[i] = norm * std::exp(-0.5 * z * z);
  }
  if (trapezoid(m, g.dx()) < 0.999)
    throw DomainError("gaussian_density: less than 0.999 of the mass lies on the grid");
  return m;
}

CostTerms cost_terms(const ModelParams& p, double x, double m) {
  CostTerms c;
  c.clamped = m < 0;
  const double mm = std::max(m, 0.0);
  c.f = p.g * std::pow(mm, p.alpha);
  const double x2 = x * x;
  c.u0 = -p.h * x2 / 2 - x2 * x2 / 4;
  return c;
}

Row hjb_backward_step(const Row& U_next, const Row& M_next, const Grid& g, const ModelParams& p,
                      double newton_tol, int max_iter) {
  Row U = U_next, D, Lap;
  // The residual carries U/dt and x^4 sized terms; measure it relative to them.
  double scale = 1.0;
  for (int i = 0; i <= g.Nx; ++i) {
    const CostTerms c = cost_terms(p, g.x(i), M_next[i]);
    scale = std::max({scale, std::abs(U_next[i]) / g.dt(), std::abs(c.f + c.u0)});
  }
  std::string history;
  char buf[32];
  for (int it = 0; it <= max_iter; ++it) {
    const Row F = hjb_residual(U, U_next, M_next, g, p, D, Lap);
    const double r = F.lpNorm<Eigen::Infinity>();
    if (!std::isfinite(r)) break;
    if (r < newton_tol * scale) return U;
    std::snprintf(buf, sizeof buf, "%.3e", r);
    history += (history.empty() ? "" : ", ") + std::string(buf);
    if (it == max_iter) break;
    const Row step = solve_banded(hjb_jacobian(D, g, p), -F);
    // Backtrack on the residual norm; the full step is taken when it helps.
    Row D2, Lap2;
    double lam = 1.0;
    for (; lam > 1.0 / 1024; lam *= 0.5) {
      const Row Fn = hjb_residual(U + lam * step, U_next, M_next, g, p, D2, Lap2);
      if (Fn.allFinite() && Fn.norm() < (1 - 1e-4 * lam) * F.norm()) break;
    }
    U += lam * step;
  }
  throw ConvergenceError("hjb_backward_step: Newton did not converge; residuals [" + history + "]");
}

Row fp_forward_step(const Row& M, const Row& U, const Grid& g, const ModelParams& p) {
  return solve_banded(fp_matrix(U, g, p), M / g.dt());
}

PdeResult picard_solve(const ModelParams& p, const Row& m_ic, const Row& m_fc, const Grid& g,
                       const PdeConfig& cfg, const Table* warm_M) {
  p.validate();
  g.validate();
  cfg.validate();
  const int nx = g.Nx + 1, nt = g.Nt + 1;
  if (m_ic.size() != nx || m_fc.size() != nx) throw DomainError("picard_solve: density rows do not match the grid");

  Table Mt(nt, nx), Ut = Table::Zero(nt, nx);
  if (warm_M) {
    if (warm_M->rows() != nt || warm_M->cols() != nx) throw DomainError("picard_solve: warm start has the wrong shape");
    Mt = *warm_M;
  } else {
    for (int n = 0; n < nt; ++n) {
      const double s = double(n) / g.Nt;
      Mt.row(n) = ((1 - s) * m_ic + s * m_fc).transpose();
    }
  }

  PdeResult res;
  Table U(nt, nx), M(nt, nx);
  for (int k = 0; k < cfg.k_max; ++k) {
    U.row(g.Nt) = ((Mt.row(g.Nt).transpose() - m_fc) / cfg.eps_p).transpose();
    try {
      for (int n = g.Nt - 1; n >= 0; --n)
        U.row(n) = hjb_backward_step(U.row(n + 1).transpose(), Mt.row(n + 1).transpose(), g, p,
                                     cfg.newton_tol, cfg.newton_max)
                       .transpose();
      M.row(0) = m_ic.transpose();
      for (int n = 0; n < g.Nt; ++n)
        M.row(n + 1) = fp_forward_step(M.row(n).transpose(), U.row(n).transpose(), g, p).transpose();
    } catch (const ConvergenceError& e) {
      res.failure = "iteration " + std::to_string(k + 1) + ": " + e.what();
      break;
    }

    const double eu = (1 - cfg.delta) * (U - Ut).lpNorm<Eigen::Infinity>();
    const double em = (1 - cfg.delta) * (M - Mt).lpNorm<Eigen::Infinity>();
    Ut = cfg.delta * Ut + (1 - cfg.delta) * U;
    Mt = cfg.delta * Mt + (1 - cfg.delta) * M;
    res.log.entries.push_back({k + 1, eu, em});
    if (!std::isfinite(eu) || !std::isfinite(em)) break;
    if (eu < cfg.tol && em < cfg.tol) {
      res.log.converged = true;
      break;
    }
  }

  res.fields.M = std::move(Mt);
  res.fields.U = std::move(Ut);
  res.final_density_error = (res.fields.M.row(g.Nt).transpose() - m_fc).lpNorm<Eigen::Infinity>();
  const auto mass = res.fields.mass(g);
  for (double m : mass) res.mass_drift = std::max(res.mass_drift, std::abs(m - mass.front()) / mass.front());
  res.min_density = res.fields.M.minCoeff();
  res.negative_density_flag = res.min_density < -1e-10;
  return res;
}

Table warm_start_density(const ModelParams& p, const BvpSolution& sol, const Grid& g) {
  if (sol.size() < 2) throw DomainError("warm_start_density: empty BVP solution");
  Table M(g.Nt + 1, g.Nx + 1);
  std::size_t k = 0;
  for (int n = 0; n <= g.Nt; ++n) {
    const double t = sol.T * n / g.Nt;
    while (k + 2 < sol.size() && sol.mesh[k + 1] < t) ++k;
    const double s = std::clamp((t - sol.mesh[k]) / (sol.mesh[k + 1] - sol.mesh[k]), 0.0, 1.0);
    const PhaseState x = (1 - s) * sol.states[k] + s * sol.states[k + 1];
    M.row(n) = gaussian_density(x[kQ1], p.epsilon * x[kQ2], g).transpose();
  }
  return M;
}

DiscreteResiduals discrete_residuals(const ModelParams& p, const PdeFields& f, const Grid& g,
                                     const Row& m_fc, double eps_p) {
  DiscreteResiduals r;
  Row D, Lap;
  const Row u_final = (f.M.row(g.Nt).transpose() - m_fc) / eps_p;
  r.hjb = (f.U.row(g.Nt).transpose() - u_final).lpNorm<Eigen::Infinity>();
  for (int n = 0; n < g.Nt; ++n) {
    const Row F = hjb_residual(f.U.row(n).transpose(), f.U.row(n + 1).transpose(),
                               f.M.row(n + 1).transpose(), g, p, D, Lap);
    const BoundaryBanded J = hjb_jacobian(D, g, p);
    r.hjb = std::max(r.hjb, F.cwiseQuotient(J.diag).lpNorm<Eigen::Infinity>());
    const BoundaryBanded A = fp_matrix(f.U.row(n).transpose(), g, p);
    const Row R = banded_times(A, f.M.row(n + 1).transpose()) - f.M.row(n).transpose() / g.dt();
    r.fp = std::max(r.fp, R.cwiseQuotient(A.diag).lpNorm<Eigen::Infinity>());
  }
  return r;
}

MomentSeries extract_moments(const PdeFields& f, const Grid& g, const ModelParams& p) {
  MomentSeries out;
  const int nx = g.Nx + 1;
  const double dx = g.dx(), kappa = p.mu * p.sigma * p.sigma;
  Row x(nx);
  for (int i = 0; i < nx; ++i) x[i] = g.x(i);

  for (Eigen::Index n = 0; n < f.M.rows(); ++n) {
    const Row m = f.M.row(n).transpose().cwiseMax(0.0);
    const Row u = f.U.row(n).transpose();
    const double X = trapezoid(x.cwiseProduct(m), dx);
    const double var = trapezoid(x.cwiseProduct(x).cwiseProduct(m), dx) - X * X;
    if (!(var > 0)) throw DomainError("extract_moments: degenerate density (variance <= 0)");

    // Phi_i * Gamma_j = m_j * Phi_i / Phi_j = m_j * exp((u_j - u_i) / kappa),
    // which keeps the Cole-Hopf pair finite where u is large.
    auto gamma_at = [&](int i, int j) {
      return m[j] == 0 ? 0.0 : m[j] * safe_exp((u[j] - u[i]) / kappa);
    };
    Row dgamma(nx), dxgamma(nx);
    for (int i = 0; i < nx; ++i) {
      int a = i - 1, b = i + 1;
      double h = 2 * dx;
      if (i == 0) { a = 0; h = dx; }
      if (i == nx - 1) { b = nx - 1; h = dx; }
      dgamma[i] = (gamma_at(i, b) - gamma_at(i, a)) / h;
      dxgamma[i] = (x[b] * gamma_at(i, b) - x[a] * gamma_at(i, a)) / h;
    }
    const double P = -kappa * trapezoid(dgamma, dx);
    const double Lambda = -kappa * trapezoid(x.cwiseProduct(dgamma) + dxgamma, dx) - 2 * X * P;

    LagrangianState l;
    l.X = X;
    l.S = std::sqrt(var) / p.epsilon;
    l.P = P;
    l.Lambda = Lambda;
    out.t.push_back(g.t(int(n)));
    out.lagrangian.push_back(l);
    out.phase.push_back(lagrangian_to_phase(l));
  }
  return out;
}

int count_p2_crossings(const std::vector<PhaseState>& x, double q1_window) {
  int n = 0;
  std::size_t last = x.size();
  for (std::size_t k = 0; k < x.size(); ++k) {
    if (x[k][kP2] == 0) continue;
    if (last < x.size() && (x[last][kP2] > 0) != (x[k][kP2] > 0)) {
      const double s = x[last][kP2] / (x[last][kP2] - x[k][kP2]);
      const double q1 = x[last][kQ1] + s * (x[k][kQ1] - x[last][kQ1]);
      if (std::abs(q1) <= q1_window) ++n;
    }
    last = k;
  }
  return n;
}

TopologyReport compare_topology(const ModelParams& p, const MomentSeries& pde, const BvpSolution& bvp,
                                const Equilibrium& eq, double q1_window) {
  TopologyReport r;
  r.n_pde = count_p2_crossings(pde.phase, q1_window);
  r.n_bvp = rotation_count(p, bvp, eq, q1_window);
  r.match = r.n_pde == r.n_bvp;
  std::size_t k = 0;
  for (std::size_t j = 0; j < pde.t.size() && bvp.size() >= 2; ++j) {
    const double t = pde.t[j];
    if (t > bvp.T + 1e-12) break;
    while (k + 2 < bvp.size() && bvp.mesh[k + 1] < t) ++k;
    const double s = std::clamp((t - bvp.mesh[k]) / (bvp.mesh[k + 1] - bvp.mesh[k]), 0.0, 1.0);
    const PhaseState xb = (1 - s) * bvp.states[k] + s * bvp.states[k + 1];
    r.max_q_deviation = std::max(r.max_q_deviation,
                                 std::hypot(pde.phase[j][kQ1] - xb[kQ1], pde.phase[j][kQ2] - xb[kQ2]));
  }
  return r;
}

}  // namespace mfgrom
