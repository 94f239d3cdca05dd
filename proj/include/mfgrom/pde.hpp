#pragma once

#include <Eigen/Core>

#include <string>
#include <vector>

#include "mfgrom/bvp.hpp"
#include "mfgrom/model.hpp"

namespace mfgrom {

/// Uniform space-time grid on [-L/2, L/2] x [0, T].
struct Grid {
  double L = 40;
  int Nx = 500;
  int Nt = 500;
  double T = 9.5;

  double dx() const { return L / Nx; }
  double dt() const { return T / Nt; }
  double x(int i) const { return -0.5 * L + i * dx(); }
  double t(int n) const { return n * dt(); }
  void validate() const;

  static Grid appendix() { return {}; }
};

struct PdeConfig {
  double eps_p = 0.01;  ///< final-condition penalty weight
  double delta = 0.5;   ///< Picard damping
  int k_max = 1000;
  double tol = 1e-6;
  double newton_tol = 1e-12;  ///< max |F1| relative to the largest term, per HJB step
  int newton_max = 50;

  void validate() const;
  static PdeConfig appendix() { return {}; }
};

using Row = Eigen::VectorXd;
using Table = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Density and value tables, one row per time node.
struct PdeFields {
  Table M;
  Table U;

  /// Trapezoid mass per time row.
  std::vector<double> mass(const Grid& g) const;
};

struct ConvergenceEntry {
  int k = 0;
  double err_u = 0;
  double err_m = 0;
};

struct ConvergenceLog {
  std::vector<ConvergenceEntry> entries;
  bool converged = false;

  int iterations() const { return int(entries.size()); }
};

struct PdeResult {
  PdeFields fields;
  ConvergenceLog log;
  double final_density_error = 0;  ///< max_i |M^Nt_i - m_FC(x_i)|
  double mass_drift = 0;           ///< max_n |mass_n - mass_0| / mass_0
  double min_density = 0;
  bool negative_density_flag = false;  ///< some M < -1e-10
  std::string failure;  ///< HJB step failure that stopped the iteration, empty otherwise
};

/// Samples a normal density with mean X and standard deviation Sigma. Throws
/// DomainError if less than 0.999 of the mass lies on the grid.
Row gaussian_density(double X, double Sigma, const Grid& g);

struct CostTerms {
  double f = 0;   ///< g m^alpha on max(m, 0)
  double u0 = 0;  ///< -h x^2 / 2 - x^4 / 4
  bool clamped = false;
};

CostTerms cost_terms(const ModelParams& p, double x, double m);

/// One implicit HJB step: solves F1(U^n) = 0 by Newton with a tridiagonal
/// Jacobian. The stopping test is max |F1| < newton_tol * max(1, |U^{n+1}| / dt,
/// |f + U0|). Throws ConvergenceError with the residual history otherwise.
Row hjb_backward_step(const Row& U_next, const Row& M_next, const Grid& g, const ModelParams& p,
                      double newton_tol = 1e-12, int max_iter = 50);

/// One linear FP step with the drift lagged at U^n.
Row fp_forward_step(const Row& M, const Row& U, const Grid& g, const ModelParams& p);

/// Damped Picard iteration. warm_M, if given, replaces the linear-in-time
/// initial density guess. Non-convergence, including an HJB step that has no
/// Newton root, is reported through the log and `failure`, not thrown.
PdeResult picard_solve(const ModelParams& p, const Row& m_ic, const Row& m_fc, const Grid& g,
                       const PdeConfig& cfg, const Table* warm_M = nullptr);

/// Gaussian density table following the mean and deviation of a BVP solution.
Table warm_start_density(const ModelParams& p, const BvpSolution& sol, const Grid& g);

/// Residuals of the two discrete equations, each row divided by its diagonal
/// so both read in field units (comparable to the Picard update norms).
struct DiscreteResiduals {
  double hjb = 0;  ///< max |F1 / J_ii|, plus the final-condition mismatch
  double fp = 0;   ///< max |(A M^{n+1} - M^n / dt) / A_ii|
};

DiscreteResiduals discrete_residuals(const ModelParams& p, const PdeFields& f, const Grid& g,
                                     const Row& m_fc, double eps_p);

struct MomentSeries {
  std::vector<double> t;
  std::vector<LagrangianState> lagrangian;
  std::vector<PhaseState> phase;
};

/// Mean, scaled deviation and the Cole-Hopf momenta P and Lambda per time row.
MomentSeries extract_moments(const PdeFields& f, const Grid& g, const ModelParams& p);

/// p2 sign changes with |q1| <= q1_window on a sampled series (no interpolant).
int count_p2_crossings(const std::vector<PhaseState>& x, double q1_window = 0.5);

struct TopologyReport {
  int n_pde = 0;
  int n_bvp = 0;
  bool match = false;
  double max_q_deviation = 0;  ///< max over PDE times of |(q1, q2)_pde - (q1, q2)_bvp|
};

TopologyReport compare_topology(const ModelParams& p, const MomentSeries& pde, const BvpSolution& bvp,
                                const Equilibrium& eq, double q1_window = 0.5);

}  // namespace mfgrom
