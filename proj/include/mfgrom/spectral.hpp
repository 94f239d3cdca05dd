#pragma once

#include <Eigen/Dense>

#include <vector>

#include "mfgrom/model.hpp"

namespace mfgrom {

enum class EquilibriumKind { SaddleSaddle, SaddleCenter };

const char* to_string(EquilibriumKind k);

/// Equilibrium on the line q1 = p1 = p2 = 0 with the linear data of its
/// Jacobian  A = [[0,-a,0,0],[-b,0,0,0],[0,0,0,-c],[0,0,+-d,0]].
struct Equilibrium {
  PhaseState state = PhaseState::Zero();
  EquilibriumKind kind = EquilibriumKind::SaddleCenter;
  double a = 0, b = 0, c = 0, d = 0;
  /// (gamma1, gamma2) for saddle x saddle, (lambda, nu) for saddle x center.
  double rate1 = 0, rate2 = 0;
  double energy = 0;
  double j43 = 0;  ///< signed (4,3) Jacobian entry

  double q2() const { return state[kQ2]; }
};

/// All equilibria with q2 in [q2_lo, q2_hi]: sign changes of dV/dq2(0, .) on a
/// log-spaced scan, refined by bisection. Returns an empty list if none.
std::vector<Equilibrium> find_equilibria(const ModelParams& p, double q2_lo, double q2_hi,
                                         int scan_points = 20000);

/// Reads a, b, c, d from the analytic Jacobian. Throws DomainError when the
/// state is not an equilibrium or the (4,3) entry vanishes.
Equilibrium classify_equilibrium(const ModelParams& p, const PhaseState& eq_state);

struct EigenBasis {
  Matrix4 T = Matrix4::Identity();
  Matrix4 T_inv = Matrix4::Identity();
  double a1 = 0;  ///< 2ab/(a+b)
  double a2 = 0;  ///< cd/(2(c+d))
  EquilibriumKind kind = EquilibriumKind::SaddleCenter;
  double rate1 = 0, rate2 = 0;
};

EigenBasis eigen_basis(const Equilibrium& eq);

struct EigenCoords {
  double zeta = 0, eta = 0, rho1 = 0, rho2 = 0;

  double rho() const;
  Vector4 vec() const { return {zeta, eta, rho1, rho2}; }
  static EigenCoords from_vec(const Vector4& v) { return {v[0], v[1], v[2], v[3]}; }
};

/// Y = T^{-1} (x - x_eq).
EigenCoords to_eigen_coords(const EigenBasis& basis, const Equilibrium& eq, const PhaseState& x);
PhaseState from_eigen_coords(const EigenBasis& basis, const Equilibrium& eq, const EigenCoords& y);

/// E_l = -a1 zeta eta + a2 (rho1^2 + rho2^2).
double linear_energy(const EigenBasis& basis, const EigenCoords& y);

/// Quadratic energy -H_l = -(b q1^2 - a p1^2 - d q2^2 - c p2^2)/2 of a
/// displacement from the saddle x center equilibrium.
double linear_energy_phase(const Equilibrium& eq, const Vector4& dz);

/// Exact solution of the linearized saddle x center flow in eigencoordinates.
/// The elliptic pair obeys rho1' = nu rho2, rho2' = -nu rho1 in this basis.
EigenCoords linear_flow(const EigenBasis& basis, const EigenCoords& y0, double t);

struct RegionSpec {
  double eps1 = 0;
  double C = 0;
  double rho_star = 0;

  static RegionSpec make(const EigenBasis& basis, double eps1, double C);
};

enum class TransitKind { Transit, NonTransit, Asymptotic };

const char* to_string(TransitKind k);

/// Sign of zeta*eta with a dead band |zeta*eta| <= tol classed as Asymptotic.
TransitKind transit_classify(const EigenCoords& y, double tol = 1e-10);

}  // namespace mfgrom
