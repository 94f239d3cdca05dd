#include "mfgrom/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mfgrom {

const char* to_string(EquilibriumKind k) {
  return k == EquilibriumKind::SaddleSaddle ? "SaddleSaddle" : "SaddleCenter";
}

const char* to_string(TransitKind k) {
  switch (k) {
    case TransitKind::Transit: return "Transit";
    case TransitKind::NonTransit: return "NonTransit";
    case TransitKind::Asymptotic: return "Asymptotic";
  }
  return "?";
}

std::vector<Equilibrium> find_equilibria(const ModelParams& p, double q2_lo, double q2_hi,
                                         int scan_points) {
  std::vector<Equilibrium> out;
  if (!(q2_lo > 0) || !(q2_hi > q2_lo) || scan_points < 2) return out;

  auto dv = [&](double q2) { return potential_gradient(p, 0.0, q2)[1]; };
  const double llo = std::log(q2_lo), lhi = std::log(q2_hi);
  double x_prev = q2_lo;
  double g_prev = dv(x_prev);
  for (int i = 1; i <= scan_points; ++i) {
    const double x = i == scan_points ? q2_hi : std::exp(llo + (lhi - llo) * i / scan_points);
    const double g = dv(x);
    if (g == 0.0 || (g_prev != 0.0 && (g > 0) != (g_prev > 0))) {
      double lo = x_prev, hi = x, glo = g_prev;
      if (g == 0.0) lo = hi = x;
      while (hi - lo > 4 * std::numeric_limits<double>::epsilon() * hi) {
        const double mid = 0.5 * (lo + hi);
        const double gm = dv(mid);
        if (gm == 0.0) {
          lo = hi = mid;
          break;
        }
        if ((gm > 0) == (glo > 0)) {
          lo = mid;
          glo = gm;
        } else {
          hi = mid;
        }
      }
      const double root = 0.5 * (lo + hi);
      try {
        out.push_back(classify_equilibrium(p, make_state(0.0, 0.0, root, 0.0)));
      } catch (const DomainError&) {
        // Degenerate root (vanishing (4,3) entry): not a hyperbolic equilibrium.
      }
    }
    x_prev = x;
    g_prev = g;
  }
  return out;
}

Equilibrium classify_equilibrium(const ModelParams& p, const PhaseState& x) {
  const PhaseState f = vector_field(p, x);
  const double scale = std::max(1.0, std::abs(potential_gradient(p, 0.0, x[kQ2])[1]) +
                                         p.mu * std::pow(p.sigma, 4) /
                                             (4 * p.epsilon * p.epsilon * std::pow(x[kQ2], 3)));
  if (f.norm() > 1e-10 * scale) throw DomainError("classify_equilibrium: state is not an equilibrium");

  const Matrix4 J = state_jacobian(p, x);
  Equilibrium eq;
  eq.state = x;
  eq.a = -J(kQ1, kP1);
  eq.b = -J(kP1, kQ1);
  eq.c = -J(kQ2, kP2);
  eq.j43 = J(kP2, kQ2);
  eq.d = std::abs(eq.j43);
  if (eq.d < 1e-12) throw DomainError("classify_equilibrium: degenerate equilibrium (J43 = 0)");
  eq.kind = eq.j43 > 0 ? EquilibriumKind::SaddleCenter : EquilibriumKind::SaddleSaddle;
  eq.rate1 = std::sqrt(eq.a * eq.b);
  eq.rate2 = std::sqrt(eq.c * eq.d);
  eq.energy = energy(p, x);
  return eq;
}

EigenBasis eigen_basis(const Equilibrium& eq) {
  EigenBasis B;
  B.kind = eq.kind;
  B.rate1 = eq.rate1;
  B.rate2 = eq.rate2;
  const double sa = std::sqrt(eq.a / (eq.a + eq.b));
  const double sb = std::sqrt(eq.b / (eq.a + eq.b));
  const double sc = std::sqrt(eq.c / (eq.c + eq.d));
  const double sd = std::sqrt(eq.d / (eq.c + eq.d));
  B.T.setZero();
  B.T(0, 0) = sa;
  B.T(0, 1) = sa;
  B.T(1, 0) = -sb;
  B.T(1, 1) = sb;
  if (eq.kind == EquilibriumKind::SaddleSaddle) {
    B.T(2, 2) = sc;
    B.T(2, 3) = sc;
    B.T(3, 2) = -sd;
    B.T(3, 3) = sd;
  } else {
    B.T(2, 2) = sc;
    B.T(3, 3) = -sd;
  }
  B.T_inv = B.T.inverse();
  B.a1 = 2 * eq.a * eq.b / (eq.a + eq.b);
  B.a2 = 0.5 * eq.c * eq.d / (eq.c + eq.d);
  return B;
}

double EigenCoords::rho() const { return std::hypot(rho1, rho2); }

EigenCoords to_eigen_coords(const EigenBasis& basis, const Equilibrium& eq, const PhaseState& x) {
  return EigenCoords::from_vec(basis.T_inv * (x - eq.state));
}

PhaseState from_eigen_coords(const EigenBasis& basis, const Equilibrium& eq, const EigenCoords& y) {
  return eq.state + basis.T * y.vec();
}

double linear_energy(const EigenBasis& basis, const EigenCoords& y) {
  return -basis.a1 * y.zeta * y.eta + basis.a2 * (y.rho1 * y.rho1 + y.rho2 * y.rho2);
}

double linear_energy_phase(const Equilibrium& eq, const Vector4& z) {
  return -0.5 * (eq.b * z[0] * z[0] - eq.a * z[1] * z[1] - eq.d * z[2] * z[2] - eq.c * z[3] * z[3]);
}

EigenCoords linear_flow(const EigenBasis& basis, const EigenCoords& y0, double t) {
  const double lam = basis.rate1, nu = basis.rate2;
  const double cs = std::cos(nu * t), sn = std::sin(nu * t);
  EigenCoords y;
  y.zeta = y0.zeta * std::exp(lam * t);
  y.eta = y0.eta * std::exp(-lam * t);
  y.rho1 = cs * y0.rho1 + sn * y0.rho2;
  y.rho2 = -sn * y0.rho1 + cs * y0.rho2;
  return y;
}

RegionSpec RegionSpec::make(const EigenBasis& basis, double eps1, double C) {
  if (!(eps1 > 0) || !(C > 0)) throw DomainError("RegionSpec: eps1 and C must be positive");
  return {eps1, C, std::sqrt(eps1 / basis.a2)};
}

TransitKind transit_classify(const EigenCoords& y, double tol) {
  const double ze = y.zeta * y.eta;
  if (std::abs(ze) <= tol) return TransitKind::Asymptotic;
  return ze < 0 ? TransitKind::Transit : TransitKind::NonTransit;
}

}  // namespace mfgrom
