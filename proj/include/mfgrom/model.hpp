#pragma once

// Reduced-order Hamiltonian model of the quadratic mean-field game.
//
// Phase coordinates are (q1, p1, q2, p2): q1 is the population mean, q2 the
// scaled standard deviation (physical sigma_x = epsilon * q2), p1/p2 their
// conjugate momenta. All functions are templated on the scalar type so the
// same code evaluates in double or long double.

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <string>

#include "mfgrom/errors.hpp"

namespace mfgrom {

template <typename Scalar>
using Vec4 = Eigen::Matrix<Scalar, 4, 1>;
template <typename Scalar>
using Mat4 = Eigen::Matrix<Scalar, 4, 4>;

using Vector4 = Vec4<double>;
using Matrix4 = Mat4<double>;

/// Index of each coordinate inside a phase-state vector.
enum Coord : int { kQ1 = 0, kP1 = 1, kQ2 = 2, kP2 = 3 };

/// A point (q1, p1, q2, p2) of the 4D phase space.
using PhaseState = Vector4;

template <typename Scalar = double>
Vec4<Scalar> make_state(Scalar q1, Scalar p1, Scalar q2, Scalar p2) {
  return Vec4<Scalar>(q1, p1, q2, p2);
}

template <typename Scalar>
struct ModelParamsT {
  Scalar sigma{1};
  Scalar mu{2};
  Scalar g{4};
  Scalar h{0};
  Scalar alpha{3};
  Scalar epsilon{0.05};

  /// Throws DomainError unless sigma, mu, g, alpha > 0, h >= 0, 0 < epsilon < 1.
  void validate() const {
    using std::isfinite;
    auto fail = [](const std::string& what) { throw DomainError("ModelParams: " + what); };
    if (!(isfinite(sigma) && isfinite(mu) && isfinite(g) && isfinite(h) && isfinite(alpha) &&
          isfinite(epsilon)))
      fail("non-finite parameter");
    if (!(sigma > 0)) fail("sigma must be > 0");
    if (!(mu > 0)) fail("mu must be > 0");
    if (!(g > 0)) fail("g must be > 0");
    if (!(alpha > 0)) fail("alpha must be > 0");
    if (!(h >= 0)) fail("h must be >= 0");
    if (!(epsilon > 0 && epsilon < 1)) fail("epsilon must lie in (0,1)");
  }

  template <typename To>
  ModelParamsT<To> cast() const {
    return {To(sigma), To(mu), To(g), To(h), To(alpha), To(epsilon)};
  }

  /// Prefactor of the Gaussian interaction energy, g / ((a+1)^{3/2} (2 pi)^{a/2}).
  Scalar interaction_prefactor() const {
    using std::pow;
    const Scalar two_pi = Scalar(2) * std::numbers::pi_v<Scalar>;
    return g / (pow(alpha + 1, Scalar(1.5)) * pow(two_pi, alpha / 2));
  }
};

using ModelParams = ModelParamsT<double>;

/// Saddle x saddle preset (mean-field equilibrium near q2 = 12.21).
inline ModelParams saddle_saddle_params() { return {1.0, 2.0, 4.0, 0.0, 1.0, 0.05}; }
/// Saddle x center preset (mean-field equilibrium near q2 = 3.81).
inline ModelParams saddle_center_params() { return {1.0, 2.0, 4.0, 0.0, 3.0, 0.05}; }

/// Lagrangian-side moments: mean X, scaled deviation S, and the momentum-like P, Lambda.
template <typename Scalar>
struct LagrangianStateT {
  Scalar X{0};
  Scalar S{1};
  Scalar P{0};
  Scalar Lambda{0};
};
using LagrangianState = LagrangianStateT<double>;

template <typename Scalar>
struct EnergyBreakdownT {
  Scalar e_kin{0};
  Scalar e_ipot{0};
  Scalar e_epot{0};
  Scalar e_tot{0};
};
using EnergyBreakdown = EnergyBreakdownT<double>;

namespace detail {
template <typename Scalar>
void require_positive_q2(Scalar q2) {
  if (!(q2 > 0)) throw DomainError("q2 must be positive (variance collapse)");
}
}  // namespace detail

/// V(q1, q2). Even in q1 and singular as q2 -> 0.
template <typename Scalar>
Scalar potential_energy(const ModelParamsT<Scalar>& p, Scalar q1, Scalar q2) {
  using std::pow;
  detail::require_positive_q2(q2);
  const Scalar s = p.epsilon * q2;
  const Scalar s2 = s * s;
  const Scalar q1sq = q1 * q1;
  const Scalar sig4 = pow(p.sigma, 4);
  return -p.h * q1sq / 2 - q1sq * q1sq / 4 - s2 * (p.h + 3 * q1sq) / 2 -
         p.mu * sig4 / (8 * s2) + p.interaction_prefactor() / pow(s, p.alpha) -
         Scalar(0.75) * s2 * s2;
}

/// (dV/dq1, dV/dq2).
template <typename Scalar>
Eigen::Matrix<Scalar, 2, 1> potential_gradient(const ModelParamsT<Scalar>& p, Scalar q1,
                                               Scalar q2) {
  using std::pow;
  detail::require_positive_q2(q2);
  const Scalar eps2 = p.epsilon * p.epsilon;
  const Scalar s = p.epsilon * q2;
  const Scalar q1sq = q1 * q1;
  const Scalar dq1 = -q1 * (q1sq + p.h + 3 * eps2 * q2 * q2);
  const Scalar dq2 = -eps2 * q2 * (3 * q1sq + p.h) + p.mu * pow(p.sigma, 4) / (4 * eps2 * q2 * q2 * q2) -
                     p.alpha * p.interaction_prefactor() * p.epsilon / pow(s, p.alpha + 1) -
                     3 * eps2 * eps2 * q2 * q2 * q2;
  return {dq1, dq2};
}

/// E = -H = p1^2/(2 mu) + p2^2/(2 eps^2 mu) + V(q1, q2).
template <typename Scalar>
Scalar energy(const ModelParamsT<Scalar>& p, const Vec4<Scalar>& x) {
  const Scalar eps2 = p.epsilon * p.epsilon;
  return x[kP1] * x[kP1] / (2 * p.mu) + x[kP2] * x[kP2] / (2 * eps2 * p.mu) +
         potential_energy(p, x[kQ1], x[kQ2]);
}

/// Hamiltonian equations of motion. Since H = -E, pdot = +grad V.
template <typename Scalar>
Vec4<Scalar> vector_field(const ModelParamsT<Scalar>& p, const Vec4<Scalar>& x) {
  const auto grad = potential_gradient(p, x[kQ1], x[kQ2]);
  const Scalar eps2 = p.epsilon * p.epsilon;
  return {-x[kP1] / p.mu, grad[0], -x[kP2] / (eps2 * p.mu), grad[1]};
}

/// d(vector_field)/d(state) at an arbitrary point.
template <typename Scalar>
Mat4<Scalar> state_jacobian(const ModelParamsT<Scalar>& p, const Vec4<Scalar>& x) {
  using std::pow;
  const Scalar q1 = x[kQ1];
  const Scalar q2 = x[kQ2];
  detail::require_positive_q2(q2);
  const Scalar eps2 = p.epsilon * p.epsilon;
  const Scalar s = p.epsilon * q2;
  const Scalar cross = -6 * eps2 * q1 * q2;

  Mat4<Scalar> J = Mat4<Scalar>::Zero();
  J(kQ1, kP1) = -1 / p.mu;
  J(kP1, kQ1) = -3 * eps2 * q2 * q2 - 3 * q1 * q1 - p.h;
  J(kP1, kQ2) = cross;
  J(kQ2, kP2) = -1 / (eps2 * p.mu);
  J(kP2, kQ1) = cross;
  J(kP2, kQ2) = p.alpha * (p.alpha + 1) * p.interaction_prefactor() * eps2 / pow(s, p.alpha + 2) -
                9 * eps2 * eps2 * q2 * q2 - 3 * pow(p.sigma, 4) * p.mu / (4 * eps2 * pow(q2, 4)) -
                eps2 * (3 * q1 * q1 + p.h);
  return J;
}

/// Legendre map (X, S, P, Lambda) -> (q1, p1, q2, p2) = (X, -P, S, -Lambda/(2S)).
template <typename Scalar>
Vec4<Scalar> lagrangian_to_phase(const LagrangianStateT<Scalar>& l) {
  detail::require_positive_q2(l.S);
  return {l.X, -l.P, l.S, -l.Lambda / (2 * l.S)};
}

template <typename Scalar>
LagrangianStateT<Scalar> phase_to_lagrangian(const Vec4<Scalar>& x) {
  detail::require_positive_q2(x[kQ2]);
  return {x[kQ1], x[kQ2], -x[kP1], -2 * x[kQ2] * x[kP2]};
}

/// Kinetic, interaction and (fourth-order Taylor) external-potential energies of
/// the Gaussian ansatz.
template <typename Scalar>
EnergyBreakdownT<Scalar> energy_components(const ModelParamsT<Scalar>& p,
                                           const LagrangianStateT<Scalar>& l) {
  using std::pow;
  detail::require_positive_q2(l.S);
  const Scalar s = p.epsilon * l.S;
  const Scalar s2 = s * s;
  const Scalar X2 = l.X * l.X;

  EnergyBreakdownT<Scalar> e;
  e.e_kin = l.P * l.P / (2 * p.mu) + l.Lambda * l.Lambda / (8 * p.mu * s2) -
            p.mu * pow(p.sigma, 4) / (8 * s2);
  e.e_ipot = p.interaction_prefactor() / pow(s, p.alpha);
  // U0(X) + s^2 U0''(X)/2 + 3 s^4 U0''''(X)/4!, with U0 = -h x^2/2 - x^4/4.
  e.e_epot = -p.h * X2 / 2 - X2 * X2 / 4 - s2 * (p.h + 3 * X2) / 2 - Scalar(0.75) * s2 * s2;
  e.e_tot = e.e_kin + e.e_ipot + e.e_epot;
  return e;
}

/// Reduced Lagrangian with velocities taken from the Euler-Lagrange relations
/// Xdot = P/mu, Sdot = Lambda / (2 mu eps^2 S).
template <typename Scalar>
Scalar reduced_lagrangian(const ModelParamsT<Scalar>& p, const LagrangianStateT<Scalar>& l) {
  const auto e = energy_components(p, l);
  const Scalar eps2 = p.epsilon * p.epsilon;
  const Scalar Xdot = l.P / p.mu;
  const Scalar Sdot = l.Lambda / (2 * p.mu * eps2 * l.S);
  return -l.P * Xdot - l.Lambda * Sdot / (2 * l.S) + e.e_tot;
}

}  // namespace mfgrom
