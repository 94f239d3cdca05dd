#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "mfgrom/dynamics.hpp"
#include "mfgrom/spectral.hpp"

using namespace mfgrom;
using Catch::Matchers::WithinRel;

namespace {

const double kPi = 3.14159265358979323846;

Equilibrium sc_equilibrium() { return find_equilibria(saddle_center_params(), 1, 10).at(0); }

// exp(tA) for A = [[0,-a,0,0],[-b,0,0,0],[0,0,0,-c],[0,0,d,0]], written in closed form.
Matrix4 block_exponential(double a, double b, double c, double d, double t) {
  Matrix4 E = Matrix4::Zero();
  const double l = std::sqrt(a * b), w = std::sqrt(c * d);
  E(0, 0) = E(1, 1) = std::cosh(l * t);
  E(0, 1) = -a / l * std::sinh(l * t);
  E(1, 0) = -b / l * std::sinh(l * t);
  E(2, 2) = E(3, 3) = std::cos(w * t);
  E(2, 3) = -c / w * std::sin(w * t);
  E(3, 2) = d / w * std::sin(w * t);
  return E;
}

}  // namespace

TEST_CASE("equilibrium is a fixed point of the integrator", "[dynamics]") {
  const auto p = saddle_center_params();
  const auto eq = sc_equilibrium();
  const Trajectory tr = integrate(p, eq.state, 0, 5);
  for (const auto& x : tr.states) CHECK((x - eq.state).norm() < 1e-10);
}

TEST_CASE("energy is conserved near the bottleneck", "[dynamics]") {
  const auto p = saddle_center_params();
  const auto eq = sc_equilibrium();
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> U(-1, 1);
  for (int k = 0; k < 10; ++k) {
    const PhaseState x0 = eq.state + Vector4(1e-3 * U(rng), 1e-3 * U(rng), 0.05 * U(rng), 5e-4 * U(rng));
    const Trajectory tr = integrate(p, x0, 0, 20);
    CHECK(tr.max_energy_drift(p) < 1e-9);
  }
}

TEST_CASE("time reversal returns to the start", "[dynamics]") {
  const auto p = saddle_center_params();
  const PhaseState x0 = make_state(0.3, 0.05, 4.2, 0.01);
  const PhaseState x1 = flow(p, x0, 1.5);
  PhaseState back = x1;
  back[kP1] = -back[kP1];
  back[kP2] = -back[kP2];
  PhaseState x2 = flow(p, back, 1.5);
  x2[kP1] = -x2[kP1];
  x2[kP2] = -x2[kP2];
  CHECK((x2 - x0).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("state transition matrix", "[dynamics]") {
  const auto p = saddle_center_params();
  const auto eq = sc_equilibrium();

  const auto [x0, Phi0] = flow_with_stm(p, make_state(0.2, 0.0, 4.0, 0.0), 0.0);
  CHECK((Phi0 - Matrix4::Identity()).norm() == 0.0);

  for (double t : {0.3, 1.0, 2.5}) {
    const auto [x, Phi] = flow_with_stm(p, eq.state, t);
    const Matrix4 E = block_exponential(eq.a, eq.b, eq.c, eq.d, t);
    CHECK((Phi - E).cwiseAbs().maxCoeff() < 1e-8 * std::max(1.0, E.cwiseAbs().maxCoeff()));
  }

  const PhaseState xr = make_state(0.4, -0.02, 4.3, 0.01);
  const auto [xt, Phi] = flow_with_stm(p, xr, 0.5);
  for (int j = 0; j < 4; ++j) {
    PhaseState a = xr;
    a[j] += 1e-6;
    const Vector4 col = (flow(p, a, 0.5) - xt) / 1e-6;
    CHECK((col - Phi.col(j)).cwiseAbs().maxCoeff() < 1e-4 * std::max(1.0, col.cwiseAbs().maxCoeff()));
  }
  CHECK_THAT(Phi.determinant(), WithinRel(1.0, 1e-9));
}

TEST_CASE("section crossings", "[dynamics]") {
  const auto p = saddle_center_params();
  const auto eq = sc_equilibrium();
  const Trajectory still = integrate(p, eq.state, 0, 3);
  CHECK(find_section_crossings(p, still, Section::p2_zero()).empty());

  // Inner turning point on the invariant plane at E_eq + 0.01
  const double E = eq.energy + 0.01;
  double lo = 1.0, hi = eq.q2();
  for (int k = 0; k < 200; ++k) {
    const double mid = 0.5 * (lo + hi);
    (potential_energy(p, 0.0, mid) > E ? lo : hi) = mid;
  }
  const PhaseState seed = make_state(0.0, 0.0, 0.5 * (lo + hi), 0.0);
  const auto second = integrate_to_section(p, seed, 5.0, Section::p2_zero(), 0, 2);
  REQUIRE(second);
  const double tp = second->time;
  CHECK_THAT(tp, WithinRel(2 * kPi / 13.8, 0.02));
  CHECK(std::abs(second->state[kP2]) < 1e-10);

  const Trajectory period = integrate(p, seed, 0, tp);
  const auto ev = find_section_crossings(p, period, Section::p2_zero());
  CHECK(ev.size() == 2);
}

TEST_CASE("integration stops at variance collapse", "[dynamics]") {
  const auto p = saddle_center_params();
  // Strongly inward p2 drives q2 toward zero; the integrator must not pass through.
  try {
    const Trajectory tr = integrate(p, make_state(0.0, 0.0, 0.5, 10.0), 0, 5);
    for (const auto& x : tr.states) CHECK(x[kQ2] > 0);
  } catch (const IntegrationError& e) {
    SUCCEED(e.what());
  }
}

TEST_CASE("trajectory CSV format", "[dynamics]") {
  const auto p = saddle_center_params();
  const Trajectory tr = make_trajectory(p, {0.0, 0.1}, {make_state(0.1, 0.0, 4.0, 0.0), make_state(0.1, 0.0, 4.0, 0.0)});
  std::ostringstream os;
  write_trajectory_csv(os, p, tr);
  const std::string s = os.str();
  CHECK(s.rfind("t,q1,p1,q2,p2,E\n", 0) == 0);
  CHECK(s.find('\r') == std::string::npos);
  CHECK(s.find("0.10000000000000001") != std::string::npos);
}
