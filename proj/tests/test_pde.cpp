#include <catch2/catch_amalgamated.hpp>

#include "mfgrom/pde.hpp"

using namespace mfgrom;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

const double kPi = 3.14159265358979323846;

double sum_dx(const Row& v, const Grid& g) { return v.sum() * g.dx(); }

Row grid_x(const Grid& g) {
  Row x(g.Nx + 1);
  for (int i = 0; i <= g.Nx; ++i) x[i] = g.x(i);
  return x;
}

// Stationary-like planning problem centred on the SC equilibrium width. With
// the default eps_p = 0.01 the Picard loop diverges here for every horizon
// tried, so this run uses a unit penalty on a short horizon.
struct StaticRun {
  ModelParams p = saddle_center_params();
  Grid g{4.0, 400, 10, 0.02};
  Row m;
  PdeResult r;
  PdeConfig cfg;

  StaticRun() {
    cfg.eps_p = 1.0;
    const auto eq = find_equilibria(p, 1, 10).at(0);
    m = gaussian_density(0.0, p.epsilon * eq.q2(), g);
    r = picard_solve(p, m, m, g, cfg);
  }
};

const StaticRun& static_run() {
  static const StaticRun s;
  return s;
}

}  // namespace

TEST_CASE("grid spacings", "[pde]") {
  const Grid g = Grid::appendix();
  CHECK(g.dt() == 0.019);
  CHECK(g.dx() == 0.08);
  CHECK(g.x(0) == -20.0);
  CHECK(g.x(g.Nx) == 20.0);
  CHECK_THROWS_AS((Grid{40, 2, 10, 1}.validate()), DomainError);
  PdeConfig c;
  c.delta = 1.0;
  CHECK_THROWS_AS(c.validate(), DomainError);
}

TEST_CASE("Gaussian rows", "[pde]") {
  const Grid g = Grid::appendix();
  const Row m0 = gaussian_density(0.0, 1.0, g);
  CHECK_THAT(sum_dx(m0, g), WithinAbs(1.0, 1e-6));

  const Row a = gaussian_density(-10.0, 0.05 * 4.5, g);
  const Row b = gaussian_density(10.0, 0.05 * 4.5, g);
  CHECK((a - b.reverse()).cwiseAbs().maxCoeff() < 1e-12 * a.maxCoeff());

  // Fourth central moment of a normal density is 3 Sigma^4.
  const Row x = grid_x(g);
  const double m4 = sum_dx((x.array() + 10).pow(4).matrix().cwiseProduct(a), g);
  CHECK_THAT(m4, WithinRel(3 * std::pow(0.225, 4), 1e-3));

  CHECK_THROWS_AS(gaussian_density(19.5, 1.0, g), DomainError);
  CHECK_THROWS_AS(gaussian_density(0.0, 0.0, g), DomainError);
}

TEST_CASE("cost terms", "[pde]") {
  const auto p = saddle_center_params();
  CHECK(cost_terms(p, 0.3, 0.0).f == 0.0);
  CHECK_THAT(cost_terms(p, 0.0, 0.5).f, WithinAbs(0.5, 1e-15));
  CHECK(cost_terms(p, 2.0, 0.1).u0 == -4.0);
  const auto neg = cost_terms(p, 0.0, -1e-6);
  CHECK(neg.clamped);
  CHECK(neg.f == 0.0);
}

TEST_CASE("HJB step fixed point and constant data", "[pde]") {
  const auto p = saddle_center_params();
  {
    const Grid g{1e-3, 20, 10, 0.1};
    const Row z = Row::Zero(g.Nx + 1);
    CHECK(hjb_backward_step(z, z, g, p).cwiseAbs().maxCoeff() < 1e-12);
  }
  {
    // U^{n+1} = c and M^{n+1} = mbar: the step is U^n = c - dt (f(mbar) + U0(x)) up to O(dt^2).
    const Grid g{2.0, 100, 1000, 1.0};
    const double c = 0.7, mbar = 0.4;
    const Row U = hjb_backward_step(Row::Constant(g.Nx + 1, c), Row::Constant(g.Nx + 1, mbar), g, p);
    const double f = p.g * std::pow(mbar, p.alpha);
    double worst = 0;
    for (int i = 1; i < g.Nx; ++i) {
      const double x = g.x(i);
      worst = std::max(worst, std::abs(U[i] - (c - g.dt() * (f + (-x * x * x * x / 4)))));
    }
    CHECK(worst < 1e-5);
  }
}

TEST_CASE("FP step with constant value is an implicit heat step", "[pde]") {
  const auto p = saddle_center_params();
  const Grid g = Grid::appendix();
  const Row x = grid_x(g);
  Row M = gaussian_density(1.0, 1.0, g);
  const Row U = Row::Constant(g.Nx + 1, 3.0);
  const double mass0 = sum_dx(M, g);
  for (int n = 0; n < 20; ++n) {
    const Row M1 = fp_forward_step(M, U, g, p);
    const double mean0 = sum_dx(x.cwiseProduct(M), g) / mass0;
    const double var0 = sum_dx(x.cwiseProduct(x).cwiseProduct(M), g) / mass0 - mean0 * mean0;
    const double mean1 = sum_dx(x.cwiseProduct(M1), g) / mass0;
    const double var1 = sum_dx(x.cwiseProduct(x).cwiseProduct(M1), g) / mass0 - mean1 * mean1;
    CHECK_THAT(sum_dx(M1, g), WithinAbs(mass0, 1e-8));
    CHECK_THAT(mean1, WithinAbs(mean0, 1e-10));
    // Backward Euler with the three-point Laplacian adds exactly sigma^2 dt to the variance.
    CHECK_THAT(var1 - var0, WithinRel(p.sigma * p.sigma * g.dt(), 1e-8));
    M = M1;
  }
  CHECK(fp_forward_step(Row::Zero(g.Nx + 1), U, g, p).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("FP step advects with velocity -u_x / mu", "[pde]") {
  ModelParams p = saddle_center_params();
  p.sigma = 0.1;
  const Grid g = Grid::appendix();
  const Row x = grid_x(g);
  const double s = 1.0;
  const Row U = s * x;
  Row M = gaussian_density(0.0, 1.0, g);
  const double c0 = sum_dx(x.cwiseProduct(M), g);
  const int steps = 50;
  for (int n = 0; n < steps; ++n) M = fp_forward_step(M, U, g, p);
  const double shift = (sum_dx(x.cwiseProduct(M), g) - c0) / steps;
  CHECK_THAT(shift, WithinRel(-s / p.mu * g.dt(), 0.05));
}

TEST_CASE("moment extraction", "[pde]") {
  const auto p = saddle_center_params();
  const double kappa = p.mu * p.sigma * p.sigma;
  const Grid g{8.0, 1600, 1, 1.0};
  const Row x = grid_x(g);

  SECTION("Gaussian density with zero value") {
    PdeFields f;
    f.M = Table(2, g.Nx + 1);
    f.U = Table::Zero(2, g.Nx + 1);
    f.M.row(0) = gaussian_density(0.4, 0.2, g).transpose();
    f.M.row(1) = f.M.row(0);
    const auto ms = extract_moments(f, g, p);
    CHECK_THAT(ms.lagrangian[0].X, WithinAbs(0.4, 1e-4));
    CHECK_THAT(ms.lagrangian[0].S * p.epsilon, WithinAbs(0.2, 1e-4));
    CHECK(std::abs(ms.lagrangian[0].P) < 1e-10);
  }

  SECTION("ansatz fields recover their parameters") {
    const double X = 0.5, S = 4.0, P = 0.3, Lambda = 0.7, gamma = Lambda / 4;
    const double Sig = p.epsilon * S;
    PdeFields f;
    f.M = Table(2, g.Nx + 1);
    f.U = Table(2, g.Nx + 1);
    for (int i = 0; i <= g.Nx; ++i) {
      const double d2 = (x[i] - X) * (x[i] - X) / (4 * Sig * Sig);
      const double norm = std::pow(2 * kPi * Sig * Sig, -0.25);
      const double Phi = std::exp((-gamma + P * x[i]) / kappa) * norm * std::exp(-d2 * (1 - Lambda / kappa));
      const double Gam = std::exp((gamma - P * x[i]) / kappa) * norm * std::exp(-d2 * (1 + Lambda / kappa));
      f.M(0, i) = f.M(1, i) = Phi * Gam;
      f.U(0, i) = f.U(1, i) = -kappa * std::log(Phi);
    }
    const auto l = extract_moments(f, g, p).lagrangian[0];
    CHECK_THAT(l.X, WithinRel(X, 1e-3));
    CHECK_THAT(l.S, WithinRel(S, 1e-3));
    CHECK_THAT(l.P, WithinRel(P, 1e-3));
    CHECK_THAT(l.Lambda, WithinRel(Lambda, 1e-3));
  }

  SECTION("degenerate density") {
    PdeFields f;
    f.M = Table::Zero(2, g.Nx + 1);
    f.U = Table::Zero(2, g.Nx + 1);
    CHECK_THROWS_AS(extract_moments(f, g, p), DomainError);
  }
}

TEST_CASE("p2 crossings on sampled series", "[pde]") {
  std::vector<PhaseState> xs, far;
  for (int k = 0; k <= 200; ++k) {
    const double t = k * 0.05;
    xs.push_back(make_state(0.0, 0.0, 4.0, std::sin(2 * t + 0.1)));
    far.push_back(make_state(2.0, 0.0, 4.0, std::sin(2 * t + 0.1)));
  }
  CHECK(count_p2_crossings(xs) == 6);
  CHECK(count_p2_crossings(far) == 0);
}

TEST_CASE("static planning problem", "[pde]") {
  const auto& s = static_run();
  INFO("iterations " << s.r.log.iterations() << " failure " << s.r.failure);
  REQUIRE(s.r.log.converged);
  CHECK(s.r.log.entries.back().err_u < s.cfg.tol);
  CHECK(s.r.log.entries.back().err_m < s.cfg.tol);
  for (const auto& e : s.r.log.entries) CHECK((std::isfinite(e.err_u) && std::isfinite(e.err_m)));
  CHECK(s.r.mass_drift < 1e-3);
  CHECK(!s.r.negative_density_flag);

  const auto res = discrete_residuals(s.p, s.r.fields, s.g, s.m, s.cfg.eps_p);
  CHECK(res.hjb < 10 * s.cfg.tol);
  CHECK(res.fp < 10 * s.cfg.tol);

  // Regression values from the first converged run.
  CHECK_THAT(s.r.final_density_error, WithinRel(0.2170098, 1e-4));
  CHECK(s.r.log.iterations() == 21);

  const auto ms = extract_moments(s.r.fields, s.g, s.p);
  CHECK(count_p2_crossings(ms.phase) == 0);
  for (const auto& x : ms.phase) CHECK(std::abs(x[0]) < 1e-6);

  const auto eq = find_equilibria(s.p, 1, 10).at(0);
  const BoundaryConditions bc{0, eq.q2(), 0, eq.q2()};
  const auto bvp = solve_bvp(s.p, bc, s.g.T, straight_line_guess(s.p, bc, s.g.T));
  const auto rep = compare_topology(s.p, ms, bvp, eq);
  CHECK(rep.n_pde == 0);
  CHECK(rep.n_bvp == 0);
  CHECK(rep.match);
}

TEST_CASE("final-condition error shrinks with the penalty weight", "[pde]") {
  // Weak interaction and heavy damping: with g = 4 the loop diverges at
  // eps_p = 0.01. The target is shifted so the final condition binds.
  ModelParams p = saddle_center_params();
  p.g = 0.1;
  const Grid g{8.0, 200, 20, 0.5};
  const Row m = gaussian_density(0.0, p.epsilon * 10, g);
  const Row target = gaussian_density(0.5, p.epsilon * 10, g);
  PdeConfig c;
  c.delta = 0.97;
  double prev = 1e300;
  for (double eps_p : {0.1, 0.03, 0.01}) {
    c.eps_p = eps_p;
    const auto r = picard_solve(p, m, target, g, c);
    INFO("eps_p " << eps_p << " failure " << r.failure);
    REQUIRE(r.log.converged);
    CHECK(r.final_density_error < prev);
    prev = r.final_density_error;
  }
}
