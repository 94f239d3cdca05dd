#include "mfgrom/orbits.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace mfgrom {

namespace {

PhaseState flip_momenta(PhaseState x) {
  x[kP1] = -x[kP1];
  x[kP2] = -x[kP2];
  return x;
}

double v_line(const ModelParams& p, double q2) { return potential_energy(p, 0.0, q2); }

}  // namespace

const char* to_string(TubeBranch b) { return b == TubeBranch::Stable ? "stable" : "unstable"; }

const char* to_string(TransitOutcome o) {
  switch (o) {
    case TransitOutcome::Transited: return "Transited";
    case TransitOutcome::Bounced: return "Bounced";
    case TransitOutcome::Undecided: return "Undecided";
  }
  return "?";
}

double orbit_energy_upper_bound(const ModelParams& p, const Equilibrium& eq) {
  const auto roots = find_equilibria(p, eq.q2() * (1 + 1e-9), 1e3 * eq.q2());
  for (const auto& r : roots)
    if (r.q2() > eq.q2() * (1 + 1e-6)) return r.energy;
  return std::numeric_limits<double>::infinity();
}

PeriodicOrbit orbit_at_energy(const ModelParams& p, const Equilibrium& eq, double E) {
  if (eq.kind != EquilibriumKind::SaddleCenter)
    throw OrbitError(OrbitError::Kind::NoOrbit, "orbit_at_energy: equilibrium is not saddle x center");
  if (!(E > eq.energy))
    throw OrbitError(OrbitError::Kind::NoOrbit, "orbit_at_energy: energy must exceed E_eq");

  const double qe = eq.q2();
  auto excess = [&](double q2) { return v_line(p, q2) - E; };

  // Inner turning point: V blows up as q2 -> 0.
  double lo = qe;
  while (excess(lo) < 0) {
    lo *= 0.5;
    if (lo < 1e-8) throw OrbitError(OrbitError::Kind::ExistenceBound, "no inner turning point");
  }
  auto bisect = [&](double a, double b) {
    const bool fa = excess(a) > 0;
    for (int it = 0; it < 200 && std::abs(b - a) > 1e-15 * std::abs(b); ++it) {
      const double m = 0.5 * (a + b);
      if ((excess(m) > 0) == fa) a = m; else b = m;
    }
    return 0.5 * (a + b);
  };
  const double q2_in = bisect(lo, qe);

  // Outer turning point must exist, otherwise the oscillation escapes.
  double hi = qe, step = 0.01 * qe;
  bool found = false;
  while (hi < 1e3 * qe) {
    const double nxt = hi + step;
    if (excess(nxt) >= 0) {
      hi = bisect(nxt, hi);
      found = true;
      break;
    }
    hi = nxt;
    step *= 1.05;
  }
  if (!found) throw OrbitError(OrbitError::Kind::ExistenceBound, "no outer turning point");

  PeriodicOrbit po;
  po.energy = E;
  po.q2_outer = hi;
  po.seed = make_state(0.0, 0.0, q2_in, 0.0);
  // The energy of the seed equals E up to the bisection tolerance.
  po.energy = energy(p, po.seed);

  IntegrateOptions io;
  io.rtol = 1e-13;
  io.atol = 1e-15;
  const double t_guess = 2 * std::numbers::pi / eq.rate2;
  const auto ev = integrate_to_section(p, po.seed, 200 * t_guess, Section::p2_zero(), 0, 2, io);
  if (!ev) throw OrbitError(OrbitError::Kind::ExistenceBound, "orbit did not close");
  po.period = ev->time;
  // Polish the period with Newton on p2(T) = 0; the unit Floquet pair is a
  // Jordan block, so a period error e splits it by about sqrt(e).
  for (int it = 0; it < 3; ++it) {
    const PhaseState x = flow(p, po.seed, po.period, io);
    const double rate = vector_field(p, x)[kP2];
    if (rate == 0) break;
    const double dT = -x[kP2] / rate;
    po.period += dT;
    if (std::abs(dT) < 1e-15 * po.period) break;
  }

  auto [xT, M] = flow_with_stm(p, po.seed, po.period, io);
  po.monodromy = M;
  po.closure_residual = (xT - po.seed).norm();
  IntegrateOptions so = io;
  so.sample_dt = po.period / 256;
  po.samples = integrate(p, po.seed, 0.0, po.period, so);

  Eigen::EigenSolver<Matrix4> es(M);
  int iu = -1;
  double best = 1.0 + 1e-6;
  for (int i = 0; i < 4; ++i) {
    const auto ev_i = es.eigenvalues()[i];
    if (std::abs(ev_i.imag()) < 1e-9 && std::abs(ev_i.real()) > best) {
      best = std::abs(ev_i.real());
      iu = i;
    }
  }
  if (iu < 0) throw OrbitError(OrbitError::Kind::HyperbolicityLost, "monodromy has no real pair off the unit circle");
  po.lambda_u = es.eigenvalues()[iu].real();
  int is = -1;
  double closest = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 4; ++i) {
    const auto ev_i = es.eigenvalues()[i];
    const double dist = std::abs(ev_i - 1.0 / po.lambda_u);
    if (i != iu && dist < closest) {
      closest = dist;
      is = i;
    }
  }
  auto unit = [](Vector4 v) {
    v.normalize();
    if (v[kQ1] < 0) v = -v;
    return v;
  };
  po.unstable_dir = unit(es.eigenvectors().col(iu).real());
  po.stable_dir = unit(es.eigenvectors().col(is).real());
  return po;
}

TubeManifold tube(const ModelParams& p, const PeriodicOrbit& po, TubeBranch branch, int side,
                  const TubeOptions& opts) {
  if (opts.n_strands < 1) throw DomainError("tube: n_strands must be positive");
  TubeManifold tm;
  tm.branch = branch;
  tm.side = side >= 0 ? 1 : -1;
  tm.energy = po.energy;
  tm.d = opts.d > 0 ? opts.d : 1e-5 * po.q2_amplitude();
  const Vector4 v0 = branch == TubeBranch::Unstable ? po.unstable_dir : po.stable_dir;

  tm.strands.resize(opts.n_strands);
  for (int k = 0; k < opts.n_strands; ++k) {
    TubeStrand& s = tm.strands[k];
    s.tau = po.period * k / opts.n_strands;
    auto [xk, phi] = flow_with_stm(p, po.seed, s.tau, opts.integrate);
    Vector4 v = phi * v0;
    v.normalize();
    const PhaseState start = xk + tm.side * tm.d * v;

    // A backward strand is the momentum-flipped forward flow.
    const bool backward = branch == TubeBranch::Stable;
    const PhaseState y0 = backward ? flip_momenta(start) : start;
    const double q1s = opts.q1_stop;
    try {
      s.traj = integrate_until(p, y0, opts.t_int,
                               [&](double, const PhaseState& x) { return std::abs(x[kQ1]) >= q1s; },
                               opts.integrate);
    } catch (const IntegrationError&) {
      s.truncated = true;
    }
    if (std::isfinite(q1s) && !s.traj.empty() && std::abs(s.traj.states.back()[kQ1]) >= q1s) {
      const double lvl = s.traj.states.back()[kQ1] > 0 ? q1s : -q1s;
      const auto hit = find_section_crossings(p, s.traj, Section::q1_at(lvl));
      if (!hit.empty()) {
        s.reached_stop = true;
        s.stop_state = backward ? flip_momenta(hit.front().state) : hit.front().state;
        // Cut the stored strand at the crossing.
        auto& t = s.traj;
        while (t.size() > 1 && t.times.back() > hit.front().time) {
          t.times.pop_back();
          t.states.pop_back();
          t.rates.pop_back();
        }
        t.times.push_back(hit.front().time);
        t.states.push_back(hit.front().state);
        t.rates.push_back(vector_field(p, hit.front().state));
      }
    }
    if (backward && !s.traj.empty()) {
      auto& t = s.traj;
      for (auto& x : t.states) x = flip_momenta(x);
      for (auto& tt : t.times) tt = -tt;
      std::reverse(t.times.begin(), t.times.end());
      std::reverse(t.states.begin(), t.states.end());
      t.rates.clear();
      for (const auto& x : t.states) t.rates.push_back(vector_field(p, x));
    }
  }
  return tm;
}

TransitOutcome transit_test_nonlinear(const ModelParams& p, const PhaseState& x, double q1_exit,
                                      double t_max) {
  const double v0 = vector_field(p, x)[kQ1];
  int entry = x[kQ1] > 0 ? 1 : x[kQ1] < 0 ? -1 : (v0 > 0 ? -1 : 1);
  if (x[kQ1] == 0 && v0 == 0) entry = 0;
  int exit_side = 0;
  try {
    integrate_until(p, x, t_max,
                    [&](double t, const PhaseState& y) {
                      if (t <= 0 || std::abs(y[kQ1]) < q1_exit) return false;
                      if (y[kQ1] * vector_field(p, y)[kQ1] <= 0) return false;
                      exit_side = y[kQ1] > 0 ? 1 : -1;
                      return true;
                    },
                    IntegrateOptions{1e-11, 1e-13});
  } catch (const IntegrationError&) {
    return TransitOutcome::Undecided;
  }
  if (exit_side == 0 || entry == 0) return TransitOutcome::Undecided;
  return exit_side != entry ? TransitOutcome::Transited : TransitOutcome::Bounced;
}

TransitOutcome transit_test_region(const ModelParams& p, const Equilibrium& eq,
                                   const EigenBasis& basis, const RegionSpec& region,
                                   const PhaseState& x, double t_max) {
  auto s_of = [&](const PhaseState& y) {
    const auto c = to_eigen_coords(basis, eq, y);
    return c.zeta + c.eta;
  };
  const double s0 = s_of(x);
  const int start_face = s0 < 0 ? -1 : 1;
  int face = 0;
  try {
    integrate_until(p, x, t_max,
                    [&](double t, const PhaseState& y) {
                      if (t <= 0) return false;
                      const double s = s_of(y);
                      if (s >= region.C) face = 1;
                      else if (s <= -region.C) face = -1;
                      return face != 0;
                    },
                    IntegrateOptions{1e-12, 1e-14, 0.0, 0.0, 0.05});
  } catch (const IntegrationError&) {
    return TransitOutcome::Undecided;
  }
  if (face == 0) return TransitOutcome::Undecided;
  return face != start_face ? TransitOutcome::Transited : TransitOutcome::Bounced;
}

PhaseState bounding_sphere_point(const Equilibrium& eq, const EigenBasis& basis,
                                 const RegionSpec& region, int face, double rho, double theta) {
  const double s = face * region.C;
  const double rhs = region.eps1 + 0.25 * basis.a1 * s * s - basis.a2 * rho * rho;
  if (rhs < 0) throw DomainError("bounding_sphere_point: rho too large for this energy");
  // zeta - eta > 0 moves zeta + eta upward; choose the inward sign.
  const double diff = -face * std::sqrt(4 * rhs / basis.a1);
  EigenCoords y;
  y.zeta = 0.5 * (s + diff);
  y.eta = 0.5 * (s - diff);
  y.rho1 = rho * std::cos(theta);
  y.rho2 = rho * std::sin(theta);
  return from_eigen_coords(basis, eq, y);
}

PhaseState state_on_q1_plane(const ModelParams& p, double q1_plane, double q2, double p2, double E) {
  const double eps2 = p.epsilon * p.epsilon;
  const double k1 = E - potential_energy(p, q1_plane, q2) - p2 * p2 / (2 * eps2 * p.mu);
  if (k1 < 0) throw DomainError("state_on_q1_plane: point outside the energy surface");
  // qdot1 = -p1/mu must point toward q1 = 0.
  const double p1 = (q1_plane < 0 ? -1.0 : 1.0) * std::sqrt(2 * p.mu * k1);
  return make_state(q1_plane, p1, q2, p2);
}

}  // namespace mfgrom
