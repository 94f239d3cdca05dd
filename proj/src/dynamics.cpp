#include "mfgrom/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>

#include "mfgrom/detail/dopri5.hpp"

namespace mfgrom {

namespace {

using Dp4 = detail::Dopri5<4>;
using Dp20 = detail::Dopri5<20>;
using Vec20 = Eigen::Matrix<double, 20, 1>;

constexpr double kEventTol = 1e-10;

detail::StepControl control(const IntegrateOptions& o) {
  detail::StepControl c;
  c.rtol = o.rtol;
  c.atol = o.atol;
  c.fixed_step = o.fixed_step;
  c.h_max = o.h_max;
  c.max_steps = o.max_steps;
  return c;
}

int sgn(double v) { return (v > 0) - (v < 0); }

// Output sampler shared by the 4D and 20D integrations. `emit(t, y)` is called
// for each recorded time in integration order.
template <int N, class Emit>
struct Sampler {
  double t0, t1, dt;
  double dir;
  long next = 1;
  Emit emit;

  bool operator()(const detail::DenseStep<N>& d, const Eigen::Matrix<double, N, 1>& y1) {
    if (dt <= 0) {
      emit(d.t1, y1);
      return true;
    }
    for (;;) {
      const double tk = t0 + dir * double(next) * dt;
      if (dir * (tk - d.t1) > 0 || dir * (t1 - tk) <= 1e-12 * std::max(1.0, std::abs(t1))) break;
      emit(tk, d(tk));
      ++next;
    }
    if (d.t1 == t1) emit(t1, y1);
    return true;
  }
};

Vec20 stm_rhs(const ModelParams& p, const Vec20& y) {
  const PhaseState x = y.head<4>();
  const Matrix4 phi = Eigen::Map<const Matrix4>(y.data() + 4);
  Vec20 out;
  out.head<4>() = vector_field(p, x);
  Eigen::Map<Matrix4>(out.data() + 4) = state_jacobian(p, x) * phi;
  return out;
}

PhaseState hermite(double t, double ta, double tb, const PhaseState& xa, const PhaseState& xb,
                   const PhaseState& fa, const PhaseState& fb) {
  const double h = tb - ta;
  const double s = (t - ta) / h;
  const double s2 = s * s, s3 = s2 * s;
  return (2 * s3 - 3 * s2 + 1) * xa + (s3 - 2 * s2 + s) * h * fa + (-2 * s3 + 3 * s2) * xb +
         (s3 - s2) * h * fb;
}

IntegrateOptions polish_options(const IntegrateOptions& o) {
  IntegrateOptions t = o;
  t.rtol = 1e-13;
  t.atol = 1e-15;
  t.sample_dt = 0;
  t.fixed_step = 0;
  t.h_max = 0;
  return t;
}

// Locates a root of the section coordinate between ta and tb on the
// interpolant, then Newton-polishes it on the true flow from the anchor point.
template <class Interp>
SectionEvent refine_event(const ModelParams& p, const Section& sec, double ta, double tb,
                          double t_anchor, const PhaseState& x_anchor, const Interp& interp,
                          int dir_sign, const IntegrateOptions& o) {
  const int c = sec.coord;
  auto g = [&](double t) { return interp(t)[c] - sec.level; };
  double lo = ta, hi = tb;
  double glo = g(lo);
  for (int it = 0; it < 200 && std::abs(hi - lo) > 1e-12 * std::max(1.0, std::abs(hi)); ++it) {
    const double mid = 0.5 * (lo + hi);
    const double gm = g(mid);
    if (gm == 0) {
      lo = hi = mid;
      break;
    }
    if (sgn(gm) == sgn(glo)) {
      lo = mid;
      glo = gm;
    } else {
      hi = mid;
    }
  }
  double ts = 0.5 * (lo + hi);
  PhaseState xs = interp(ts);

  const IntegrateOptions po = polish_options(o);
  try {
    PhaseState best = xs;
    double best_t = ts;
    double best_g = std::abs(xs[c] - sec.level);
    for (int it = 0; it < 12; ++it) {
      const PhaseState x = ts == t_anchor ? x_anchor : flow(p, x_anchor, ts - t_anchor, po);
      const double gv = x[c] - sec.level;
      if (std::abs(gv) < best_g || it == 0) {
        best = x;
        best_t = ts;
        best_g = std::abs(gv);
      }
      if (std::abs(gv) < 1e-13) break;
      const double rate = vector_field(p, x)[c];
      if (rate == 0) break;
      const double step = -gv / rate;
      if (std::abs(step) > std::abs(tb - ta) + 1e-9) break;
      ts += step;
    }
    xs = best;
    ts = best_t;
  } catch (const std::exception&) {
    // Keep the interpolated estimate if the polishing flow fails.
  }

  SectionEvent ev;
  ev.time = ts;
  ev.state = xs;
  ev.section = sec;
  ev.direction = dir_sign;
  return ev;
}

}  // namespace

double Trajectory::max_energy_drift(const ModelParams& p) const {
  double worst = 0.0;
  const double scale = std::max(1.0, std::abs(energy0));
  for (const auto& x : states) worst = std::max(worst, std::abs(energy(p, x) - energy0) / scale);
  return worst;
}

Trajectory integrate(const ModelParams& p, const PhaseState& x0, double t0, double t1,
                     const IntegrateOptions& opts) {
  detail::require_positive_q2(x0[kQ2]);
  Trajectory tr;
  tr.energy0 = energy(p, x0);
  tr.times.push_back(t0);
  tr.states.push_back(x0);
  tr.rates.push_back(vector_field(p, x0));
  if (t1 == t0) return tr;

  auto rhs = [&](const PhaseState& x) { return vector_field(p, x); };
  auto ok = [&](const PhaseState& x) { return x[kQ2] > opts.q2_floor; };
  auto emit = [&](double t, const PhaseState& x) {
    tr.times.push_back(t);
    tr.states.push_back(x);
    tr.rates.push_back(vector_field(p, x));
  };
  Sampler<4, decltype(emit)> sampler{t0, t1, opts.sample_dt, t1 >= t0 ? 1.0 : -1.0, 1, emit};
  Dp4::run(rhs, ok,
           [&](const detail::DenseStep<4>& d, const PhaseState& y, const PhaseState&) {
             return sampler(d, y);
           },
           t0, x0, t1, control(opts));
  if (t1 < t0) {
    std::reverse(tr.times.begin(), tr.times.end());
    std::reverse(tr.states.begin(), tr.states.end());
    std::reverse(tr.rates.begin(), tr.rates.end());
  }
  return tr;
}

PhaseState flow(const ModelParams& p, const PhaseState& x0, double t, const IntegrateOptions& opts) {
  detail::require_positive_q2(x0[kQ2]);
  PhaseState out = x0;
  auto rhs = [&](const PhaseState& x) { return vector_field(p, x); };
  auto ok = [&](const PhaseState& x) { return x[kQ2] > opts.q2_floor; };
  Dp4::run(rhs, ok,
           [&](const detail::DenseStep<4>&, const PhaseState& y, const PhaseState&) {
             out = y;
             return true;
           },
           0.0, x0, t, control(opts));
  return out;
}

StmTrajectory integrate_with_stm(const ModelParams& p, const PhaseState& x0, double t0, double t1,
                                 const IntegrateOptions& opts) {
  detail::require_positive_q2(x0[kQ2]);
  StmTrajectory out;
  Trajectory& tr = out.trajectory;
  tr.energy0 = energy(p, x0);

  Vec20 y0;
  y0.head<4>() = x0;
  Eigen::Map<Matrix4>(y0.data() + 4).setIdentity();

  auto emit = [&](double t, const Vec20& y) {
    const PhaseState x = y.head<4>();
    tr.times.push_back(t);
    tr.states.push_back(x);
    tr.rates.push_back(vector_field(p, x));
    out.stms.push_back(Eigen::Map<const Matrix4>(y.data() + 4));
  };
  emit(t0, y0);
  if (t1 == t0) return out;

  auto rhs = [&](const Vec20& y) { return stm_rhs(p, y); };
  auto ok = [&](const Vec20& y) { return y[kQ2] > opts.q2_floor; };
  Sampler<20, decltype(emit)> sampler{t0, t1, opts.sample_dt, t1 >= t0 ? 1.0 : -1.0, 1, emit};
  Dp20::run(rhs, ok,
            [&](const detail::DenseStep<20>& d, const Vec20& y, const Vec20&) {
              return sampler(d, y);
            },
            t0, y0, t1, control(opts));
  if (t1 < t0) {
    std::reverse(tr.times.begin(), tr.times.end());
    std::reverse(tr.states.begin(), tr.states.end());
    std::reverse(tr.rates.begin(), tr.rates.end());
    std::reverse(out.stms.begin(), out.stms.end());
  }
  return out;
}

std::pair<PhaseState, Matrix4> flow_with_stm(const ModelParams& p, const PhaseState& x0, double t,
                                             const IntegrateOptions& opts) {
  detail::require_positive_q2(x0[kQ2]);
  Vec20 y0;
  y0.head<4>() = x0;
  Eigen::Map<Matrix4>(y0.data() + 4).setIdentity();
  Vec20 last = y0;
  auto rhs = [&](const Vec20& y) { return stm_rhs(p, y); };
  auto ok = [&](const Vec20& y) { return y[kQ2] > opts.q2_floor; };
  Dp20::run(rhs, ok,
            [&](const detail::DenseStep<20>&, const Vec20& y, const Vec20&) {
              last = y;
              return true;
            },
            0.0, y0, t, control(opts));
  return {last.head<4>(), Eigen::Map<const Matrix4>(last.data() + 4)};
}

std::optional<SectionEvent> integrate_to_section(const ModelParams& p, const PhaseState& x0,
                                                 double t_max, const Section& section,
                                                 int direction, int count,
                                                 const IntegrateOptions& opts, Trajectory* record) {
  detail::require_positive_q2(x0[kQ2]);
  const int c = section.coord;
  int s_prev = sgn(x0[c] - section.level);
  if (std::abs(x0[c] - section.level) <= kEventTol) s_prev = 0;
  int seen = 0;
  std::optional<SectionEvent> hit;

  if (record) {
    *record = Trajectory{};
    record->energy0 = energy(p, x0);
    record->times.push_back(0.0);
    record->states.push_back(x0);
    record->rates.push_back(vector_field(p, x0));
  }

  auto rhs = [&](const PhaseState& x) { return vector_field(p, x); };
  auto ok = [&](const PhaseState& x) { return x[kQ2] > opts.q2_floor; };
  auto observer = [&](const detail::DenseStep<4>& d, const PhaseState& y1, const PhaseState&) {
    // Sub-sample the step so a double crossing inside one step is not missed.
    constexpr int kSub = 4;
    double ta = d.t0;
    const PhaseState x_step0 = d(d.t0);
    for (int j = 1; j <= kSub; ++j) {
      const double tb = j == kSub ? d.t1 : d.t0 + (d.t1 - d.t0) * j / kSub;
      const PhaseState xb = j == kSub ? y1 : d(tb);
      const int sb = sgn(xb[c] - section.level);
      if (sb != 0 && s_prev != 0 && sb != s_prev) {
        if (direction == 0 || direction == sb) {
          if (++seen == count) {
            hit = refine_event(p, section, ta, tb, d.t0, x_step0, d, sb, opts);
            break;
          }
        }
      }
      if (sb != 0) s_prev = sb;
      ta = tb;
    }
    if (record) {
      record->times.push_back(d.t1);
      record->states.push_back(y1);
      record->rates.push_back(vector_field(p, y1));
    }
    return !hit.has_value();
  };
  Dp4::run(rhs, ok, observer, 0.0, x0, t_max, control(opts));
  if (hit && record) {
    while (!record->times.empty() && record->times.back() > hit->time) {
      record->times.pop_back();
      record->states.pop_back();
      record->rates.pop_back();
    }
    record->times.push_back(hit->time);
    record->states.push_back(hit->state);
    record->rates.push_back(vector_field(p, hit->state));
  }
  return hit;
}

Trajectory integrate_until(const ModelParams& p, const PhaseState& x0, double t_max,
                           const std::function<bool(double, const PhaseState&)>& stop,
                           const IntegrateOptions& opts) {
  detail::require_positive_q2(x0[kQ2]);
  Trajectory tr;
  tr.energy0 = energy(p, x0);
  tr.times.push_back(0.0);
  tr.states.push_back(x0);
  tr.rates.push_back(vector_field(p, x0));
  auto rhs = [&](const PhaseState& x) { return vector_field(p, x); };
  auto ok = [&](const PhaseState& x) { return x[kQ2] > opts.q2_floor; };
  Dp4::run(rhs, ok,
           [&](const detail::DenseStep<4>& d, const PhaseState& y, const PhaseState& f) {
             tr.times.push_back(d.t1);
             tr.states.push_back(y);
             tr.rates.push_back(f);
             return !stop(d.t1, y);
           },
           0.0, x0, t_max, control(opts));
  return tr;
}

std::vector<SectionEvent> find_section_crossings(const ModelParams& p, const Trajectory& traj,
                                                 const Section& section) {
  std::vector<SectionEvent> events;
  const std::size_t n = traj.size();
  if (n < 2) return events;
  const int c = section.coord;
  IntegrateOptions opts;

  auto value = [&](std::size_t k) { return traj.states[k][c] - section.level; };
  auto sign_at = [&](std::size_t k) {
    const double v = value(k);
    // Values at round-off level (e.g. an equilibrium on the section) never count.
    if (std::abs(v) <= kEventTol) return 0;
    return sgn(v);
  };

  int s_prev = sign_at(0);
  for (std::size_t k = 1; k < n; ++k) {
    const int sk = sign_at(k);
    const double ta = traj.times[k - 1], tb = traj.times[k];
    const PhaseState &xa = traj.states[k - 1], &xb = traj.states[k];
    const PhaseState &fa = traj.rates[k - 1], &fb = traj.rates[k];
    auto interp = [&](double t) { return hermite(t, ta, tb, xa, xb, fa, fb); };

    if (sk == 0) {
      if (k + 1 == n && s_prev != 0) {
        SectionEvent ev;
        ev.time = tb;
        ev.state = xb;
        ev.section = section;
        ev.direction = -s_prev;
        events.push_back(ev);
      }
      continue;
    }

    // Sub-sample the Hermite interpolant to catch double crossings.
    constexpr int kSub = 8;
    std::vector<std::pair<double, double>> brackets;
    int s_run = sign_at(k - 1) != 0 ? sign_at(k - 1) : s_prev;
    double t_run = ta;
    for (int j = 1; j <= kSub; ++j) {
      const double tj = j == kSub ? tb : ta + (tb - ta) * j / kSub;
      const double vj = interp(tj)[c] - section.level;
      const int sj = j == kSub ? sk : (std::abs(vj) <= kEventTol ? 0 : sgn(vj));
      if (sj != 0 && s_run != 0 && sj != s_run) brackets.emplace_back(t_run, tj);
      if (sj != 0) s_run = sj;
      t_run = tj;
    }
    const bool grazing = brackets.size() >= 2;
    int s_dir = sign_at(k - 1) != 0 ? sign_at(k - 1) : s_prev;
    for (const auto& [lo, hi] : brackets) {
      s_dir = -s_dir;
      SectionEvent ev = refine_event(p, section, lo, hi, ta, xa, interp, s_dir, opts);
      ev.grazing = grazing;
      events.push_back(ev);
    }
    s_prev = sk;
  }
  std::sort(events.begin(), events.end(),
            [](const SectionEvent& a, const SectionEvent& b) { return a.time < b.time; });
  return events;
}

Trajectory make_trajectory(const ModelParams& p, std::vector<double> times,
                           std::vector<PhaseState> states) {
  Trajectory tr;
  tr.times = std::move(times);
  tr.states = std::move(states);
  tr.rates.reserve(tr.states.size());
  for (const auto& x : tr.states) tr.rates.push_back(vector_field(p, x));
  tr.energy0 = tr.states.empty() ? 0.0 : energy(p, tr.states.front());
  return tr;
}

void write_trajectory_csv(std::ostream& os, const ModelParams& p, const Trajectory& traj) {
  os << "t,q1,p1,q2,p2,E\n";
  os << std::setprecision(17);
  for (std::size_t k = 0; k < traj.size(); ++k) {
    const auto& x = traj.states[k];
    os << traj.times[k] << ',' << x[kQ1] << ',' << x[kP1] << ',' << x[kQ2] << ',' << x[kP2] << ','
       << energy(p, x) << '\n';
  }
}

}  // namespace mfgrom
