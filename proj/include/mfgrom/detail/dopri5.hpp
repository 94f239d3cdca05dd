#pragma once

// Dormand-Prince 5(4) with the Hairer-Wanner dense output. Header-only because
// it is instantiated both for the 4D flow and the 20D flow + STM system.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>

#include "mfgrom/errors.hpp"

namespace mfgrom::detail {

struct StepControl {
  double rtol = 1e-10;
  double atol = 1e-12;
  double h_init = 0.0;  ///< 0 picks a starting step automatically
  double h_min = 1e-14;
  double h_max = 0.0;   ///< 0 means unbounded
  double fixed_step = 0.0;  ///< > 0 disables adaptivity
  std::size_t max_steps = 5'000'000;
};

/// Continuous extension of one accepted step.
template <int N>
class DenseStep {
 public:
  using Vec = Eigen::Matrix<double, N, 1>;

  double t0 = 0, t1 = 0;

  Vec operator()(double t) const {
    const double th = (t - t0) / (t1 - t0);
    const double th1 = 1.0 - th;
    return r1_ + th * (r2_ + th1 * (r3_ + th * (r4_ + th1 * r5_)));
  }

  template <int M>
  friend class Dopri5;

 private:
  Vec r1_, r2_, r3_, r4_, r5_;
};

template <int N>
class Dopri5 {
 public:
  using Vec = Eigen::Matrix<double, N, 1>;

  /// Integrates y' = rhs(y) from t0 to t1 (either direction).
  ///
  /// `admissible(y)` rejects stage points outside the domain; the step is then
  /// shrunk. `observer(dense, y1, f1)` is called after every accepted step and
  /// returns false to stop early. Returns the final time reached.
  template <class Rhs, class Admissible, class Observer>
  static double run(Rhs&& rhs, Admissible&& admissible, Observer&& observer, double t0, Vec y0,
                    double t1, const StepControl& ctl) {
    const double dir = t1 >= t0 ? 1.0 : -1.0;
    const double span = std::abs(t1 - t0);
    if (span == 0.0) return t0;

    Vec k1 = rhs(y0);
    double h = ctl.fixed_step > 0 ? ctl.fixed_step
               : ctl.h_init > 0   ? ctl.h_init
                                  : initial_step(rhs, y0, k1, ctl, span);
    if (ctl.h_max > 0) h = std::min(h, ctl.h_max);

    double t = t0;
    std::size_t steps = 0;
    double err_prev = 1e-4;
    DenseStep<N> dense;
    Vec k2, k3, k4, k5, k6, k7, y1, ytmp, errv;

    while (dir * (t1 - t) > 0) {
      if (++steps > ctl.max_steps)
        throw IntegrationError(IntegrationError::Kind::StepLimit, t, "step limit exceeded");
      bool last = false;
      if (h >= std::abs(t1 - t) * (1.0 - 1e-12)) {
        h = std::abs(t1 - t);
        last = true;
      }
      const double hs = dir * h;

      bool stage_ok = true;
      auto stage = [&](const Vec& y, Vec& k) {
        if (!stage_ok) return;
        if (!admissible(y) || !y.allFinite()) {
          stage_ok = false;
          return;
        }
        k = rhs(y);
      };
      ytmp = y0 + hs * (a21 * k1);
      stage(ytmp, k2);
      ytmp = y0 + hs * (a31 * k1 + a32 * k2);
      stage(ytmp, k3);
      ytmp = y0 + hs * (a41 * k1 + a42 * k2 + a43 * k3);
      stage(ytmp, k4);
      ytmp = y0 + hs * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4);
      stage(ytmp, k5);
      ytmp = y0 + hs * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5);
      stage(ytmp, k6);
      y1 = y0 + hs * (a71 * k1 + a73 * k3 + a74 * k4 + a75 * k5 + a76 * k6);
      stage(y1, k7);

      if (!stage_ok) {
        if (ctl.fixed_step > 0 || h * 0.25 < ctl.h_min)
          throw IntegrationError(IntegrationError::Kind::Singularity, t,
                                 "trajectory left the admissible domain");
        h *= 0.25;
        continue;
      }

      double err = 0.0;
      if (ctl.fixed_step <= 0) {
        errv = hs * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);
        for (int i = 0; i < y0.size(); ++i) {
          const double sc = ctl.atol + ctl.rtol * std::max(std::abs(y0[i]), std::abs(y1[i]));
          const double r = errv[i] / sc;
          err += r * r;
        }
        err = std::sqrt(err / double(y0.size()));
        if (!std::isfinite(err)) err = 1e10;
      }

      if (err > 1.0) {
        const double fac = std::max(0.2, 0.9 * std::pow(err, -0.2));
        h *= fac;
        if (h < ctl.h_min)
          throw IntegrationError(IntegrationError::Kind::StepUnderflow, t, "step size underflow");
        continue;
      }

      const double t_new = last ? t1 : t + hs;
      dense.t0 = t;
      dense.t1 = t_new;
      dense.r1_ = y0;
      const Vec ydiff = y1 - y0;
      const Vec bspl = hs * k1 - ydiff;
      dense.r2_ = ydiff;
      dense.r3_ = bspl;
      dense.r4_ = ydiff - hs * k7 - bspl;
      dense.r5_ = hs * (d1 * k1 + d3 * k3 + d4 * k4 + d5 * k5 + d6 * k6 + d7 * k7);

      t = t_new;
      y0 = y1;
      k1 = k7;
      if (!observer(dense, y0, k1)) return t;

      if (ctl.fixed_step <= 0) {
        // PI controller (Gustafsson), exponents as in Hairer's DOPRI5.
        const double e = std::max(err, 1e-10);
        double fac = 0.9 * std::pow(e, -0.17) * std::pow(err_prev, 0.04);
        fac = std::clamp(fac, 0.2, 10.0);
        err_prev = std::max(err, 1e-4);
        h *= fac;
        if (ctl.h_max > 0) h = std::min(h, ctl.h_max);
      }
    }
    return t;
  }

 private:
  template <class Rhs>
  static double initial_step(Rhs& rhs, const Vec& y0, const Vec& f0, const StepControl& ctl,
                             double span) {
    const Vec sc = (ctl.atol + ctl.rtol * y0.array().abs()).matrix();
    const double d0 = (y0.array() / sc.array()).matrix().norm() / std::sqrt(double(y0.size()));
    const double d1n = (f0.array() / sc.array()).matrix().norm() / std::sqrt(double(y0.size()));
    double h0 = (d0 < 1e-5 || d1n < 1e-5) ? 1e-6 : 0.01 * d0 / d1n;
    h0 = std::min(h0, span);
    const Vec y1 = y0 + h0 * f0;
    const Vec f1 = rhs(y1);
    const double d2 = ((f1 - f0).array() / sc.array()).matrix().norm() /
                      std::sqrt(double(y0.size())) / h0;
    const double m = std::max(d1n, d2);
    const double h1 = m <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / m, 0.2);
    return std::min({100 * h0, h1, span});
  }

  static constexpr double a21 = 1.0 / 5;
  static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
  static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
  static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                          a54 = -212.0 / 729;
  static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                          a64 = 49.0 / 176, a65 = -5103.0 / 18656;
  static constexpr double a71 = 35.0 / 384, a73 = 500.0 / 1113, a74 = 125.0 / 192,
                          a75 = -2187.0 / 6784, a76 = 11.0 / 84;
  static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920,
                          e5 = -17253.0 / 339200, e6 = 22.0 / 525, e7 = -1.0 / 40;
  static constexpr double d1 = -12715105075.0 / 11282082432.0, d3 = 87487479700.0 / 32700410799.0,
                          d4 = -10690763975.0 / 1880347072.0, d5 = 701980252875.0 / 199316789632.0,
                          d6 = -1453857185.0 / 822651844.0, d7 = 69997945.0 / 29380423.0;
};

}  // namespace mfgrom::detail
