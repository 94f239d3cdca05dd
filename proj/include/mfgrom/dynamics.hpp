#pragma once

#include <Eigen/Dense>

#include <functional>
#include <iosfwd>
#include <optional>
#include <vector>

#include "mfgrom/model.hpp"

namespace mfgrom {

struct IntegrateOptions {
  double rtol = 1e-12;
  double atol = 1e-13;
  /// > 0: record on the uniform grid t0 + k*sample_dt (plus t1) instead of at
  /// every accepted step.
  double sample_dt = 0.0;
  /// > 0: constant-step integration (reproducible golden files).
  double fixed_step = 0.0;
  double h_max = 0.0;
  double q2_floor = 1e-6;
  std::size_t max_steps = 5'000'000;
};

/// Sampled solution of the flow. Times are strictly increasing; a backward
/// integration is stored reversed, so its initial state is `states.back()`.
struct Trajectory {
  std::vector<double> times;
  std::vector<PhaseState> states;
  std::vector<PhaseState> rates;  ///< vector field at each sample, for Hermite interpolation
  double energy0 = 0.0;

  std::size_t size() const { return times.size(); }
  bool empty() const { return times.empty(); }

  /// Largest |E(x_k) - energy0| / max(1, |energy0|).
  double max_energy_drift(const ModelParams& p) const;
};

struct StmTrajectory {
  Trajectory trajectory;
  std::vector<Matrix4> stms;  ///< Phi(t_k, t_start)
};

struct Section {
  Coord coord = kP2;
  double level = 0.0;

  static Section p2_zero() { return {kP2, 0.0}; }
  static Section q1_zero() { return {kQ1, 0.0}; }
  static Section q1_at(double level) { return {kQ1, level}; }
};

struct SectionEvent {
  double time = 0.0;
  PhaseState state = PhaseState::Zero();
  Section section;
  int direction = 0;     ///< +1 when the coordinate increases through the level
  bool grazing = false;  ///< part of a near-tangential double crossing
};

/// Integrates the flow from t0 to t1 (t1 < t0 integrates backward).
/// Throws IntegrationError on q2 collapse (Kind::Singularity) or step underflow.
Trajectory integrate(const ModelParams& p, const PhaseState& x0, double t0, double t1,
                     const IntegrateOptions& opts = {});

/// Final state of the flow map phi_t(x0); nothing is stored.
PhaseState flow(const ModelParams& p, const PhaseState& x0, double t,
                const IntegrateOptions& opts = {});

/// Flow together with the state-transition matrix from the variational equations.
StmTrajectory integrate_with_stm(const ModelParams& p, const PhaseState& x0, double t0, double t1,
                                 const IntegrateOptions& opts = {});

/// Final state and Phi(t, 0) only.
std::pair<PhaseState, Matrix4> flow_with_stm(const ModelParams& p, const PhaseState& x0, double t,
                                             const IntegrateOptions& opts = {});

/// Integrates forward from x0 until the `count`-th crossing of `section` in the
/// given direction (0 = either), or until t_max. The crossing is polished so
/// the section coordinate is below 1e-10 in magnitude.
std::optional<SectionEvent> integrate_to_section(const ModelParams& p, const PhaseState& x0,
                                                 double t_max, const Section& section,
                                                 int direction = 0, int count = 1,
                                                 const IntegrateOptions& opts = {},
                                                 Trajectory* record = nullptr);

/// Integrates forward until `stop(t, x)` holds at an accepted step, or t_max.
/// Returns the trajectory up to and including the stopping step.
Trajectory integrate_until(const ModelParams& p, const PhaseState& x0, double t_max,
                           const std::function<bool(double, const PhaseState&)>& stop,
                           const IntegrateOptions& opts = {});

/// All sign changes of the section coordinate along a stored trajectory, each
/// refined on the flow. Samples within 1e-10 of the section count as on it;
/// such a sample yields an event only at the end of the trajectory.
std::vector<SectionEvent> find_section_crossings(const ModelParams& p, const Trajectory& traj,
                                                 const Section& section);

/// Builds a Trajectory from externally produced samples (e.g. a BVP mesh).
Trajectory make_trajectory(const ModelParams& p, std::vector<double> times,
                           std::vector<PhaseState> states);

/// CSV with header t,q1,p1,q2,p2,E and 17 significant digits.
void write_trajectory_csv(std::ostream& os, const ModelParams& p, const Trajectory& traj);

}  // namespace mfgrom
