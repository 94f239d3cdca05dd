#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mfgrom/dynamics.hpp"
#include "mfgrom/orbits.hpp"
#include "mfgrom/spectral.hpp"

namespace mfgrom {

/// Prescribed mean and scaled deviation at t = 0 and t = T.
struct BoundaryConditions {
  double q1_0 = -10, q2_0 = 4.5;
  double q1_T = 10, q2_T = 4.5;

  void validate() const;
  static BoundaryConditions planning_default() { return {}; }
};

struct Phases {
  double t_a = 0;      ///< approach time before first entering the window
  double tau_erg = 0;  ///< time between first entry and last exit
  double t_d = 0;      ///< departure time after the last exit
  bool defined = false;
};

struct BvpSolution {
  double T = 0;
  std::vector<double> mesh;  ///< node times on [0, T]
  std::vector<PhaseState> states;
  double energy = 0;    ///< E at t = 0
  double residual = 0;  ///< max per-interval defect against the exact flow
  double bc_residual = 0;
  int rotations = -1;   ///< p2 = 0 crossings in the ergodic window, -1 if not counted
  Phases phases;
  int newton_iterations = 0;

  std::size_t size() const { return mesh.size(); }
  Trajectory as_trajectory(const ModelParams& p) const;
  /// max_t |E(t) - E(0)| / max(1, |E(0)|) over the mesh.
  double energy_variation(const ModelParams& p) const;
};

/// Thrown when Newton fails; carries the last iterate.
class BvpConvergenceError : public ConvergenceError {
 public:
  BvpConvergenceError(const std::string& what, BvpSolution last)
      : ConvergenceError(what), last_(std::move(last)) {}
  const BvpSolution& last_iterate() const { return last_; }

 private:
  BvpSolution last_;
};

struct BvpOptions {
  double tol = 1e-8;          ///< target max defect
  double energy_tol = 1e-6;   ///< max |E(t) - E(0)| / max(1, |E(0)|) over the mesh
  double newton_tol = 1e-10;  ///< scaled residual for Newton convergence
  int max_newton = 60;
  int max_refinements = 8;
  std::size_t max_nodes = 20000;
  double q2_floor = 1e-6;
};

/// Straight line between the boundary values, momenta from the implied velocities.
BvpSolution straight_line_guess(const ModelParams& p, const BoundaryConditions& bc, double T,
                                int nodes = 201);

/// Resamples any trajectory onto `nodes` uniform nodes and rescales it to [0, T].
BvpSolution guess_from_trajectory(const Trajectory& traj, double T, int nodes = 401);

/// Solves the two-point problem with 3-stage Lobatto (Hermite-Simpson)
/// collocation, damped Newton and defect-driven mesh refinement. The guess's
/// mesh is rescaled to [0, T] if its horizon differs.
BvpSolution solve_bvp(const ModelParams& p, const BoundaryConditions& bc, double T,
                      const BvpSolution& guess, const BvpOptions& opts = {});

/// Max defect |phi_h(y_i) - y_{i+1}| over mesh intervals (scaled).
double collocation_defect(const ModelParams& p, const BvpSolution& sol);

/// Halves every mesh interval of a converged solution and re-solves.
BvpSolution refine_uniformly(const ModelParams& p, const BoundaryConditions& bc,
                             const BvpSolution& sol, const BvpOptions& opts = {});

/// p2 = 0 crossings with |q1| <= q1_window. A tangential touch (two
/// crossings inside one step) counts once; `tangential` receives how many
/// were merged so callers can warn.
int rotation_count(const ModelParams& p, const BvpSolution& sol, const Equilibrium& eq,
                   double q1_window = 0.5, int* tangential = nullptr);

/// Same count on an arbitrary sampled phase trajectory.
int rotation_count(const ModelParams& p, const Trajectory& traj, const Equilibrium& eq,
                   double q1_window = 0.5, int* tangential = nullptr);

Phases phase_decomposition(const BvpSolution& sol, const Equilibrium& eq, double q1_window = 0.5);

struct ContinuationOptions {
  double T_end = 10;
  double dT0 = 0.1;
  double dT_min = 1e-4;
  double dT_max = 0.5;
  int max_points = 2000;
  bool arclength_fallback = true;
  double q1_window = 0.5;
  BvpOptions bvp;
};

enum class BranchStatus { ReachedEnd, Terminated, MaxPoints };

const char* to_string(BranchStatus s);

struct BranchPoint {
  double T = 0;
  double E = 0;
  int rotations = -1;
  bool arclength = false;
};

struct Branch {
  std::string label;
  std::vector<BranchPoint> points;
  std::vector<BvpSolution> solutions;
  int topology = -1;  ///< shared rotation count, -1 if members disagree
  BranchStatus status = BranchStatus::ReachedEnd;
  std::string note;
};

/// Natural-parameter continuation in T from a converged seed, switching to
/// pseudo-arclength in (solution, T) when the natural step underflows.
Branch continue_branch(const ModelParams& p, const BoundaryConditions& bc, const Equilibrium& eq,
                       const BvpSolution& seed, const ContinuationOptions& opts,
                       const std::string& label = "B");

/// Composite guess for an n-crossing branch: stable-tube strand from the
/// initial q1 plane, `half_periods` half oscillations of the periodic orbit at
/// energy E, unstable-tube strand to the final q1 plane.
std::optional<BvpSolution> tube_seed_guess(const ModelParams& p, const Equilibrium& eq,
                                           const BoundaryConditions& bc, double E,
                                           int half_periods, int nodes = 801);

struct BranchSpec {
  std::string label;
  BvpSolution seed;
  ContinuationOptions options;
};

struct DiagramRow {
  std::string branch;
  double T = 0;
  double E = 0;
  int n = -1;
};

struct Diagram {
  std::vector<Branch> branches;
  std::vector<DiagramRow> rows;  ///< sorted by branch label, then T

  /// All branch solutions whose T-range covers T (E interpolated linearly).
  std::vector<DiagramRow> solutions_at(double T) const;
};

/// Continues every BranchSpec (concurrently when workers > 1) and merges the table
/// deterministically.
Diagram bifurcation_diagram(const ModelParams& p, const BoundaryConditions& bc,
                            const Equilibrium& eq, const std::vector<BranchSpec>& specs,
                            int workers = 1);

}  // namespace mfgrom
