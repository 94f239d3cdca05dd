#pragma once

#include <limits>
#include <vector>

#include "mfgrom/dynamics.hpp"
#include "mfgrom/spectral.hpp"

namespace mfgrom {

/// Periodic orbit of the saddle x center family. The orbit lives in the
/// invariant plane q1 = p1 = 0 and oscillates in (q2, p2).
struct PeriodicOrbit {
  double energy = 0;
  PhaseState seed = PhaseState::Zero();  ///< inner turning point (0, 0, q2_0, 0)
  double period = 0;
  Trajectory samples;                    ///< one period starting at the seed
  Matrix4 monodromy = Matrix4::Identity();
  double lambda_u = 1;                   ///< real monodromy eigenvalue with |.| > 1
  Vector4 unstable_dir = Vector4::Zero();  ///< unit eigenvectors at the seed,
  Vector4 stable_dir = Vector4::Zero();    ///< signed so the q1 component is > 0
  double q2_outer = 0;                   ///< outer turning point
  double closure_residual = 0;           ///< |phi_T(seed) - seed|

  double q2_amplitude() const { return 0.5 * (q2_outer - seed[kQ2]); }
};

/// Highest energy for which the family exists: the value of V at the next
/// critical point of V(0, .) above q2_eq, or +inf if there is none.
double orbit_energy_upper_bound(const ModelParams& p, const Equilibrium& eq);

/// Throws OrbitError (NoOrbit when E <= E_eq, ExistenceBound when the outer
/// turning point is missing, HyperbolicityLost when the monodromy has no real
/// pair off the unit circle).
PeriodicOrbit orbit_at_energy(const ModelParams& p, const Equilibrium& eq, double E);

enum class TubeBranch { Stable, Unstable };

const char* to_string(TubeBranch b);

struct TubeOptions {
  int n_strands = 32;
  double d = 0.0;        ///< displacement; 0 picks 1e-5 * q2 amplitude
  double t_int = 20.0;   ///< integration time per strand
  double q1_stop = std::numeric_limits<double>::infinity();  ///< stop at |q1| >= q1_stop
  IntegrateOptions integrate{1e-11, 1e-13};
};

struct TubeStrand {
  Trajectory traj;   ///< times increasing; stable strands run over [-t, 0]
  double tau = 0;    ///< launch phase along the orbit
  bool truncated = false;  ///< integration aborted (e.g. q2 collapse)
  bool reached_stop = false;
  PhaseState stop_state = PhaseState::Zero();  ///< crossing of |q1| = q1_stop, if reached
};

struct TubeManifold {
  TubeBranch branch = TubeBranch::Unstable;
  int side = +1;
  double d = 0;
  double energy = 0;
  std::vector<TubeStrand> strands;
};

/// Globalizes the stable or unstable manifold of `po` from n_strands launch
/// points. side = +1 displaces toward q1 > 0. Stable strands are integrated
/// backward in time.
TubeManifold tube(const ModelParams& p, const PeriodicOrbit& po, TubeBranch branch, int side,
                  const TubeOptions& opts = {});

enum class TransitOutcome { Transited, Bounced, Undecided };

const char* to_string(TransitOutcome o);

/// Integrates until |q1| >= q1_exit while moving outward, or t_max. Transited
/// when the exit side differs from the starting side.
TransitOutcome transit_test_nonlinear(const ModelParams& p, const PhaseState& x, double q1_exit,
                                      double t_max);

/// Same dichotomy measured on the slab |zeta + eta| <= C of the linear region:
/// starts on one face and reports which face is reached first.
TransitOutcome transit_test_region(const ModelParams& p, const Equilibrium& eq,
                                   const EigenBasis& basis, const RegionSpec& region,
                                   const PhaseState& x, double t_max);

/// Point on the bounding sphere zeta + eta = face*C with radius rho and
/// elliptic phase theta, moving into the slab.
PhaseState bounding_sphere_point(const Equilibrium& eq, const EigenBasis& basis,
                                 const RegionSpec& region, int face, double rho, double theta);

/// Phase state on the plane q1 = q1_plane with given (q2, p2) and energy E,
/// with p1 chosen so q1 moves toward 0. Throws DomainError if inaccessible.
PhaseState state_on_q1_plane(const ModelParams& p, double q1_plane, double q2, double p2, double E);

}  // namespace mfgrom
