#pragma once

#include <stdexcept>
#include <string>

namespace mfgrom {

/// Argument outside the model's domain (q2 <= 0, invalid parameters, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Time integration aborted. `time()` is where the integrator stopped.
class IntegrationError : public std::runtime_error {
 public:
  enum class Kind { Singularity, StepUnderflow, StepLimit, NonFinite };

  IntegrationError(Kind kind, double time, const std::string& what)
      : std::runtime_error(what), kind_(kind), time_(time) {}

  Kind kind() const noexcept { return kind_; }
  double time() const noexcept { return time_; }

 private:
  Kind kind_;
  double time_;
};

/// Iterative solver failed to converge.
class ConvergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Periodic-orbit construction failed.
class OrbitError : public std::runtime_error {
 public:
  enum class Kind { NoOrbit, ExistenceBound, HyperbolicityLost };

  OrbitError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace mfgrom
