#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace mmlqg {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Error taxonomy shared across the library. Everything derives from Error so
// the CLI can map failures onto its exit-code contract in one place.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionMismatch : Error { using Error::Error; };
struct NonStabilizable : Error { using Error::Error; };
struct NotConverged : Error { using Error::Error; };
struct SingularSystem : Error { using Error::Error; };
struct NonPsdDrift : Error { using Error::Error; };
struct StepTooLarge : Error { using Error::Error; };
struct GridMismatch : Error { using Error::Error; };
struct StaleGain : Error { using Error::Error; };
struct DivergenceDetected : Error { using Error::Error; };
struct NumericalBlowup : Error { using Error::Error; };
struct IncompleteTrajectory : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct AssumptionError : Error { using Error::Error; };

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw DimensionMismatch(msg);
}

}  // namespace mmlqg
