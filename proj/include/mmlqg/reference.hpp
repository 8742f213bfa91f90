#pragma once

#include <cstdint>

#include "mmlqg/params.hpp"

namespace mmlqg {

// Built-in reference scenario: one minor type (n = 2, m = 1), lightly damped
// oscillator minors tracking a stable major, isotropic small noise, discount
// rho = 0.9. Used by the reproduce-paper subcommand and the test suite.
GameParameters reference_parameters();

// Simulation settings that accompany the reference scenario.
struct ReferenceRun {
  int N = 100;
  double dt = 0.01;
  double T = 25.0;
  std::uint64_t seed = 2024;
};

}  // namespace mmlqg
