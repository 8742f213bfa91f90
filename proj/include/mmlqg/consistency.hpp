#pragma once

#include <optional>
#include <vector>

#include "mmlqg/blocks.hpp"
#include "mmlqg/params.hpp"
#include "mmlqg/types.hpp"

namespace mmlqg {

// Partition of the top two n-row bands of a minor control Riccati solution,
// columns ordered [own, major, mean field, major self-estimate,
// major mean-field estimate] with widths (n, n, nK, n, nK).
struct PiBlocks {
  Matrix P11, P12, P13, P14, P15;  // rows 0..n
  Matrix P21, P22, P23, P24, P25;  // rows n..2n
};

PiBlocks extract_pi_blocks(const Matrix& Pik, int n, int K);

// Closed-form map from the minor Riccati/offset solutions to the mean-field
// coefficients:
//   Abar_k = [A_k - B_k R^-1 B_k^T P11] ebar_k - B_k R^-1 B_k^T P13
//   Gbar_k = G - B_k R^-1 B_k^T P12
//   Hbar_k = -B_k R^-1 B_k^T P14
//   Lbar_k = -B_k R^-1 B_k^T P15
//   Jbar_k = B_k R^-1 B_k^T [top n rows of Pi_k]
//   mbar_k = -B_k R^-1 B_k^T [top n entries of s_k]
MeanFieldCoefficients apply_consistency_map(const GameParameters& params,
                                            const std::vector<Matrix>& Pik,
                                            const std::vector<Vector>& sk);

struct MeanFieldSolution {
  MeanFieldCoefficients coefficients;
  Matrix Pi0;                      // major control Riccati solution
  Vector s0;                       // major offset
  std::vector<Matrix> Pik;         // minor control Riccati, per type
  std::vector<Vector> sk;          // minor offsets, per type
  std::vector<PiBlocks> Pi_blocks;
  int iterations = 0;
  double residual = 0.0;  // sup-norm mismatch of the map output vs the
                          // coefficients it was evaluated at
  bool converged = false;
};

// Damped Picard iteration on the consistency equations. Each sweep solves
// the major Riccati/offset on the current coefficients, assembles the
// closed-loop major, solves the minor Riccati/offset per type, and applies
// the consistency map; coefficients update by (1-damping)*old + damping*new.
// Non-convergence is reported through `converged`, not thrown; iterate
// norms above 1e8 raise DivergenceDetected.
MeanFieldSolution solve_fixed_point(
    const GameParameters& params, double damping = 0.5, double tol = 1e-10,
    int max_iter = 500,
    const std::optional<MeanFieldCoefficients>& init = std::nullopt);

// Completely observed counterpart: every agent sees x0 (and its own state)
// exactly, so the extended states drop all estimate blocks. Used as the
// independent reference for the observation-noise-to-zero reduction.
struct CompleteObservationSolution {
  Matrix Abar;  // nK x nK
  Matrix Gbar;  // nK x n
  Vector mbar;  // nK
  Matrix Pi0;   // (n + nK) square
  Vector s0;
  std::vector<Matrix> Pik;  // (2n + nK) square, per type
  std::vector<Vector> sk;
  int iterations = 0;
  double residual = 0.0;
  bool converged = false;
};

CompleteObservationSolution solve_complete_observation_fixed_point(
    const GameParameters& params, double damping = 0.5, double tol = 1e-10,
    int max_iter = 500);

}  // namespace mmlqg
