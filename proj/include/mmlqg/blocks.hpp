#pragma once

#include <vector>

#include "mmlqg/params.hpp"
#include "mmlqg/types.hpp"

namespace mmlqg {

// Coefficients of the mean-field evolution
//   dxbar = (Abar xbar + Gbar x0 + Hbar x0hat + Lbar xbarhat
//            + Jbar err_stack + mbar) dt,
// stored as stacked block rows, one n-row band per type.
struct MeanFieldCoefficients {
  Matrix Abar;  // nK x nK
  Matrix Gbar;  // nK x n
  Matrix Hbar;  // nK x n
  Matrix Lbar;  // nK x nK
  Matrix Jbar;  // nK x (3n+2nK)K, block diagonal
  Vector mbar;  // nK

  static MeanFieldCoefficients zero(int n, int K);
  double sup_norm() const;
  double distance(const MeanFieldCoefficients& other) const;
};

enum class SystemRole { Major, Minor, ErrorStack };

// One linear block system
//   dx = (drift x + control u + offset) dt + error_injection err_stack dt
//        + diffusion dW,   dy = observation x dt + (meas noise).
// noise_cols records the widths of the diffusion column blocks so covariance
// integrators can address individual noise channels.
struct ExtendedSystem {
  SystemRole role = SystemRole::Major;
  int type = -1;  // minor type index, -1 otherwise

  Matrix drift;
  Matrix control;
  Vector offset;
  Matrix diffusion;
  Matrix error_injection;
  Matrix observation;
  Matrix meas_noise_cov;
  std::vector<int> noise_cols;

  int dim() const { return static_cast<int>(drift.rows()); }
};

// Closed-loop major dynamics on [x0ex; x0hat_ex] under u0 = -R0^-1 B0ex^T
// (Pi0 x0hat_ex + s0). The diffusion's innovation block holds the filter
// gain K0 when one is supplied; it is zero during consistency iterations,
// where only drift and offset are consumed.
struct ClosedLoopMajor {
  Matrix drift;            // 2(n+nK) square
  Matrix error_injection;  // 2(n+nK) x (3n+2nK)K
  Vector offset;           // 2(n+nK)
  Matrix diffusion;        // 2(n+nK) x (r0 + rK + p0)
};

// Block selectors. e_bar(k) is n x nK with the identity at block k;
// e_tilde(k) the same with (3n+2nK)-sized blocks; ones_tilde stacks K
// identities side by side.
Matrix e_bar(int k, int n, int K);
Matrix e_tilde(int k, int n, int K);
Matrix ones_tilde(int n, int K);

// Cost lifts. h0_pi = [pi_1 H0, ..., pi_K H0]; q0_pi = S0^T Q0 S0 with
// S0 = [I, -h0_pi]; eta0_bar = S0^T Q0 eta0; and the minor versions use
// S = [I, -H1, -h2_pi, 0].
Matrix h0_pi(const GameParameters& params);
Matrix h2_pi(const GameParameters& params);
Matrix q0_pi(const GameParameters& params);
Vector eta0_bar(const GameParameters& params);
Matrix q_pi(const GameParameters& params);
Vector eta_bar(const GameParameters& params);

ExtendedSystem build_major_extended(const GameParameters& params,
                                    const MeanFieldCoefficients& mf);

ClosedLoopMajor build_major_closed_loop(const GameParameters& params,
                                        const MeanFieldCoefficients& mf,
                                        const Matrix& Pi0, const Vector& s0,
                                        const Matrix& K0 = Matrix());

ExtendedSystem build_minor_extended(const GameParameters& params, int k,
                                    const MeanFieldCoefficients& mf,
                                    const ClosedLoopMajor& loop);

/// Stacks the per-type averaged error dynamics: row block k is
// (A_k^ex - K_k L_k^ex) e_tilde_k + J, diffusion is the K-fold stack of the
// minor diffusion. `gains` are the minor filter gains the average runs at.
ExtendedSystem build_error_stack(const GameParameters& params,
                                 const std::vector<ExtendedSystem>& minors,
                                 const std::vector<Matrix>& gains);

}  // namespace mmlqg
