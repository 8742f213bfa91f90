#pragma once

#include <utility>
#include <vector>

#include "mmlqg/blocks.hpp"
#include "mmlqg/params.hpp"
#include "mmlqg/types.hpp"

namespace mmlqg {

// Spectral-structure tests (PBH rank conditions evaluated at eigenvalues).
double spectral_abscissa(const Matrix& A);
bool is_hurwitz(const Matrix& A);
bool is_stabilizable(const Matrix& A, const Matrix& B, double rank_tol = 1e-8);
bool is_detectable(const Matrix& L, const Matrix& A, double rank_tol = 1e-8);
// PBH at every eigenvalue (controllability of (A, B)).
bool is_controllable(const Matrix& A, const Matrix& B, double rank_tol = 1e-8);

// Symmetric-PSD pseudoinverse (eigendecomposition with relative cutoff).
Matrix pinv_psd(const Matrix& S);

struct CareSolution {
  Matrix Pi;
  double residual_norm = 0.0;  // Frobenius norm of the discounted CARE residual
  int iterations = 0;          // Newton refinement steps taken
  bool stabilizing = false;
};

struct CareOptions {
  double tol = 1e-12;      // relative to max(1, ||Q||_F)
  int max_newton = 50;
  int max_sign_iter = 200;
};

// Stabilizing solution of
//   rho Pi = Pi A + A^T Pi - Pi B R^-1 B^T Pi + Q,
// i.e. the standard CARE for the shifted drift A - (rho/2) I. The stable
// invariant subspace of the shifted Hamiltonian (matrix sign iteration)
// seeds a Kleinman-Newton refinement; each Newton step is a Schur-based
// Lyapunov solve.
CareSolution solve_discounted_care(const Matrix& A, const Matrix& B,
                                   const Matrix& Q, const Matrix& R,
                                   double rho, const CareOptions& opts = {});

// Solves A X + X A^T + C = 0 (C symmetric) by complex Schur reduction and
// back-substitution. SingularSystem if the spectra of A and -A^T intersect.
Matrix solve_lyapunov(const Matrix& A, const Matrix& C);

// Stationary offset: (rho I - Acl^T) s = Pi M - eta_bar, where Acl is the
// closed-loop drift A - B R^-1 B^T Pi supplied by the caller. SingularSystem
// if the condition number exceeds 1e12.
Vector solve_offset(const Matrix& closed_loop_drift, const Matrix& Pi,
                    const Vector& M, const Vector& eta_bar, double rho);

// Stationary filter covariance: A V + V A^T - V L^T Rv^-1 L V + Qw = 0,
// computed as the dual CARE for (A^T, L^T).
Matrix solve_filter_care(const Matrix& A, const Matrix& L, const Matrix& Qw,
                         const Matrix& Rv);

// K = V L^T Rv^-1, with a pseudoinverse fallback so the noiseless edge case
// (Rv = 0, V = 0) yields a zero gain instead of a failure.
Matrix filter_gain(const Matrix& V, const Matrix& L, const Matrix& Rv);

// Covariance matrices on the uniform grid t_i = i dt. `gains` carries the
// pointwise filter gain V L^T Rv^-1 where an observation map applies.
// `channel_cov` is filled on the averaged-error trajectory with the major
// innovation covariance L0 V0(t) L0^T + Rv0, which downstream Riccati
// integrations use to weight the innovation noise channel.
struct CovarianceTrajectory {
  double dt = 0.0;
  std::vector<Matrix> values;
  std::vector<Matrix> gains;
  std::vector<Matrix> channel_cov;

  int steps() const { return static_cast<int>(values.size()) - 1; }
  // Grid lookup; StaleGain if t is off the grid by more than dt/2.
  int index_at(double t) const;
  const Matrix& value_at(double t) const;
  const Matrix& gain_at(double t) const;
};

// Jointly integrates the major filter covariance V0 and the averaged-error
// covariance Vbar with a fixed-step RK4 scheme, re-symmetrizing after every
// step:
//   dV0/dt   = A0 V0 + V0 A0^T - V0 L0^T Rv0^-1 L0 V0 + J0 Vbar J0^T + Qw0
//   dVbar/dt = At Vbar + Vbar At^T
//              + Dt diag(0_r, I_r0, 0_rK, L0 V0 L0^T + Rv0) Dt^T
// with A0, L0, Rv0, J0, Qw0 = D0 D0^T taken from `major_sys` and At, Dt from
// `error_sys` (noise column blocks sized by its noise_cols).
std::pair<CovarianceTrajectory, CovarianceTrajectory>
integrate_coupled_covariances(const ExtendedSystem& major_sys,
                              const ExtendedSystem& error_sys,
                              const Matrix& V0_init, const Matrix& Vbar_init,
                              double dt, double horizon);

// Minor filter covariance driven by a previously computed averaged-error
// trajectory (GridMismatch if the grids disagree):
//   dVk/dt = Ak Vk + Vk Ak^T - Vk Lk^T Rv^-1 Lk Vk + J Vbar(t) J^T
//            + D diag(I_r, I_r0, 0_rK, N(t)) D^T
// where N(t) is the innovation covariance carried by `Vbar_traj`. Half-step
// values use the average of adjacent grid points.
CovarianceTrajectory integrate_minor_filter_riccati(
    const ExtendedSystem& minor_sys, const CovarianceTrajectory& Vbar_traj,
    const Matrix& Vk_init, double dt, double horizon);

// Algebraic steady state of the coupled covariance system, found by fixed
// point on (V0, Vbar, {Vk}): filter CAREs for V0 and each Vk given Vbar,
// then a Lyapunov solve for Vbar given the implied gains. The minor systems
// and the error stack are rebuilt every sweep because their diffusions embed
// the running K0.
struct StationaryCovariances {
  Matrix V0;
  Matrix Vbar;
  std::vector<Matrix> Vk;
  Matrix K0;
  std::vector<Matrix> Kk;
  Matrix innovation_cov;  // L0 V0 L0^T + Rv0 at the fixed point
  std::vector<ExtendedSystem> minor_systems;
  ExtendedSystem error_system;
  ClosedLoopMajor major_loop;
  int iterations = 0;
  double residual = 0.0;
};

StationaryCovariances solve_stationary_covariances(
    const GameParameters& params, const MeanFieldCoefficients& mf,
    const Matrix& Pi0, const Vector& s0, double tol = 1e-12,
    int max_iter = 200);

// Initial covariances implied by estimates initialized at the prior mean:
// own and major states draw N(0, sigma_init^2 I) with a shared x0 sample,
// mean-field coordinates start at their deterministic limit.
Matrix initial_major_covariance(const GameParameters& params);
Matrix initial_minor_covariance(const GameParameters& params);
Matrix initial_error_covariance(const GameParameters& params);

}  // namespace mmlqg
