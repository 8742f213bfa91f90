#include "mmlqg/riccati.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <string>
#include <utility>
#include <vector>

namespace mmlqg {

namespace {

using CMatrix = Eigen::MatrixXcd;
using CVector = Eigen::VectorXcd;

double min_eigenvalue(const Matrix& S) {
  if (S.size() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<Matrix> es(S, Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

void symmetrize(Matrix& S) { S = 0.5 * (S + S.transpose()).eval(); }

// PBH rank test: rank [A - lambda I, B] == n.
bool pbh_full_rank(const Matrix& A, const Matrix& B,
                   const std::complex<double>& lambda, double rank_tol) {
  const int n = static_cast<int>(A.rows());
  CMatrix pencil(n, n + B.cols());
  pencil.leftCols(n) = A.cast<std::complex<double>>();
  pencil.leftCols(n).diagonal().array() -= lambda;
  pencil.rightCols(B.cols()) = B.cast<std::complex<double>>();
  Eigen::ColPivHouseholderQR<CMatrix> qr(pencil);
  qr.setThreshold(rank_tol);
  return qr.rank() == n;
}

// Matrix sign function by the scaled Newton iteration.
Matrix matrix_sign(const Matrix& H, int max_iter) {
  const int dim = static_cast<int>(H.rows());
  Matrix Z = H;
  for (int it = 0; it < max_iter; ++it) {
    Eigen::PartialPivLU<Matrix> lu(Z);
    double log_abs_det = 0.0;
    for (int i = 0; i < dim; ++i) {
      const double d = std::abs(lu.matrixLU()(i, i));
      if (!(d > 0.0) || !std::isfinite(d))
        throw NotConverged(
            "matrix sign iteration hit a singular iterate; the Hamiltonian "
            "appears to have imaginary-axis eigenvalues");
      log_abs_det += std::log(d);
    }
    const double c = std::exp(-log_abs_det / dim);
    const Matrix Znext = 0.5 * (c * Z + (1.0 / c) * lu.inverse());
    const double change = (Znext - Z).norm();
    Z = Znext;
    if (!Z.allFinite())
      throw NotConverged("matrix sign iteration diverged");
    if (change <= 1e-13 * std::max(1.0, Z.norm())) return Z;
  }
  throw NotConverged("matrix sign iteration did not converge");
}

int grid_steps(double dt, double horizon) {
  if (!(dt > 0.0)) throw GridMismatch("grid spacing dt must be positive");
  if (!(horizon >= 0.0)) throw GridMismatch("horizon must be nonnegative");
  const double ratio = horizon / dt;
  const long long steps = std::llround(ratio);
  if (std::abs(ratio - static_cast<double>(steps)) > 1e-6)
    throw GridMismatch("horizon is not an integer multiple of dt");
  return static_cast<int>(steps);
}

void enforce_covariance_invariants(Matrix& V, const char* label) {
  symmetrize(V);
  if (!V.allFinite() || V.norm() > 1e12)
    throw StepTooLarge(std::string(label) +
                       " covariance integration diverged; reduce dt");
  const double mineig = min_eigenvalue(V);
  if (mineig < -1e-6)
    throw NonPsdDrift(std::string(label) + " covariance lost positive "
                      "semidefiniteness (min eigenvalue " +
                      std::to_string(mineig) + ")");
}

void check_initial_covariance(const Matrix& V, const char* label) {
  require(V.rows() == V.cols(), std::string(label) + " must be square");
  if ((V - V.transpose()).norm() > 1e-9 * (1.0 + V.norm()))
    throw NonPsdDrift(std::string(label) + " must be symmetric");
  if (min_eigenvalue(0.5 * (V + V.transpose())) < -1e-9)
    throw NonPsdDrift(std::string(label) + " must be positive semidefinite");
}

struct NoiseSplit {
  Matrix Dwi;   // columns driven by the minor process noise
  Matrix Dw0;   // columns driven by the major process noise
  Matrix Dnu;   // columns driven by the major innovation process
};

// Splits a diffusion with noise column blocks {r, r0, rK, p0}; the rK block
// multiplies an identically zero noise and is dropped.
NoiseSplit split_noise_columns(const ExtendedSystem& sys) {
  require(sys.noise_cols.size() == 4,
          "diffusion must carry the four-block noise layout (r, r0, rK, p0)");
  const int r = sys.noise_cols[0];
  const int r0 = sys.noise_cols[1];
  const int rK = sys.noise_cols[2];
  const int p0 = sys.noise_cols[3];
  require(sys.diffusion.cols() == r + r0 + rK + p0,
          "diffusion columns do not match the declared noise blocks");
  NoiseSplit out;
  out.Dwi = sys.diffusion.leftCols(r);
  out.Dw0 = sys.diffusion.middleCols(r, r0);
  out.Dnu = sys.diffusion.rightCols(p0);
  return out;
}

}  // namespace

double spectral_abscissa(const Matrix& A) {
  require(A.rows() == A.cols(), "spectral_abscissa: matrix must be square");
  if (A.size() == 0) return -std::numeric_limits<double>::infinity();
  Eigen::EigenSolver<Matrix> es(A, false);
  return es.eigenvalues().real().maxCoeff();
}

bool is_hurwitz(const Matrix& A) { return spectral_abscissa(A) < 0.0; }

bool is_stabilizable(const Matrix& A, const Matrix& B, double rank_tol) {
  require(A.rows() == A.cols(), "is_stabilizable: A must be square");
  require(B.rows() == A.rows(), "is_stabilizable: B row count must match A");
  Eigen::EigenSolver<Matrix> es(A, false);
  const CVector lambda = es.eigenvalues();
  for (int i = 0; i < lambda.size(); ++i) {
    if (lambda(i).real() < -1e-10) continue;  // strictly stable modes are free
    if (!pbh_full_rank(A, B, lambda(i), rank_tol)) return false;
  }
  return true;
}

bool is_detectable(const Matrix& L, const Matrix& A, double rank_tol) {
  return is_stabilizable(A.transpose(), L.transpose(), rank_tol);
}

bool is_controllable(const Matrix& A, const Matrix& B, double rank_tol) {
  require(A.rows() == A.cols(), "is_controllable: A must be square");
  require(B.rows() == A.rows(), "is_controllable: B row count must match A");
  Eigen::EigenSolver<Matrix> es(A, false);
  const CVector lambda = es.eigenvalues();
  for (int i = 0; i < lambda.size(); ++i)
    if (!pbh_full_rank(A, B, lambda(i), rank_tol)) return false;
  return true;
}

Matrix pinv_psd(const Matrix& S) {
  require(S.rows() == S.cols(), "pinv_psd: matrix must be square");
  if (S.size() == 0) return S;
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (S + S.transpose()));
  const Vector vals = es.eigenvalues();
  const double cutoff = 1e-12 * std::max(0.0, vals.cwiseAbs().maxCoeff());
  Vector inv = Vector::Zero(vals.size());
  for (int i = 0; i < vals.size(); ++i)
    if (vals(i) > cutoff && vals(i) > 0.0) inv(i) = 1.0 / vals(i);
  return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

Matrix solve_lyapunov(const Matrix& A, const Matrix& C) {
  require(A.rows() == A.cols(), "solve_lyapunov: A must be square");
  require(C.rows() == A.rows() && C.cols() == A.cols(),
          "solve_lyapunov: C dimensions must match A");
  const int n = static_cast<int>(A.rows());
  if (n == 0) return Matrix(0, 0);

  Eigen::ComplexSchur<CMatrix> schur(A.cast<std::complex<double>>());
  if (schur.info() != Eigen::Success)
    throw NotConverged("Schur decomposition failed in Lyapunov solve");
  const CMatrix& T = schur.matrixT();
  const CMatrix& U = schur.matrixU();
  const CMatrix Ct = U.adjoint() * C.cast<std::complex<double>>() * U;
  const double tscale = std::max(1.0, T.norm());

  // Back-substitute columns of T Y + Y T^H + Ct = 0 from last to first:
  // (T + conj(T_jj) I) Y_j = -Ct_j - sum_{k>j} conj(T_jk) Y_k.
  CMatrix Y = CMatrix::Zero(n, n);
  CMatrix Mj(n, n);
  for (int j = n - 1; j >= 0; --j) {
    CVector rhs = -Ct.col(j);
    for (int k = j + 1; k < n; ++k) rhs -= std::conj(T(j, k)) * Y.col(k);
    Mj = T;
    Mj.diagonal().array() += std::conj(T(j, j));
    for (int i = 0; i < n; ++i)
      if (std::abs(Mj(i, i)) <= 1e-12 * tscale)
        throw SingularSystem(
            "Lyapunov equation is singular: the spectra of A and -A^T "
            "intersect");
    Y.col(j) = Mj.triangularView<Eigen::Upper>().solve(rhs);
  }
  Matrix X = (U * Y * U.adjoint()).real();
  symmetrize(X);
  return X;
}

CareSolution solve_discounted_care(const Matrix& A, const Matrix& B,
                                   const Matrix& Q, const Matrix& R,
                                   double rho, const CareOptions& opts) {
  const int n = static_cast<int>(A.rows());
  const int m = static_cast<int>(B.cols());
  require(A.cols() == n && n > 0, "solve_discounted_care: A must be square");
  require(B.rows() == n, "solve_discounted_care: B row count must match A");
  require(Q.rows() == n && Q.cols() == n,
          "solve_discounted_care: Q dimensions must match A");
  require(R.rows() == m && R.cols() == m,
          "solve_discounted_care: R must be square with B's column count");
  require(rho >= 0.0, "solve_discounted_care: rho must be nonnegative");

  const Matrix As = A - 0.5 * rho * Matrix::Identity(n, n);
  Eigen::LLT<Matrix> R_llt(R);
  if (R_llt.info() != Eigen::Success)
    throw SingularSystem("solve_discounted_care: R must be positive definite");

  if (!is_stabilizable(As, B))
    throw NonStabilizable(
        "the shifted pair (A - (rho/2) I, B) is not stabilizable");

  const Matrix G = B * R_llt.solve(B.transpose());  // B R^-1 B^T
  const double scale = std::max(1.0, Q.norm());
  const auto residual_norm = [&](const Matrix& P) {
    return (P * As + As.transpose() * P - P * G * P + Q).norm();
  };

  // Seed: stable invariant subspace of the shifted Hamiltonian.
  Matrix H(2 * n, 2 * n);
  H.topLeftCorner(n, n) = As;
  H.topRightCorner(n, n) = -G;
  H.bottomLeftCorner(n, n) = -Q;
  H.bottomRightCorner(n, n) = -As.transpose();
  const Matrix Z = matrix_sign(H, opts.max_sign_iter);
  Matrix M = Z + Matrix::Identity(2 * n, 2 * n);
  Matrix lhs(2 * n, n);
  lhs.topRows(n) = M.block(0, n, n, n);
  lhs.bottomRows(n) = M.block(n, n, n, n);
  Matrix rhs(2 * n, n);
  rhs.topRows(n) = -M.block(0, 0, n, n);
  rhs.bottomRows(n) = -M.block(n, 0, n, n);
  Matrix Pi = lhs.colPivHouseholderQr().solve(rhs);
  symmetrize(Pi);

  if (!is_hurwitz(As - G * Pi))
    throw NonStabilizable(
        "the invariant-subspace seed is not stabilizing; no stabilizing "
        "solution exists for this problem");

  // Kleinman refinement: monotone quadratic convergence from a stabilizing
  // iterate, each step one Lyapunov solve.
  Matrix best_Pi = Pi;
  double best_res = residual_norm(Pi);
  int best_it = 0;
  int used = 0;
  for (int it = 1; it <= opts.max_newton; ++it) {
    const Matrix K = R_llt.solve(B.transpose() * Pi);  // R^-1 B^T Pi
    const Matrix Acl = As - B * K;
    Matrix X;
    try {
      X = solve_lyapunov(Acl.transpose(), Q + K.transpose() * R * K);
    } catch (const SingularSystem&) {
      break;  // iterate left the stabilizing region; keep the best so far
    }
    symmetrize(X);
    const double res = residual_norm(X);
    used = it;
    Pi = X;
    if (res < best_res) {
      best_res = res;
      best_Pi = X;
      best_it = it;
    }
    if (res <= opts.tol * scale) break;
    if (it - best_it >= 5) break;  // roundoff floor reached
  }

  CareSolution out;
  out.Pi = best_Pi;
  out.residual_norm = best_res;
  out.iterations = used;
  out.stabilizing = is_hurwitz(As - G * best_Pi);
  if (!out.stabilizing)
    throw NonStabilizable("no stabilizing Riccati solution found");
  if (best_res > 1e-6 * scale)
    throw NotConverged("Riccati refinement stalled at residual " +
                       std::to_string(best_res));
  return out;
}

Vector solve_offset(const Matrix& closed_loop_drift, const Matrix& Pi,
                    const Vector& M, const Vector& eta_bar, double rho) {
  const int n = static_cast<int>(closed_loop_drift.rows());
  require(closed_loop_drift.cols() == n, "solve_offset: drift must be square");
  require(Pi.rows() == n && Pi.cols() == n,
          "solve_offset: Pi dimensions must match the drift");
  require(M.size() == n && eta_bar.size() == n,
          "solve_offset: vector dimensions must match the drift");
  const Matrix lhs =
      rho * Matrix::Identity(n, n) - closed_loop_drift.transpose();
  Eigen::JacobiSVD<Matrix> svd(lhs, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector& sv = svd.singularValues();
  const double smin = sv(sv.size() - 1);
  if (!(smin > 0.0) || sv(0) / smin > 1e12)
    throw SingularSystem(
        "offset system (rho I - Acl^T) is numerically singular");
  return svd.solve(Pi * M - eta_bar);
}

Matrix solve_filter_care(const Matrix& A, const Matrix& L, const Matrix& Qw,
                         const Matrix& Rv) {
  CareSolution sol =
      solve_discounted_care(A.transpose(), L.transpose(), Qw, Rv, 0.0);
  return sol.Pi;
}

Matrix filter_gain(const Matrix& V, const Matrix& L, const Matrix& Rv) {
  require(V.rows() == V.cols(), "filter_gain: V must be square");
  require(L.cols() == V.rows(), "filter_gain: observation map width must match V");
  require(Rv.rows() == L.rows() && Rv.cols() == L.rows(),
          "filter_gain: Rv must be square with the observation row count");
  return V * L.transpose() * pinv_psd(Rv);
}

int CovarianceTrajectory::index_at(double t) const {
  if (values.empty() || !(dt > 0.0))
    throw IncompleteTrajectory("covariance trajectory is empty");
  const long long idx = std::llround(t / dt);
  if (idx < 0 || idx >= static_cast<long long>(values.size()))
    throw StaleGain("time " + std::to_string(t) +
                    " lies outside the covariance grid");
  if (std::abs(t - static_cast<double>(idx) * dt) > 0.5 * dt)
    throw StaleGain("time " + std::to_string(t) +
                    " does not align with the covariance grid");
  return static_cast<int>(idx);
}

const Matrix& CovarianceTrajectory::value_at(double t) const {
  return values[static_cast<std::size_t>(index_at(t))];
}

const Matrix& CovarianceTrajectory::gain_at(double t) const {
  const auto idx = static_cast<std::size_t>(index_at(t));
  if (idx >= gains.size())
    throw IncompleteTrajectory("no filter gain stored at the requested time");
  return gains[idx];
}

std::pair<CovarianceTrajectory, CovarianceTrajectory>
integrate_coupled_covariances(const ExtendedSystem& major_sys,
                              const ExtendedSystem& error_sys,
                              const Matrix& V0_init, const Matrix& Vbar_init,
                              double dt, double horizon) {
  require(major_sys.role == SystemRole::Major,
          "integrate_coupled_covariances: first system must be the major");
  require(error_sys.role == SystemRole::ErrorStack,
          "integrate_coupled_covariances: second system must be the error stack");
  const int steps = grid_steps(dt, horizon);
  const int n0 = major_sys.dim();
  const int ne = error_sys.dim();
  require(V0_init.rows() == n0 && V0_init.cols() == n0,
          "V0_init dimensions must match the major extended system");
  require(Vbar_init.rows() == ne && Vbar_init.cols() == ne,
          "Vbar_init dimensions must match the error stack");
  check_initial_covariance(V0_init, "V0_init");
  check_initial_covariance(Vbar_init, "Vbar_init");

  const Matrix& A0 = major_sys.drift;
  const Matrix& L0 = major_sys.observation;
  const Matrix& Rv0 = major_sys.meas_noise_cov;
  const Matrix Rv0_pinv = pinv_psd(Rv0);
  const Matrix Qw0 = major_sys.diffusion * major_sys.diffusion.transpose();
  const Matrix& J0 = major_sys.error_injection;
  require(J0.rows() == n0 && J0.cols() == ne,
          "major error injection dimensions must match the error stack");

  const Matrix& At = error_sys.drift;
  const NoiseSplit split = split_noise_columns(error_sys);
  require(L0.rows() == split.Dnu.cols(),
          "innovation noise block width must match the major observation rows");
  const Matrix Qw_bar = split.Dw0 * split.Dw0.transpose();

  const auto rhs = [&](const Matrix& V0, const Matrix& Vb, Matrix& dV0,
                       Matrix& dVb) {
    const Matrix VLt = V0 * L0.transpose();
    dV0 = A0 * V0 + V0 * A0.transpose() - VLt * Rv0_pinv * VLt.transpose() +
          J0 * Vb * J0.transpose() + Qw0;
    const Matrix N = L0 * VLt + Rv0;
    dVb = At * Vb + Vb * At.transpose() + Qw_bar +
          split.Dnu * N * split.Dnu.transpose();
  };

  CovarianceTrajectory v0_traj;
  CovarianceTrajectory vbar_traj;
  v0_traj.dt = dt;
  vbar_traj.dt = dt;
  v0_traj.values.reserve(steps + 1);
  v0_traj.gains.reserve(steps + 1);
  vbar_traj.values.reserve(steps + 1);
  vbar_traj.channel_cov.reserve(steps + 1);

  Matrix V0 = V0_init;
  Matrix Vb = Vbar_init;
  symmetrize(V0);
  symmetrize(Vb);

  const auto record = [&]() {
    v0_traj.values.push_back(V0);
    v0_traj.gains.push_back(V0 * L0.transpose() * Rv0_pinv);
    vbar_traj.values.push_back(Vb);
    vbar_traj.channel_cov.push_back(L0 * V0 * L0.transpose() + Rv0);
  };
  record();

  Matrix k1V(n0, n0), k2V(n0, n0), k3V(n0, n0), k4V(n0, n0);
  Matrix k1B(ne, ne), k2B(ne, ne), k3B(ne, ne), k4B(ne, ne);
  for (int i = 0; i < steps; ++i) {
    rhs(V0, Vb, k1V, k1B);
    rhs(V0 + 0.5 * dt * k1V, Vb + 0.5 * dt * k1B, k2V, k2B);
    rhs(V0 + 0.5 * dt * k2V, Vb + 0.5 * dt * k2B, k3V, k3B);
    rhs(V0 + dt * k3V, Vb + dt * k3B, k4V, k4B);
    V0 += (dt / 6.0) * (k1V + 2.0 * k2V + 2.0 * k3V + k4V);
    Vb += (dt / 6.0) * (k1B + 2.0 * k2B + 2.0 * k3B + k4B);
    enforce_covariance_invariants(V0, "major filter");
    enforce_covariance_invariants(Vb, "averaged error");
    record();
  }
  return {std::move(v0_traj), std::move(vbar_traj)};
}

CovarianceTrajectory integrate_minor_filter_riccati(
    const ExtendedSystem& minor_sys, const CovarianceTrajectory& Vbar_traj,
    const Matrix& Vk_init, double dt, double horizon) {
  require(minor_sys.role == SystemRole::Minor,
          "integrate_minor_filter_riccati: minor system expected");
  const int steps = grid_steps(dt, horizon);
  if (!(Vbar_traj.dt > 0.0) || std::abs(Vbar_traj.dt - dt) > 1e-9 * dt)
    throw GridMismatch(
        "averaged-error trajectory grid spacing differs from the requested dt");
  if (Vbar_traj.steps() < steps)
    throw GridMismatch(
        "averaged-error trajectory does not cover the requested horizon");
  const int nk = minor_sys.dim();
  require(Vk_init.rows() == nk && Vk_init.cols() == nk,
          "Vk_init dimensions must match the minor extended system");
  check_initial_covariance(Vk_init, "Vk_init");

  const Matrix& Ak = minor_sys.drift;
  const Matrix& Lk = minor_sys.observation;
  const Matrix& Rv = minor_sys.meas_noise_cov;
  const Matrix Rv_pinv = pinv_psd(Rv);
  const NoiseSplit split = split_noise_columns(minor_sys);
  const Matrix Qc =
      split.Dwi * split.Dwi.transpose() + split.Dw0 * split.Dw0.transpose();
  const Matrix& J = minor_sys.error_injection;
  const int ne = static_cast<int>(Vbar_traj.values.front().rows());
  require(J.rows() == nk && J.cols() == ne,
          "minor error injection dimensions must match the error stack");

  const int p0 = static_cast<int>(split.Dnu.cols());
  const bool nu_active =
      split.Dnu.size() > 0 && split.Dnu.cwiseAbs().maxCoeff() > 0.0;
  const bool have_channel =
      Vbar_traj.channel_cov.size() == Vbar_traj.values.size();
  if (nu_active && !have_channel)
    throw IncompleteTrajectory(
        "averaged-error trajectory lacks the innovation covariance sequence "
        "needed to weight the major innovation channel");
  const Matrix zero_channel = Matrix::Zero(p0, p0);
  const auto channel = [&](int i) -> const Matrix& {
    return have_channel ? Vbar_traj.channel_cov[static_cast<std::size_t>(i)]
                        : zero_channel;
  };

  const auto rhs = [&](const Matrix& V, const Matrix& Vb, const Matrix& N) {
    const Matrix VLt = V * Lk.transpose();
    return Matrix(Ak * V + V * Ak.transpose() -
                  VLt * Rv_pinv * VLt.transpose() + J * Vb * J.transpose() +
                  Qc + split.Dnu * N * split.Dnu.transpose());
  };

  CovarianceTrajectory traj;
  traj.dt = dt;
  traj.values.reserve(steps + 1);
  traj.gains.reserve(steps + 1);
  Matrix V = Vk_init;
  symmetrize(V);
  const auto record = [&]() {
    traj.values.push_back(V);
    traj.gains.push_back(V * Lk.transpose() * Rv_pinv);
  };
  record();

  for (int i = 0; i < steps; ++i) {
    const Matrix& Vb0 = Vbar_traj.values[static_cast<std::size_t>(i)];
    const Matrix& Vb1 = Vbar_traj.values[static_cast<std::size_t>(i + 1)];
    const Matrix Vbm = 0.5 * (Vb0 + Vb1);
    const Matrix& N0 = channel(i);
    const Matrix& N1 = channel(i + 1);
    const Matrix Nm = 0.5 * (N0 + N1);
    const Matrix k1 = rhs(V, Vb0, N0);
    const Matrix k2 = rhs(V + 0.5 * dt * k1, Vbm, Nm);
    const Matrix k3 = rhs(V + 0.5 * dt * k2, Vbm, Nm);
    const Matrix k4 = rhs(V + dt * k3, Vb1, N1);
    V += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    enforce_covariance_invariants(V, "minor filter");
    record();
  }
  return traj;
}

StationaryCovariances solve_stationary_covariances(
    const GameParameters& params, const MeanFieldCoefficients& mf,
    const Matrix& Pi0, const Vector& s0, double tol, int max_iter) {
  const ExtendedSystem major = build_major_extended(params, mf);
  const int n0 = major.dim();
  const int ne = params.dim_error_stack();
  const int K = params.K;
  const Matrix& L0 = major.observation;
  const Matrix& Rv0 = major.meas_noise_cov;
  const Matrix Qw0 = major.diffusion * major.diffusion.transpose();
  const Matrix& J0 = major.error_injection;

  StationaryCovariances out;
  Matrix Vbar = Matrix::Zero(ne, ne);
  Matrix V0_prev = Matrix::Zero(n0, n0);
  std::vector<Matrix> Vk_prev(
      static_cast<std::size_t>(K),
      Matrix::Zero(params.dim_minor_ex(), params.dim_minor_ex()));

  const auto rel_change = [](const Matrix& a, const Matrix& b) {
    return (a - b).norm() / (1.0 + a.norm());
  };

  for (int it = 1; it <= max_iter; ++it) {
    const Matrix V0 =
        solve_filter_care(major.drift, L0, Qw0 + J0 * Vbar * J0.transpose(),
                          Rv0);
    const Matrix K0 = filter_gain(V0, L0, Rv0);
    const Matrix N = L0 * V0 * L0.transpose() + Rv0;

    ClosedLoopMajor loop = build_major_closed_loop(params, mf, Pi0, s0, K0);
    std::vector<ExtendedSystem> minors;
    minors.reserve(static_cast<std::size_t>(K));
    std::vector<Matrix> Vk(static_cast<std::size_t>(K));
    std::vector<Matrix> Kk(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k) {
      minors.push_back(build_minor_extended(params, k, mf, loop));
      const ExtendedSystem& ms = minors.back();
      const NoiseSplit split = split_noise_columns(ms);
      const Matrix Qwk = split.Dwi * split.Dwi.transpose() +
                         split.Dw0 * split.Dw0.transpose() +
                         split.Dnu * N * split.Dnu.transpose() +
                         ms.error_injection * Vbar *
                             ms.error_injection.transpose();
      Vk[static_cast<std::size_t>(k)] =
          solve_filter_care(ms.drift, ms.observation, Qwk, ms.meas_noise_cov);
      Kk[static_cast<std::size_t>(k)] =
          filter_gain(Vk[static_cast<std::size_t>(k)], ms.observation,
                      ms.meas_noise_cov);
    }

    ExtendedSystem err = build_error_stack(params, minors, Kk);
    if (!is_hurwitz(err.drift))
      throw NonStabilizable(
          "averaged-error drift is not Hurwitz; the stationary covariance "
          "is undefined");
    const NoiseSplit esplit = split_noise_columns(err);
    const Matrix forcing = esplit.Dw0 * esplit.Dw0.transpose() +
                           esplit.Dnu * N * esplit.Dnu.transpose();
    const Matrix Vbar_new = solve_lyapunov(err.drift, forcing);

    double res = std::max(rel_change(V0, V0_prev), rel_change(Vbar_new, Vbar));
    for (int k = 0; k < K; ++k)
      res = std::max(res, rel_change(Vk[static_cast<std::size_t>(k)],
                                     Vk_prev[static_cast<std::size_t>(k)]));

    out.V0 = V0;
    out.Vbar = Vbar_new;
    out.Vk = Vk;
    out.K0 = K0;
    out.Kk = Kk;
    out.innovation_cov = N;
    out.minor_systems = std::move(minors);
    out.error_system = std::move(err);
    out.major_loop = std::move(loop);
    out.iterations = it;
    out.residual = res;

    if (res < tol) return out;
    Vbar = Vbar_new;
    V0_prev = V0;
    Vk_prev = Vk;
  }
  throw NotConverged(
      "stationary covariance fixed point did not converge (residual " +
      std::to_string(out.residual) + ")");
}

Matrix initial_major_covariance(const GameParameters& p) {
  const double s2 = p.sigma_init * p.sigma_init;
  Matrix V = Matrix::Zero(p.dim_major_ex(), p.dim_major_ex());
  V.topLeftCorner(p.n, p.n) = s2 * Matrix::Identity(p.n, p.n);
  return V;
}

Matrix initial_minor_covariance(const GameParameters& p) {
  const double s2 = p.sigma_init * p.sigma_init;
  Matrix V = Matrix::Zero(p.dim_minor_ex(), p.dim_minor_ex());
  V.topLeftCorner(p.n, p.n) = s2 * Matrix::Identity(p.n, p.n);
  V.block(p.n, p.n, p.n, p.n) = s2 * Matrix::Identity(p.n, p.n);
  return V;
}

Matrix initial_error_covariance(const GameParameters& p) {
  const double s2 = p.sigma_init * p.sigma_init;
  const int nk = p.dim_minor_ex();
  Matrix V = Matrix::Zero(p.dim_error_stack(), p.dim_error_stack());
  // Every per-type averaged error starts at (0, x0(0), 0, 0, 0) with the
  // shared major initial state, so all (k, l) pairs carry the same block.
  for (int k = 0; k < p.K; ++k)
    for (int l = 0; l < p.K; ++l)
      V.block(k * nk + p.n, l * nk + p.n, p.n, p.n) =
          s2 * Matrix::Identity(p.n, p.n);
  return V;
}

}  // namespace mmlqg
