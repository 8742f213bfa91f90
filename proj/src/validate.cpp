#include "mmlqg/validate.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <string>

#include "mmlqg/blocks.hpp"

namespace mmlqg {

namespace {

// Symmetric PSD square root (negative roundoff clipped to zero).
Matrix sqrt_psd(const Matrix& S) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (S + S.transpose()));
  Vector vals = es.eigenvalues();
  for (int i = 0; i < vals.size(); ++i)
    vals(i) = vals(i) > 0.0 ? std::sqrt(vals(i)) : 0.0;
  return es.eigenvectors() * vals.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

AssumptionReport check_assumptions(const GameParameters& params,
                                   const MeanFieldSolution& solution,
                                   const StationaryCovariances& stationary) {
  AssumptionReport report = validate(params);
  if (!report.all_passed()) return report;

  auto record = [&](const std::string& name, bool checkable, bool passed,
                    const std::string& detail) {
    report.checks.push_back({name, checkable, passed, detail});
  };

  const int n = params.n;
  const int K = params.K;
  const int nK = n * K;
  const double rho = params.rho;

  // Filter-side conditions on the major extended system.
  const ExtendedSystem major =
      build_major_extended(params, solution.coefficients);
  record("major filter pair (A0ex, D0ex) stabilizable", true,
         is_stabilizable(major.drift, major.diffusion), "");
  record("major filter pair (L0ex, A0ex) detectable", true,
         is_detectable(major.observation, major.drift), "");

  // Filter-side conditions per minor type; the extended diffusion embeds the
  // major stationary gain, so the stationary assembly is used.
  for (int k = 0; k < K; ++k) {
    const ExtendedSystem& ms =
        stationary.minor_systems[static_cast<std::size_t>(k)];
    const std::string tag = " (type " + std::to_string(k + 1) + ")";
    record("minor filter pair (Akex, Dex) stabilizable" + tag, true,
           is_stabilizable(ms.drift, ms.diffusion), "");
    record("minor filter pair (Lkex, Akex) detectable" + tag, true,
           is_detectable(ms.observation, ms.drift), "");
  }

  // Error-stack controllability through the active noise channels: the
  // forcing factor is [Dw0, Dnu N^(1/2)] where N is the stationary
  // innovation covariance.
  {
    const ExtendedSystem& err = stationary.error_system;
    const int r = err.noise_cols[0];
    const int r0 = err.noise_cols[1];
    const int p0 = err.noise_cols[3];
    Matrix factor(err.dim(), r0 + p0);
    factor.leftCols(r0) = err.diffusion.middleCols(r, r0);
    factor.rightCols(p0) =
        err.diffusion.rightCols(p0) * sqrt_psd(stationary.innovation_cov);
    const bool controllable = is_controllable(err.drift, factor);
    std::string detail;
    if (!controllable && is_hurwitz(err.drift))
      detail =
          "averaged own-state error modes are unforced in the "
          "infinite-population limit; the drift is Hurwitz, so a unique PSD "
          "(possibly singular) stationary covariance still exists";
    record("error stack pair (Atilde, Qtilde) controllable", true,
           controllable, detail);
  }

  // Control-side conditions on the discount-shifted extended systems.
  {
    const Matrix As0 =
        major.drift - 0.5 * rho * Matrix::Identity(major.dim(), major.dim());
    record("shifted major pair (A0ex - rho/2 I, B0ex) stabilizable", true,
           is_stabilizable(As0, major.control), "");
    Matrix La(n, n + nK);
    La.leftCols(n) = Matrix::Identity(n, n);
    La.rightCols(nK) = -h0_pi(params);
    La = sqrt_psd(params.Q0) * La;
    record("shifted major pair (La, A0ex - rho/2 I) detectable", true,
           is_detectable(La, As0), "");
  }
  for (int k = 0; k < K; ++k) {
    const ExtendedSystem& ms =
        stationary.minor_systems[static_cast<std::size_t>(k)];
    const std::string tag = " (type " + std::to_string(k + 1) + ")";
    const Matrix Ask =
        ms.drift - 0.5 * rho * Matrix::Identity(ms.dim(), ms.dim());
    record("shifted minor pair (Akex - rho/2 I, Bkex) stabilizable" + tag,
           true, is_stabilizable(Ask, ms.control), "");
    Matrix Lb = Matrix::Zero(n, ms.dim());
    Lb.leftCols(n) = Matrix::Identity(n, n);
    Lb.middleCols(n, n) = -params.H1;
    Lb.middleCols(2 * n, nK) = -h2_pi(params);
    Lb = sqrt_psd(params.Q) * Lb;
    record("shifted minor pair (Lb, Akex - rho/2 I) detectable" + tag, true,
           is_detectable(Lb, Ask), "");
  }

  record("fixed-point existence and uniqueness", false, solution.converged,
         solution.converged
             ? "solver converged in " + std::to_string(solution.iterations) +
                   " iterations, residual " + std::to_string(solution.residual)
             : "solver did not converge");
  return report;
}

}  // namespace mmlqg
