#include "mmlqg/consistency.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "mmlqg/riccati.hpp"

namespace mmlqg {

namespace {

// B R^-1 B^T, with R factored once per call site.
Matrix control_gram(const Matrix& B, const Matrix& R) {
  Eigen::LLT<Matrix> llt(R);
  if (llt.info() != Eigen::Success)
    throw SingularSystem("control weight R must be positive definite");
  return B * llt.solve(B.transpose());
}

MeanFieldCoefficients lerp(const MeanFieldCoefficients& a,
                           const MeanFieldCoefficients& b, double gamma) {
  MeanFieldCoefficients out;
  out.Abar = (1.0 - gamma) * a.Abar + gamma * b.Abar;
  out.Gbar = (1.0 - gamma) * a.Gbar + gamma * b.Gbar;
  out.Hbar = (1.0 - gamma) * a.Hbar + gamma * b.Hbar;
  out.Lbar = (1.0 - gamma) * a.Lbar + gamma * b.Lbar;
  out.Jbar = (1.0 - gamma) * a.Jbar + gamma * b.Jbar;
  out.mbar = (1.0 - gamma) * a.mbar + gamma * b.mbar;
  return out;
}

}  // namespace

PiBlocks extract_pi_blocks(const Matrix& Pik, int n, int K) {
  const int dim = 3 * n + 2 * n * K;
  require(n > 0 && K > 0, "extract_pi_blocks: dimensions must be positive");
  require(Pik.rows() == dim && Pik.cols() == dim,
          "extract_pi_blocks: Pi_k must be (3n + 2nK) square");
  const int nK = n * K;
  PiBlocks out;
  out.P11 = Pik.block(0, 0, n, n);
  out.P12 = Pik.block(0, n, n, n);
  out.P13 = Pik.block(0, 2 * n, n, nK);
  out.P14 = Pik.block(0, 2 * n + nK, n, n);
  out.P15 = Pik.block(0, 3 * n + nK, n, nK);
  out.P21 = Pik.block(n, 0, n, n);
  out.P22 = Pik.block(n, n, n, n);
  out.P23 = Pik.block(n, 2 * n, n, nK);
  out.P24 = Pik.block(n, 2 * n + nK, n, n);
  out.P25 = Pik.block(n, 3 * n + nK, n, nK);
  return out;
}

MeanFieldCoefficients apply_consistency_map(const GameParameters& params,
                                            const std::vector<Matrix>& Pik,
                                            const std::vector<Vector>& sk) {
  const int n = params.n;
  const int K = params.K;
  const int nex = params.dim_minor_ex();
  require(static_cast<int>(Pik.size()) == K,
          "apply_consistency_map: one Pi_k per type expected");
  require(static_cast<int>(sk.size()) == K,
          "apply_consistency_map: one s_k per type expected");

  MeanFieldCoefficients mf = MeanFieldCoefficients::zero(n, K);
  for (int k = 0; k < K; ++k) {
    const Matrix& P = Pik[static_cast<std::size_t>(k)];
    const Vector& s = sk[static_cast<std::size_t>(k)];
    require(P.rows() == nex && P.cols() == nex,
            "apply_consistency_map: Pi_k must be (3n + 2nK) square");
    require(s.size() == nex,
            "apply_consistency_map: s_k must have the extended dimension");
    const PiBlocks b = extract_pi_blocks(P, n, K);
    const Matrix Gk = control_gram(params.B[static_cast<std::size_t>(k)],
                                   params.R);  // B_k R^-1 B_k^T
    const Matrix ek = e_bar(k, n, K);

    mf.Abar.middleRows(k * n, n) =
        (params.A[static_cast<std::size_t>(k)] - Gk * b.P11) * ek -
        Gk * b.P13;
    mf.Gbar.middleRows(k * n, n) = params.G - Gk * b.P12;
    mf.Hbar.middleRows(k * n, n) = -Gk * b.P14;
    mf.Lbar.middleRows(k * n, n) = -Gk * b.P15;
    mf.Jbar.block(k * n, k * nex, n, nex) = Gk * P.topRows(n);
    mf.mbar.segment(k * n, n) = -Gk * s.head(n);
  }
  return mf;
}

MeanFieldSolution solve_fixed_point(
    const GameParameters& params, double damping, double tol, int max_iter,
    const std::optional<MeanFieldCoefficients>& init) {
  require(damping > 0.0 && damping <= 1.0,
          "solve_fixed_point: damping must lie in (0, 1]");
  require(tol > 0.0, "solve_fixed_point: tol must be positive");
  require(max_iter >= 1, "solve_fixed_point: max_iter must be positive");
  validate_structure(params);

  const int n = params.n;
  const int K = params.K;
  const Matrix Q0pi = q0_pi(params);
  const Vector eta0b = eta0_bar(params);
  const Matrix Qpi = q_pi(params);
  const Vector etab = eta_bar(params);

  MeanFieldSolution sol;
  sol.coefficients = init ? *init : MeanFieldCoefficients::zero(n, K);
  sol.Pik.resize(static_cast<std::size_t>(K));
  sol.sk.resize(static_cast<std::size_t>(K));
  sol.Pi_blocks.resize(static_cast<std::size_t>(K));

  for (int it = 1; it <= max_iter; ++it) {
    // Major control problem on the current mean-field coefficients.
    const ExtendedSystem major = build_major_extended(params, sol.coefficients);
    sol.Pi0 = solve_discounted_care(major.drift, major.control, Q0pi,
                                    params.R0, params.rho)
                  .Pi;
    Eigen::LLT<Matrix> R0_llt(params.R0);
    if (R0_llt.info() != Eigen::Success)
      throw SingularSystem("major control weight R0 must be positive definite");
    const Matrix Acl0 =
        major.drift -
        major.control * R0_llt.solve(major.control.transpose() * sol.Pi0);
    sol.s0 = solve_offset(Acl0, sol.Pi0, major.offset, eta0b, params.rho);

    // Minor control problems against the major closed loop.
    const ClosedLoopMajor loop =
        build_major_closed_loop(params, sol.coefficients, sol.Pi0, sol.s0);
    Eigen::LLT<Matrix> R_llt(params.R);
    if (R_llt.info() != Eigen::Success)
      throw SingularSystem("minor control weight R must be positive definite");
    for (int k = 0; k < K; ++k) {
      const ExtendedSystem minor =
          build_minor_extended(params, k, sol.coefficients, loop);
      Matrix& Pk = sol.Pik[static_cast<std::size_t>(k)];
      Pk = solve_discounted_care(minor.drift, minor.control, Qpi, params.R,
                                 params.rho)
               .Pi;
      const Matrix Aclk =
          minor.drift -
          minor.control * R_llt.solve(minor.control.transpose() * Pk);
      sol.sk[static_cast<std::size_t>(k)] =
          solve_offset(Aclk, Pk, minor.offset, etab, params.rho);
      sol.Pi_blocks[static_cast<std::size_t>(k)] =
          extract_pi_blocks(Pk, n, K);
    }

    const MeanFieldCoefficients next =
        apply_consistency_map(params, sol.Pik, sol.sk);
    sol.residual = sol.coefficients.distance(next);
    sol.iterations = it;
    if (next.sup_norm() > 1e8)
      throw DivergenceDetected(
          "mean-field iterate norm exceeded 1e8 at iteration " +
          std::to_string(it));
    if (sol.residual < tol) {
      sol.coefficients = next;
      sol.converged = true;
      return sol;
    }
    sol.coefficients = lerp(sol.coefficients, next, damping);
  }
  sol.converged = false;
  return sol;
}

CompleteObservationSolution solve_complete_observation_fixed_point(
    const GameParameters& params, double damping, double tol, int max_iter) {
  require(damping > 0.0 && damping <= 1.0,
          "solve_complete_observation_fixed_point: damping must lie in (0, 1]");
  validate_structure(params);
  const int n = params.n;
  const int K = params.K;
  const int nK = n * K;
  const int n0ex = n + nK;       // [x0; xbar]
  const int nkex = 2 * n + nK;   // [xi; x0; xbar]

  // Cost lifts without estimate blocks.
  const Matrix Q0pi = q0_pi(params);
  const Vector eta0b = eta0_bar(params);
  Matrix S(n, nkex);
  S.setZero();
  S.leftCols(n) = Matrix::Identity(n, n);
  S.middleCols(n, n) = -params.H1;
  S.middleCols(2 * n, nK) = -h2_pi(params);
  const Matrix Qpi = S.transpose() * params.Q * S;
  const Vector etab = S.transpose() * params.Q * params.eta;

  Matrix B0ex = Matrix::Zero(n0ex, params.B0.cols());
  B0ex.topRows(n) = params.B0;

  CompleteObservationSolution sol;
  sol.Abar = Matrix::Zero(nK, nK);
  sol.Gbar = Matrix::Zero(nK, n);
  sol.mbar = Vector::Zero(nK);
  sol.Pik.resize(static_cast<std::size_t>(K));
  sol.sk.resize(static_cast<std::size_t>(K));

  Eigen::LLT<Matrix> R0_llt(params.R0);
  Eigen::LLT<Matrix> R_llt(params.R);
  if (R0_llt.info() != Eigen::Success || R_llt.info() != Eigen::Success)
    throw SingularSystem("control weights must be positive definite");

  for (int it = 1; it <= max_iter; ++it) {
    // Major extended system [x0; xbar] under complete observations.
    Matrix A0ex = Matrix::Zero(n0ex, n0ex);
    A0ex.topLeftCorner(n, n) = params.A0;
    A0ex.bottomLeftCorner(nK, n) = sol.Gbar;
    A0ex.bottomRightCorner(nK, nK) = sol.Abar;
    Vector M0ex = Vector::Zero(n0ex);
    M0ex.tail(nK) = sol.mbar;

    sol.Pi0 =
        solve_discounted_care(A0ex, B0ex, Q0pi, params.R0, params.rho).Pi;
    const Matrix Acl0 =
        A0ex - B0ex * R0_llt.solve(B0ex.transpose() * sol.Pi0);
    sol.s0 = solve_offset(Acl0, sol.Pi0, M0ex, eta0b, params.rho);
    const Vector M0cl = M0ex - B0ex * R0_llt.solve(B0ex.transpose() * sol.s0);

    Matrix Abar_new = Matrix::Zero(nK, nK);
    Matrix Gbar_new = Matrix::Zero(nK, n);
    Vector mbar_new = Vector::Zero(nK);
    for (int k = 0; k < K; ++k) {
      const Matrix& Bk = params.B[static_cast<std::size_t>(k)];
      Matrix Akex = Matrix::Zero(nkex, nkex);
      Akex.topLeftCorner(n, n) = params.A[static_cast<std::size_t>(k)];
      Akex.block(0, n, n, n) = params.G;
      Akex.bottomRightCorner(n0ex, n0ex) = Acl0;
      Matrix Bkex = Matrix::Zero(nkex, Bk.cols());
      Bkex.topRows(n) = Bk;
      Vector Mkex = Vector::Zero(nkex);
      Mkex.tail(n0ex) = M0cl;

      Matrix& Pk = sol.Pik[static_cast<std::size_t>(k)];
      Pk = solve_discounted_care(Akex, Bkex, Qpi, params.R, params.rho).Pi;
      const Matrix Aclk = Akex - Bkex * R_llt.solve(Bkex.transpose() * Pk);
      Vector& skk = sol.sk[static_cast<std::size_t>(k)];
      skk = solve_offset(Aclk, Pk, Mkex, etab, params.rho);

      const Matrix Gk = control_gram(Bk, params.R);
      const Matrix P11 = Pk.block(0, 0, n, n);
      const Matrix P12 = Pk.block(0, n, n, n);
      const Matrix P13 = Pk.block(0, 2 * n, n, nK);
      Abar_new.middleRows(k * n, n) =
          (params.A[static_cast<std::size_t>(k)] - Gk * P11) *
              e_bar(k, n, K) -
          Gk * P13;
      Gbar_new.middleRows(k * n, n) = params.G - Gk * P12;
      mbar_new.segment(k * n, n) = -Gk * skk.head(n);
    }

    double res = (Abar_new - sol.Abar).cwiseAbs().maxCoeff();
    res = std::max(res, (Gbar_new - sol.Gbar).cwiseAbs().maxCoeff());
    if (nK > 0)
      res = std::max(res, (mbar_new - sol.mbar).cwiseAbs().maxCoeff());
    sol.residual = res;
    sol.iterations = it;
    if (Abar_new.norm() + Gbar_new.norm() + mbar_new.norm() > 1e8)
      throw DivergenceDetected(
          "complete-observation iterate norm exceeded 1e8 at iteration " +
          std::to_string(it));
    if (res < tol) {
      sol.Abar = Abar_new;
      sol.Gbar = Gbar_new;
      sol.mbar = mbar_new;
      sol.converged = true;
      return sol;
    }
    sol.Abar = (1.0 - damping) * sol.Abar + damping * Abar_new;
    sol.Gbar = (1.0 - damping) * sol.Gbar + damping * Gbar_new;
    sol.mbar = (1.0 - damping) * sol.mbar + damping * mbar_new;
  }
  sol.converged = false;
  return sol;
}

}  // namespace mmlqg
