#include "mmlqg/blocks.hpp"

#include <algorithm>
#include <cmath>

namespace mmlqg {

MeanFieldCoefficients MeanFieldCoefficients::zero(int n, int K) {
  const int nK = n * K;
  const int dim_ex = 3 * n + 2 * nK;
  MeanFieldCoefficients mf;
  mf.Abar = Matrix::Zero(nK, nK);
  mf.Gbar = Matrix::Zero(nK, n);
  mf.Hbar = Matrix::Zero(nK, n);
  mf.Lbar = Matrix::Zero(nK, nK);
  mf.Jbar = Matrix::Zero(nK, dim_ex * K);
  mf.mbar = Vector::Zero(nK);
  return mf;
}

double MeanFieldCoefficients::sup_norm() const {
  double v = 0.0;
  auto acc = [&v](const Matrix& m) {
    if (m.size()) v = std::max(v, m.cwiseAbs().maxCoeff());
  };
  acc(Abar);
  acc(Gbar);
  acc(Hbar);
  acc(Lbar);
  acc(Jbar);
  acc(mbar);
  return v;
}

double MeanFieldCoefficients::distance(const MeanFieldCoefficients& o) const {
  double v = 0.0;
  auto acc = [&v](const Matrix& a, const Matrix& b) {
    if (a.size()) v = std::max(v, (a - b).cwiseAbs().maxCoeff());
  };
  acc(Abar, o.Abar);
  acc(Gbar, o.Gbar);
  acc(Hbar, o.Hbar);
  acc(Lbar, o.Lbar);
  acc(Jbar, o.Jbar);
  acc(mbar, o.mbar);
  return v;
}

Matrix e_bar(int k, int n, int K) {
  Matrix e = Matrix::Zero(n, n * K);
  e.middleCols(k * n, n) = Matrix::Identity(n, n);
  return e;
}

Matrix e_tilde(int k, int n, int K) {
  const int d = 3 * n + 2 * n * K;
  Matrix e = Matrix::Zero(d, d * K);
  e.middleCols(k * d, d) = Matrix::Identity(d, d);
  return e;
}

Matrix ones_tilde(int n, int K) {
  const int d = 3 * n + 2 * n * K;
  Matrix e(d, d * K);
  for (int k = 0; k < K; ++k) e.middleCols(k * d, d) = Matrix::Identity(d, d);
  return e;
}

Matrix h0_pi(const GameParameters& p) {
  Matrix h(p.n, p.n * p.K);
  for (int k = 0; k < p.K; ++k) h.middleCols(k * p.n, p.n) = p.pi[k] * p.H0;
  return h;
}

Matrix h2_pi(const GameParameters& p) {
  Matrix h(p.n, p.n * p.K);
  for (int k = 0; k < p.K; ++k) h.middleCols(k * p.n, p.n) = p.pi[k] * p.H2;
  return h;
}

namespace {

Matrix major_cost_map(const GameParameters& p) {
  // S0 = [I, -h0_pi]
  Matrix s(p.n, p.dim_major_ex());
  s.leftCols(p.n) = Matrix::Identity(p.n, p.n);
  s.rightCols(p.n * p.K) = -h0_pi(p);
  return s;
}

Matrix minor_cost_map(const GameParameters& p) {
  // S = [I, -H1, -h2_pi, 0]
  Matrix s = Matrix::Zero(p.n, p.dim_minor_ex());
  s.leftCols(p.n) = Matrix::Identity(p.n, p.n);
  s.middleCols(p.n, p.n) = -p.H1;
  s.middleCols(2 * p.n, p.n * p.K) = -h2_pi(p);
  return s;
}

}  // namespace

Matrix q0_pi(const GameParameters& p) {
  const Matrix s = major_cost_map(p);
  return s.transpose() * p.Q0 * s;
}

Vector eta0_bar(const GameParameters& p) {
  return major_cost_map(p).transpose() * p.Q0 * p.eta0;
}

Matrix q_pi(const GameParameters& p) {
  const Matrix s = minor_cost_map(p);
  return s.transpose() * p.Q * s;
}

Vector eta_bar(const GameParameters& p) {
  return minor_cost_map(p).transpose() * p.Q * p.eta;
}

ExtendedSystem build_major_extended(const GameParameters& p,
                                    const MeanFieldCoefficients& mf) {
  const int n = p.n, K = p.K, nK = n * K;
  const int N0 = p.dim_major_ex();
  const int r0 = p.r0(), r = p.r();

  ExtendedSystem sys;
  sys.role = SystemRole::Major;

  sys.drift = Matrix::Zero(N0, N0);
  sys.drift.topLeftCorner(n, n) = p.A0;
  sys.drift.bottomLeftCorner(nK, n) = mf.Gbar + mf.Hbar;
  sys.drift.bottomRightCorner(nK, nK) = mf.Abar + mf.Lbar;

  sys.control = Matrix::Zero(N0, p.m);
  sys.control.topRows(n) = p.B0;

  sys.offset = Vector::Zero(N0);
  sys.offset.tail(nK) = mf.mbar;

  sys.diffusion = Matrix::Zero(N0, r0 + r * K);
  sys.diffusion.topLeftCorner(n, r0) = p.D0;
  sys.noise_cols = {r0, r * K};

  sys.error_injection = Matrix::Zero(N0, p.dim_error_stack());
  sys.error_injection.bottomRows(nK) = mf.Jbar;

  sys.observation = Matrix::Zero(p.p0(), N0);
  sys.observation.leftCols(n) = p.l0;
  sys.meas_noise_cov = p.Rv0();
  return sys;
}

ClosedLoopMajor build_major_closed_loop(const GameParameters& p,
                                        const MeanFieldCoefficients& mf,
                                        const Matrix& Pi0, const Vector& s0,
                                        const Matrix& K0) {
  const int n = p.n, K = p.K, nK = n * K;
  const int N0 = p.dim_major_ex();
  const int r0 = p.r0(), r = p.r(), p0 = p.p0();

  const ExtendedSystem major = build_major_extended(p, mf);
  const Matrix RinvBt = p.R0.llt().solve(major.control.transpose());  // R0^-1 B0ex^T
  const Matrix feedback = major.control * RinvBt * Pi0;  // B0ex R0^-1 B0ex^T Pi0

  ClosedLoopMajor loop;
  loop.drift = Matrix::Zero(2 * N0, 2 * N0);
  // True states: x0 sees A0 plus the control acting through the estimate;
  // xbar splits its drift between true (Gbar, Abar) and estimated (Hbar,
  // Lbar) coordinates.
  loop.drift.topLeftCorner(n, n) = p.A0;
  loop.drift.block(n, 0, nK, n) = mf.Gbar;
  loop.drift.block(n, n, nK, nK) = mf.Abar;
  loop.drift.block(0, N0, n, N0) = -p.B0 * RinvBt * Pi0;
  loop.drift.block(n, N0, nK, n) = mf.Hbar;
  loop.drift.block(n, N0 + n, nK, nK) = mf.Lbar;
  // Estimates: innovation-driven copy of the extended system under the
  // closed-loop drift.
  loop.drift.bottomRightCorner(N0, N0) = major.drift - feedback;

  loop.error_injection = Matrix::Zero(2 * N0, p.dim_error_stack());
  loop.error_injection.topRows(N0) = major.error_injection;

  const Vector affine = major.offset - major.control * (RinvBt * s0);
  loop.offset = Vector::Zero(2 * N0);
  loop.offset.head(N0) = affine;
  loop.offset.tail(N0) = affine;

  loop.diffusion = Matrix::Zero(2 * N0, r0 + r * K + p0);
  loop.diffusion.topLeftCorner(N0, r0 + r * K) = major.diffusion;
  if (K0.size()) {
    require(K0.rows() == N0 && K0.cols() == p0,
            "K0 must be (n+nK) x p0 in build_major_closed_loop");
    loop.diffusion.bottomRightCorner(N0, p0) = K0;
  }
  return loop;
}

ExtendedSystem build_minor_extended(const GameParameters& p, int k,
                                    const MeanFieldCoefficients& mf,
                                    const ClosedLoopMajor& loop) {
  require(k >= 0 && k < p.K, "minor type index out of range");
  require(mf.Abar.rows() == p.n * p.K,
          "mean-field coefficients sized for different (n, K)");
  const int n = p.n, K = p.K;
  const int Nk = p.dim_minor_ex();
  const int N0 = p.dim_major_ex();
  const int r0 = p.r0(), r = p.r(), p0 = p.p0();

  ExtendedSystem sys;
  sys.role = SystemRole::Minor;
  sys.type = k;

  sys.drift = Matrix::Zero(Nk, Nk);
  sys.drift.topLeftCorner(n, n) = p.A[k];
  sys.drift.block(0, n, n, n) = p.G;
  sys.drift.bottomRightCorner(2 * N0, 2 * N0) = loop.drift;

  sys.control = Matrix::Zero(Nk, p.m);
  sys.control.topRows(n) = p.B[k];

  sys.offset = Vector::Zero(Nk);
  sys.offset.tail(2 * N0) = loop.offset;

  sys.diffusion = Matrix::Zero(Nk, r + r0 + r * K + p0);
  sys.diffusion.topLeftCorner(n, r) = p.D;
  sys.diffusion.bottomRightCorner(2 * N0, r0 + r * K + p0) = loop.diffusion;
  sys.noise_cols = {r, r0, r * K, p0};

  sys.error_injection = Matrix::Zero(Nk, p.dim_error_stack());
  sys.error_injection.bottomRows(2 * N0) = loop.error_injection;

  sys.observation = Matrix::Zero(p.p(), Nk);
  sys.observation.leftCols(n) = p.l1[k];
  sys.observation.middleCols(n, n) = p.l2[k];
  sys.meas_noise_cov = p.Rv();
  return sys;
}

ExtendedSystem build_error_stack(const GameParameters& p,
                                 const std::vector<ExtendedSystem>& minors,
                                 const std::vector<Matrix>& gains) {
  require(static_cast<int>(minors.size()) == p.K,
          "need one minor system per type");
  require(static_cast<int>(gains.size()) == p.K, "need one gain per type");
  const int Nk = p.dim_minor_ex();
  const int dim = p.dim_error_stack();

  ExtendedSystem sys;
  sys.role = SystemRole::ErrorStack;
  sys.drift = Matrix::Zero(dim, dim);
  sys.diffusion = Matrix::Zero(dim, minors[0].diffusion.cols());
  for (int k = 0; k < p.K; ++k) {
    require(minors[k].dim() == Nk, "minor system has wrong dimension");
    require(gains[k].rows() == Nk && gains[k].cols() == p.p(),
            "minor gain has wrong shape");
    const Matrix closed = minors[k].drift - gains[k] * minors[k].observation;
    sys.drift.block(k * Nk, k * Nk, Nk, Nk) = closed;
    sys.drift.middleRows(k * Nk, Nk) += minors[k].error_injection;
    sys.diffusion.middleRows(k * Nk, Nk) = minors[k].diffusion;
  }
  sys.noise_cols = minors[0].noise_cols;
  return sys;
}

}  // namespace mmlqg
