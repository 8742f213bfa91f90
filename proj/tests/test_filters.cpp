#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>
#include <vector>

#include "mmlqg/consistency.hpp"
#include "mmlqg/filters.hpp"
#include "mmlqg/reference.hpp"
#include "mmlqg/riccati.hpp"
#include "mmlqg/rng.hpp"
#include "oracles.hpp"

using namespace mmlqg;

namespace {

// Fixed point + stationary covariances of the reference scenario, solved
// once and shared across cases.
struct ReferenceFixture {
  GameParameters p;
  MeanFieldSolution mf;
  StationaryCovariances stat;
  ExtendedSystem major_sys;
};

const ReferenceFixture& fixture() {
  static const ReferenceFixture fix = [] {
    ReferenceFixture f;
    f.p = reference_parameters();
    f.mf = solve_fixed_point(f.p);
    f.stat = solve_stationary_covariances(f.p, f.mf.coefficients, f.mf.Pi0,
                                          f.mf.s0);
    f.major_sys = build_major_extended(f.p, f.mf.coefficients);
    return f;
  }();
  return fix;
}

// Euler-Maruyama truth update matching the filter's explicit scheme.
Vector advance_truth(const ExtendedSystem& sys, const Vector& x,
                     const Vector& u, double dt, const Vector& dW) {
  return x + (sys.drift * x + sys.control * u + sys.offset) * dt +
         sys.diffusion * dW;
}

}  // namespace

TEST_CASE("pure drift update and gain bookkeeping") {
  const auto& f = fixture();
  const int d = f.major_sys.dim();
  const int p0 = f.p.p0();

  ExtendedSystem sys = f.major_sys;
  sys.offset.setZero();

  const GainSchedule zero_gain(Matrix::Zero(d, p0), Matrix::Zero(d, d));
  Vector x0(d);
  x0 << 0.3, -0.1, 0.2, 0.05;
  auto st = make_major_filter(x0, zero_gain);
  CHECK(st.role == FilterRole::Major);
  CHECK(st.t == 0.0);
  CHECK(st.K.cwiseAbs().maxCoeff() == 0.0);

  SUBCASE("zero offset, zero control, zero gain is the bare drift map") {
    const Vector dy = Vector::Constant(p0, 0.7);  // ignored through K = 0
    const auto next =
        major_filter_step(st, dy, 0.01, sys, Matrix::Zero(d, d),
                          Vector::Zero(d), f.p.R0, zero_gain);
    const Vector expected =
        (Matrix::Identity(d, d) + 0.01 * sys.drift) * x0;
    CHECK((next.xhat - expected).norm() <= 1e-15);
    CHECK(next.t == doctest::Approx(0.01));
  }

  SUBCASE("role and dimension guards") {
    CHECK_THROWS_AS(minor_filter_step(st, Vector::Zero(p0), 0.01, sys,
                                      Matrix::Zero(d, d), Vector::Zero(d),
                                      f.p.R0, zero_gain),
                    DimensionMismatch);
    CHECK_THROWS_AS(major_filter_step(st, Vector::Zero(p0 + 1), 0.01, sys,
                                      Matrix::Zero(d, d), Vector::Zero(d),
                                      f.p.R0, zero_gain),
                    DimensionMismatch);
    CHECK_THROWS_AS(major_filter_step(st, Vector::Zero(p0), -0.01, sys,
                                      Matrix::Zero(d, d), Vector::Zero(d),
                                      f.p.R0, zero_gain),
                    DimensionMismatch);
  }

  SUBCASE("stationary schedule keeps the gain identity") {
    const GainSchedule gains(f.stat.K0, f.stat.V0);
    auto s2 = make_major_filter(Vector::Zero(d), gains);
    CHECK((s2.K - filter_gain(s2.V, f.major_sys.observation, f.p.Rv0()))
              .norm() <= 1e-12 * (1.0 + s2.K.norm()));
  }
}

TEST_CASE("noiseless major filter tracks the state exactly") {
  const auto& f = fixture();
  const double dt = 0.01;
  const ExtendedSystem& sys = f.major_sys;
  const GainSchedule gains(f.stat.K0, f.stat.V0);

  Vector x(sys.dim());
  x << 0.4, -0.3, 0.25, 0.1;
  auto st = make_major_filter(x, gains);

  const Vector dW = Vector::Zero(sys.diffusion.cols());
  for (int s = 0; s < 200; ++s) {
    const Vector u =
        extended_control(sys, f.mf.Pi0, f.mf.s0, f.p.R0, st.xhat);
    const Vector dy = sys.observation * x * dt;
    CHECK(innovation_of(st, dy, dt, sys).dnu.norm() <= 1e-16);
    x = advance_truth(sys, x, u, dt, dW);
    st = major_filter_step(st, dy, dt, sys, f.mf.Pi0, f.mf.s0, f.p.R0,
                           gains);
  }
  CHECK((st.xhat - x).norm() <= 1e-13 * (1.0 + x.norm()));
  CHECK(st.t == doctest::Approx(2.0));
}

TEST_CASE("estimation error is unbiased on the reference scenario") {
  const auto& f = fixture();
  const double dt = 0.01;
  const int steps = 2000;
  const int paths = 48;
  const int n = f.p.n;
  const ExtendedSystem& sys = f.major_sys;

  const auto trajs = integrate_coupled_covariances(
      sys, f.stat.error_system, initial_major_covariance(f.p),
      initial_error_covariance(f.p), dt, steps * dt);
  const GainSchedule gains(trajs.first);

  const double sqdt = std::sqrt(dt);
  Matrix path_means(paths, n);
  for (int pth = 0; pth < paths; ++pth) {
    GaussianStream ws(31, pth, NoiseSource::MajorProcess);
    GaussianStream vs(31, pth, NoiseSource::MajorMeasurement);
    Vector x = Vector::Zero(sys.dim());
    auto st = make_major_filter(x, gains);
    Vector acc = Vector::Zero(n);
    for (int s = 0; s < steps; ++s) {
      const Vector u =
          extended_control(sys, f.mf.Pi0, f.mf.s0, f.p.R0, st.xhat);
      Vector dW = Vector::Zero(sys.diffusion.cols());
      dW.head(f.p.r0()) = sqdt * ws.normals(s, f.p.r0());
      const Vector dy = sys.observation * x * dt +
                        f.p.sigma_v0 * (sqdt * vs.normals(s, f.p.p0()));
      x = advance_truth(sys, x, u, dt, dW);
      st = major_filter_step(st, dy, dt, sys, f.mf.Pi0, f.mf.s0, f.p.R0,
                             gains);
      acc += (x - st.xhat).head(n);
    }
    path_means.row(pth) = (acc / steps).transpose();
  }

  for (int c = 0; c < n; ++c) {
    const double mean = path_means.col(c).mean();
    const double sd = std::sqrt(
        (path_means.col(c).array() - mean).square().sum() / (paths - 1));
    CHECK(std::abs(mean) <= 3.0 * sd / std::sqrt(double(paths)) + 1e-12);
  }
}

TEST_CASE("minor filter tracks the noiseless embedded loop") {
  const auto& f = fixture();
  const ExtendedSystem& sys = f.stat.minor_systems[0];
  const Matrix& Pik = f.mf.Pik[0];
  const Vector& sk = f.mf.sk[0];
  const double dt = 0.01;
  const int n = f.p.n;

  Vector z(sys.dim());
  z << 0.3, -0.2, 0.5, 0.1, 0.4, 0.0, 0.5, 0.1, 0.4, 0.0;

  SUBCASE("zero noise, exact initialization") {
    const GainSchedule gains(f.stat.Kk[0], f.stat.Vk[0]);
    auto st = make_minor_filter(0, 7, z, gains);
    CHECK(st.type == 0);
    CHECK(st.agent_id == 7);

    Vector x = z;
    const Vector dW = Vector::Zero(sys.diffusion.cols());
    for (int s = 0; s < 150; ++s) {
      const Vector u = extended_control(sys, Pik, sk, f.p.R, st.xhat);
      const Vector dy = sys.observation * x * dt;
      x = advance_truth(sys, x, u, dt, dW);
      st = minor_filter_step(st, dy, dt, sys, Pik, sk, f.p.R, gains);
    }
    CHECK((st.xhat - x).norm() <= 1e-12 * (1.0 + x.norm()));
    // Under zero noise the embedded major filter is exact, so the truth's
    // iterated blocks stay glued to the major blocks they estimate.
    CHECK((x.segment(n, n) - x.segment(2 * n + n * f.p.K, n)).norm() <=
          1e-12);
  }

  SUBCASE("zero gain is open-loop propagation of the extended drift") {
    const GainSchedule zg(Matrix::Zero(sys.dim(), f.p.p()),
                          Matrix::Zero(sys.dim(), sys.dim()));
    auto st = make_minor_filter(0, 1, z, zg);
    const auto next = minor_filter_step(
        st, Vector::Constant(f.p.p(), 0.3), dt, sys,
        Matrix::Zero(sys.dim(), sys.dim()), Vector::Zero(sys.dim()), f.p.R,
        zg);
    const Vector expected = z + (sys.drift * z + sys.offset) * dt;
    CHECK((next.xhat - expected).norm() <= 1e-15);
  }
}

TEST_CASE("embedded filter matches the stacked two-block recursion") {
  // Decouple the mean field (zero cost couplings, zero targets, G = 0) and
  // blind the minor to its own state; what remains of the minor filter on
  // the (major, major-estimate) blocks is the stacked two-block recursion
  // with drift [[A0, -B0*L], [0, A0 - B0*L]]. The closed loop carries the
  // major innovation as an exogenous noise channel, so the K0*H0 data
  // update lives in the gain path, never in the drift; the expanded-drift
  // standalone recursion coincides with it exactly when K0*H0 = 0.
  GameParameters p = reference_parameters();
  p.H0.setZero();
  p.H1.setZero();
  p.H2.setZero();
  p.eta0.setZero();
  p.eta.setZero();
  p.G.setZero();
  p.l1[0].setZero();

  const int n = p.n;
  const int dM = p.dim_major_ex();
  auto mf = solve_fixed_point(p);
  REQUIRE(mf.converged);

  // The decoupled scenario makes these blocks zero in exact arithmetic;
  // scrub the solver dust so the block structure is exact.
  Matrix Pi0 = mf.Pi0;
  Pi0.topRightCorner(n, dM - n).setZero();
  Pi0.bottomLeftCorner(dM - n, n).setZero();
  REQUIRE((Pi0 - mf.Pi0).norm() <= 1e-10);

  const auto stat = solve_stationary_covariances(p, mf.coefficients, Pi0,
                                                 mf.s0);
  Matrix K0full = stat.K0;
  K0full.bottomRows(dM - n).setZero();
  REQUIRE((K0full - stat.K0).norm() <= 1e-10 * (1.0 + stat.K0.norm()));

  const auto loop =
      build_major_closed_loop(p, mf.coefficients, Pi0, mf.s0, K0full);
  const auto minor_sys = build_minor_extended(p, 0, mf.coefficients, loop);

  const Matrix L =
      p.R0.llt().solve(p.B0.transpose() * Pi0.topLeftCorner(n, n));
  const Matrix& Kk = stat.Kk[0];
  const int off1 = n;
  const int off3 = 2 * n + n * p.K;
  Matrix Ki(2 * n, p.p());
  Ki.topRows(n) = Kk.middleRows(off1, n);
  Ki.bottomRows(n) = Kk.middleRows(off3, n);

  const double dt = 0.01;
  const int steps = 1000;
  Vector z0(minor_sys.dim());
  z0 << 0.2, -0.1, 0.6, -0.2, 0.1, 0.3, 0.5, -0.1, 0.0, 0.2;

  EoEInputs in;
  in.dt = dt;
  in.zhat0 = Vector(2 * n);
  in.zhat0 << z0.segment(off1, n), z0.segment(off3, n);
  GaussianStream obs(7, 0, NoiseSource::MinorMeasurement);
  in.dyi.reserve(steps);
  for (int s = 0; s < steps; ++s) in.dyi.push_back(0.01 * obs.normals(s, p.p()));

  Matrix Funexp = Matrix::Zero(2 * n, 2 * n);
  Funexp.topLeftCorner(n, n) = p.A0;
  Funexp.topRightCorner(n, n) = -p.B0 * L;
  Funexp.bottomRightCorner(n, n) = p.A0 - p.B0 * L;
  Matrix Hstack = Matrix::Zero(p.p(), 2 * n);
  Hstack.leftCols(n) = p.l2[0];

  // The same recursion through the standalone operation: zero drift
  // coupling reduces its expanded drift to the two-block form above.
  const auto standalone = estimates_of_estimates_filter(
      p.A0, p.B0, L, p.l0, p.l2[0], Matrix::Zero(n, p.p0()), Ki, in);
  REQUIRE(standalone.size() == std::size_t(steps + 1));

  const GainSchedule gains(Kk, stat.Vk[0]);
  auto st = make_minor_filter(0, 0, z0, gains);
  Vector z = in.zhat0;
  double worst = 0.0, worst_standalone = 0.0;
  for (int s = 0; s < steps; ++s) {
    st = minor_filter_step(st, in.dyi[std::size_t(s)], dt, minor_sys,
                           mf.Pik[0], mf.sk[0], p.R, gains);
    z = oracle::kf_step(z, Funexp, Vector::Zero(2 * n), Hstack, Ki,
                        in.dyi[std::size_t(s)], dt);
    Vector got(2 * n);
    got << st.xhat.segment(off1, n), st.xhat.segment(off3, n);
    worst = std::max(worst, (got - z).norm() / std::max(1.0, z.norm()));
    const Vector& alt = standalone[std::size_t(s) + 1];
    worst_standalone = std::max(
        worst_standalone, (got - alt).norm() / std::max(1.0, alt.norm()));
  }
  CHECK(worst <= 1e-12);
  CHECK(worst_standalone <= 1e-12);
}

TEST_CASE("estimates of estimates filter equals the generic filter") {
  std::mt19937 gen(11);
  const int n = 2;
  const Matrix A0 = oracle::random_matrix(gen, n, n, 0.5);
  const Matrix B = oracle::random_matrix(gen, n, 1, 1.0);
  const Matrix L = oracle::random_matrix(gen, 1, n, 0.6);
  const Matrix H0 = oracle::random_matrix(gen, 1, n, 1.0);
  const Matrix K0 = oracle::random_matrix(gen, n, 1, 0.4);
  const Matrix Ki = oracle::random_matrix(gen, 2 * n, 2, 0.3);
  const Matrix Hi = oracle::random_matrix(gen, 2, n, 1.0);

  EoEInputs in;
  in.dt = 0.01;
  in.zhat0 = oracle::random_matrix(gen, 2 * n, 1, 1.0);
  for (int s = 0; s < 300; ++s)
    in.dyi.push_back(0.05 * oracle::random_matrix(gen, 2, 1, 1.0));

  const auto out =
      estimates_of_estimates_filter(A0, B, L, H0, Hi, K0, Ki, in);
  REQUIRE(out.size() == 301);

  const Matrix F = stacked_closed_loop_drift(A0, B, L, H0, K0);
  CHECK((F.topLeftCorner(n, n) - A0).norm() == 0.0);
  CHECK((F.topRightCorner(n, n) + B * L).norm() == 0.0);
  CHECK((F.bottomLeftCorner(n, n) - K0 * H0).norm() == 0.0);
  CHECK((F.bottomRightCorner(n, n) - (A0 - B * L - K0 * H0)).norm() == 0.0);

  Matrix Hstack = Matrix::Zero(2, 2 * n);
  Hstack.leftCols(n) = Hi;
  Vector z = in.zhat0;
  for (int s = 0; s < 300; ++s) {
    z = oracle::kf_step(z, F, Vector::Zero(2 * n), Hstack, Ki,
                        in.dyi[std::size_t(s)], in.dt);
    CHECK((z - out[std::size_t(s) + 1]).norm() <=
          1e-14 * (1.0 + z.norm()));
  }

  SUBCASE("zero coupling degenerates to twin open-loop filters") {
    Matrix Kdup(2 * n, 2);
    Kdup.topRows(n) = Ki.topRows(n);
    Kdup.bottomRows(n) = Ki.topRows(n);
    EoEInputs twin = in;
    twin.zhat0.tail(n) = twin.zhat0.head(n);
    const auto tw = estimates_of_estimates_filter(
        A0, B, Matrix::Zero(1, n), H0, Hi, Matrix::Zero(n, 1), Kdup, twin);
    for (const auto& v : tw)
      CHECK((v.head(n) - v.tail(n)).norm() <= 1e-14 * (1.0 + v.norm()));
  }

  SUBCASE("dimension guards") {
    EoEInputs bad = in;
    bad.zhat0 = Vector::Zero(2 * n + 1);
    CHECK_THROWS_AS(
        estimates_of_estimates_filter(A0, B, L, H0, Hi, K0, Ki, bad),
        DimensionMismatch);
    CHECK_THROWS_AS(estimates_of_estimates_filter(A0, B, L, H0, Hi,
                                                  Matrix::Zero(n, 3), Ki, in),
                    DimensionMismatch);
  }
}

TEST_CASE("estimates of estimates recover both components as noise shrinks") {
  const int n = 2;
  Matrix A0(n, n);
  A0 << -0.4, 0.8, -0.8, -0.4;
  Matrix B(n, 1);
  B << 1.0, 0.5;
  Matrix L(1, n);
  L << 0.6, 0.2;
  const Matrix H0 = Matrix::Identity(n, n);
  REQUIRE(is_hurwitz(A0 - B * L));

  const double sw = 0.05, sv0 = 1e-3;
  const Matrix Qw = sw * sw * Matrix::Identity(n, n);
  const Matrix Rv0 = sv0 * sv0 * Matrix::Identity(n, n);
  const Matrix V0 = solve_filter_care(A0, H0, Qw, Rv0);
  const Matrix K0 = filter_gain(V0, H0, Rv0);

  // Stacked truth: the estimate block is driven by the residual K0*dv0
  // once the K0*H0 data update is folded into the expanded drift.
  const Matrix F = stacked_closed_loop_drift(A0, B, L, H0, K0);
  Matrix Qstack = Matrix::Zero(2 * n, 2 * n);
  Qstack.topLeftCorner(n, n) = Qw;
  Qstack.bottomRightCorner(n, n) = K0 * Rv0 * K0.transpose();
  Matrix Hstack = Matrix::Zero(n, 2 * n);
  Hstack.leftCols(n) = Matrix::Identity(n, n);

  const double dt = 0.005;
  const int steps = 3000;
  const int paths = 6;
  const int skip = 1000;
  const double sqdt = std::sqrt(dt);

  struct LevelResult {
    double mse_top, mse_bot;      // Monte Carlo, time-and-path averaged
    double pred_top, pred_bot;    // stationary filter covariance traces
  };

  auto run = [&](double svi) {
    const Matrix Rvi = svi * svi * Matrix::Identity(n, n);
    const Matrix Vst = solve_filter_care(F, Hstack, Qstack, Rvi);
    const Matrix Ki = filter_gain(Vst, Hstack, Rvi);
    REQUIRE(Vst.allFinite());
    REQUIRE(is_hurwitz(F - Ki * Hstack));
    // Explicit scheme stability: the filter recursion contracts only while
    // dt * gain * observation stays inside the Euler stability region.
    REQUIRE(dt * (Ki * Hstack).norm() < 2.0);

    double top = 0.0, bot = 0.0;
    int count = 0;
    for (int pth = 0; pth < paths; ++pth) {
      GaussianStream ws(5, pth, NoiseSource::MajorProcess);
      GaussianStream vs(5, pth, NoiseSource::MajorMeasurement);
      GaussianStream vis(5, pth, NoiseSource::MinorMeasurement);

      Vector x0(n), xhat0 = Vector::Zero(n);
      x0 << 0.5, -0.3;
      EoEInputs in;
      in.dt = dt;
      in.zhat0 = Vector::Zero(2 * n);
      std::vector<Vector> truth;
      truth.reserve(steps);
      for (int s = 0; s < steps; ++s) {
        const Vector u0 = -L * xhat0;
        const Vector dy0 = H0 * x0 * dt + sv0 * (sqdt * vs.normals(s, n));
        const Vector dyi = x0 * dt + svi * (sqdt * vis.normals(s, n));
        in.dyi.push_back(dyi);
        const Vector x0n =
            x0 + (A0 * x0 + B * u0) * dt + sw * (sqdt * ws.normals(s, n));
        xhat0 += (A0 * xhat0 + B * u0) * dt + K0 * (dy0 - H0 * xhat0 * dt);
        x0 = x0n;
        Vector z(2 * n);
        z << x0, xhat0;
        truth.push_back(z);
      }
      const auto est = estimates_of_estimates_filter(
          A0, B, L, H0, Matrix::Identity(n, n), K0, Ki, in);
      for (int s = skip; s < steps; ++s) {
        const Vector d = est[std::size_t(s) + 1] - truth[std::size_t(s)];
        REQUIRE(d.allFinite());
        top += d.head(n).squaredNorm();
        bot += d.tail(n).squaredNorm();
        ++count;
      }
    }
    LevelResult r;
    r.mse_top = top / count;
    r.mse_bot = bot / count;
    r.pred_top = Vst.topLeftCorner(n, n).trace();
    r.pred_bot = Vst.bottomRightCorner(n, n).trace();
    return r;
  };

  const auto coarse = run(1e-2);
  const auto fine = run(1e-3);

  // The design must predict recovery of both components before the Monte
  // Carlo run is asked to confirm it.
  REQUIRE(fine.pred_top < 0.25 * coarse.pred_top);
  REQUIRE(fine.pred_bot < coarse.pred_bot);

  for (const auto& r : {coarse, fine}) {
    CHECK(r.mse_top > 0.4 * r.pred_top);
    CHECK(r.mse_top < 2.5 * r.pred_top);
    CHECK(r.mse_bot > 0.4 * r.pred_bot);
    CHECK(r.mse_bot < 2.5 * r.pred_bot);
  }
  CHECK(fine.mse_top < coarse.mse_top);
  CHECK(fine.mse_bot < coarse.mse_bot);
}

TEST_CASE("reconstructed major control") {
  const auto& f = fixture();
  const int n = f.p.n;
  const int dM = f.p.dim_major_ex();
  const GainSchedule gains(f.stat.Kk[0], f.stat.Vk[0]);

  SUBCASE("zero iterated blocks and zero offset give zero control") {
    auto st = make_minor_filter(0, 0, Vector::Zero(f.p.dim_minor_ex()),
                                gains);
    const Vector u = estimate_major_control(st, f.major_sys, f.mf.Pi0,
                                            Vector::Zero(dM), f.p.R0);
    CHECK(u.norm() == 0.0);
  }

  SUBCASE("matches the major's own control on identical blocks") {
    Vector w(dM);
    w << 0.3, -0.2, 0.15, 0.4;
    Vector z = Vector::Zero(f.p.dim_minor_ex());
    z.segment(n + dM, dM) = w;
    auto st = make_minor_filter(0, 0, z, gains);
    const Vector via_minor =
        estimate_major_control(st, f.major_sys, f.mf.Pi0, f.mf.s0, f.p.R0);
    const Vector direct =
        extended_control(f.major_sys, f.mf.Pi0, f.mf.s0, f.p.R0, w);
    CHECK((via_minor - direct).norm() <= 1e-16);
  }

  SUBCASE("reconstruction tracks the joint error moments") {
    // Sharper own-state observations do NOT sharpen the reconstructed major
    // control. The minor filter is designed against a model that carries the
    // averaged error as an independent white input; as R_v shrinks that
    // design inflates the iterated-estimate rows of the gain, and the
    // reconstruction error tr(W Sigma_iter W^T) grows even while the direct
    // estimates (own state, major state) recover monotonically. The joint
    // moment recursion reproduces the simulated closed loop exactly, so the
    // Monte Carlo runs are gated against it instead of a monotonicity folk
    // theorem, and the inversion itself is pinned deterministically.
    const double dt = 0.01;
    const int steps = 1500;
    const int skip = 500;
    const int paths = 12;
    const double sqdt = std::sqrt(dt);

    std::vector<double> marks;
    for (int s = skip; s < steps; ++s) marks.push_back((s + 1) * dt);

    struct Level {
      double mc_mse, mc_own, mc_x0;
      double or_mse, or_own, or_x0;
    };
    std::vector<Level> lv;

    for (const double sv : {3e-2, 3e-3, 3e-4}) {
      GameParameters q = f.p;
      q.sigma_v = sv * Matrix::Identity(q.p(), q.p());
      // Certainty equivalence: the control-side fixed point is shared
      // across noise levels, only the covariances move.
      const auto stat = solve_stationary_covariances(
          q, f.mf.coefficients, f.mf.Pi0, f.mf.s0);
      const auto major_sys = build_major_extended(q, f.mf.coefficients);
      const ExtendedSystem& minor_sys = stat.minor_systems[0];
      const ExtendedSystem& err_sys = stat.error_system;

      const auto trajs = integrate_coupled_covariances(
          major_sys, err_sys, initial_major_covariance(q),
          initial_error_covariance(q), dt, steps * dt);
      const auto vk = integrate_minor_filter_riccati(
          minor_sys, trajs.second, initial_minor_covariance(q), dt,
          steps * dt);
      const GainSchedule g0(trajs.first);
      const GainSchedule gk(vk);

      const auto joint = oracle::joint_error_covariance(
          q, major_sys, err_sys, minor_sys, trajs.first, vk, dt, marks);
      const Matrix W = q.R0.llt().solve(
          Matrix(major_sys.control.transpose() * f.mf.Pi0));
      const int off = joint.dM + joint.dE;
      const int it = 2 * n + n * q.K;
      Level L{0, 0, 0, 0, 0, 0};
      for (const Matrix& S : joint.at_marks) {
        L.or_mse +=
            (W * S.block(off + it, off + it, dM, dM) * W.transpose()).trace();
        L.or_own += S.block(off, off, n, n).trace();
        L.or_x0 += S.block(off + n, off + n, n, n).trace();
      }
      L.or_mse /= double(marks.size());
      L.or_own /= double(marks.size());
      L.or_x0 /= double(marks.size());
      REQUIRE(std::isfinite(L.or_mse));

      double acc = 0.0, acc_own = 0.0, acc_x0 = 0.0;
      int count = 0;
      for (int pth = 0; pth < paths; ++pth) {
        GaussianStream w0(11, pth, NoiseSource::MajorProcess);
        GaussianStream v0(11, pth, NoiseSource::MajorMeasurement);
        GaussianStream wi(11, pth, NoiseSource::MinorProcess, 0, 0);
        GaussianStream vi(11, pth, NoiseSource::MinorMeasurement, 0, 0);

        Vector xM = Vector::Zero(dM);
        Vector ebar = Vector::Zero(err_sys.dim());
        auto stM = make_major_filter(Vector::Zero(dM), g0);
        Vector xi = Vector::Zero(n);
        Vector zm = Vector::Zero(f.p.dim_minor_ex());
        auto stm = make_minor_filter(0, 0, zm, gk);

        for (int s = 0; s < steps; ++s) {
          const Vector u0 =
              extended_control(major_sys, f.mf.Pi0, f.mf.s0, q.R0, stM.xhat);
          const Vector ui =
              extended_control(minor_sys, f.mf.Pik[0], f.mf.sk[0], q.R,
                               stm.xhat);
          const Vector dW0 = sqdt * w0.normals(s, q.r0());
          const Vector dy0 =
              major_sys.observation * xM * dt +
              q.sigma_v0 * (sqdt * v0.normals(s, q.p0()));
          const Vector dnu0 = dy0 - major_sys.observation * stM.xhat * dt;
          const Vector dyi = minor_sys.observation * zm * dt +
                             q.sigma_v * (sqdt * vi.normals(s, q.p()));

          xi += (q.A[0] * xi + q.B[0] * ui + q.G * xM.head(n)) * dt +
                q.D * (sqdt * wi.normals(s, q.r()));
          Vector dW = Vector::Zero(major_sys.diffusion.cols());
          dW.head(q.r0()) = dW0;
          // Truth carries the averaged-error injection; the stack itself is
          // fed by the shared major process noise and the major innovation.
          xM = advance_truth(major_sys, xM, u0, dt, dW) +
               major_sys.error_injection * ebar * dt;
          ebar += err_sys.drift * ebar * dt +
                  err_sys.diffusion.middleCols(q.r(), q.r0()) * dW0 +
                  err_sys.diffusion.rightCols(q.p0()) * dnu0;
          stM = major_filter_step(stM, dy0, dt, major_sys, f.mf.Pi0,
                                  f.mf.s0, q.R0, g0);
          stm = minor_filter_step(stm, dyi, dt, minor_sys, f.mf.Pik[0],
                                  f.mf.sk[0], q.R, gk);
          zm << xi, xM, stM.xhat;

          if (s >= skip) {
            const Vector u0_now = extended_control(major_sys, f.mf.Pi0,
                                                   f.mf.s0, q.R0, stM.xhat);
            const Vector u0_hat = estimate_major_control(
                stm, major_sys, f.mf.Pi0, f.mf.s0, q.R0);
            acc += (u0_hat - u0_now).squaredNorm();
            acc_own += (zm.head(n) - stm.xhat.head(n)).squaredNorm();
            acc_x0 += (zm.segment(n, n) - stm.xhat.segment(n, n))
                          .squaredNorm();
            ++count;
          }
        }
      }
      L.mc_mse = acc / count;
      L.mc_own = acc_own / count;
      L.mc_x0 = acc_x0 / count;
      lv.push_back(L);
    }

    // Design pins: direct estimation recovers, reconstruction inverts.
    REQUIRE(lv[1].or_own < lv[0].or_own);
    REQUIRE(lv[2].or_own < lv[1].or_own);
    REQUIRE(lv[2].or_x0 < lv[0].or_x0);
    REQUIRE(lv[2].or_mse > 1.5 * lv[0].or_mse);

    for (const Level& L : lv) {
      CHECK(L.mc_mse > 0.6 * L.or_mse);
      CHECK(L.mc_mse < 1.4 * L.or_mse);
    }
    CHECK(lv[1].mc_own < lv[0].mc_own);
    CHECK(lv[2].mc_own < lv[1].mc_own);
    CHECK(lv[2].mc_x0 < lv[0].mc_x0);
    CHECK(lv[2].mc_mse > lv[0].mc_mse);
  }
}

TEST_CASE("orthogonality, whiteness, and covariance consistency") {
  // The filter invariants (error orthogonal to estimate, white innovations,
  // sample covariance equal to the integrated V0) are exact statements
  // about the model the filter is designed for, in which the averaged-error
  // input is an independent white disturbance with intensity Vbar(t). This
  // run simulates that matched model: the truth is driven through the
  // injection map by a fresh white source shaped by Vbar(t)^(1/2). The
  // faithfully coupled truth, where the stack is colored and correlated
  // with the filter error, is exercised in the next case.
  const auto& f = fixture();
  const double dt = 0.0025;
  const int steps = 2000;
  const int paths = 1000;
  const int d = f.major_sys.dim();
  const int dE = f.stat.error_system.dim();
  const ExtendedSystem& sys = f.major_sys;

  const auto trajs = integrate_coupled_covariances(
      sys, f.stat.error_system, initial_major_covariance(f.p),
      initial_error_covariance(f.p), dt, steps * dt);
  const GainSchedule gains(trajs.first);
  const double sqdt = std::sqrt(dt);

  std::vector<Matrix> sqrtVb;
  sqrtVb.reserve(steps);
  for (int s = 0; s < steps; ++s) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(trajs.second.value_at(s * dt));
    sqrtVb.push_back(es.eigenvectors() *
                     es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
                     es.eigenvectors().transpose());
  }

  Matrix errs(paths, d), ests(paths, d);
  Matrix nu1(paths, f.p.p0()), nu2(paths, f.p.p0());
  for (int pth = 0; pth < paths; ++pth) {
    GaussianStream ws(47, pth, NoiseSource::MajorProcess);
    GaussianStream vs(47, pth, NoiseSource::MajorMeasurement);
    GaussianStream es(47, pth, NoiseSource::MinorProcess);
    Vector x = Vector::Zero(d);
    auto st = make_major_filter(x, gains);
    for (int s = 0; s < steps; ++s) {
      const Vector u =
          extended_control(sys, f.mf.Pi0, f.mf.s0, f.p.R0, st.xhat);
      Vector dW = Vector::Zero(sys.diffusion.cols());
      dW.head(f.p.r0()) = sqdt * ws.normals(s, f.p.r0());
      const Vector dy = sys.observation * x * dt +
                        f.p.sigma_v0 * (sqdt * vs.normals(s, f.p.p0()));
      if (s == 999) nu1.row(pth) = innovation_of(st, dy, dt, sys).dnu;
      if (s == 1000) nu2.row(pth) = innovation_of(st, dy, dt, sys).dnu;
      x = advance_truth(sys, x, u, dt, dW) +
          sys.error_injection * (sqrtVb[std::size_t(s)] *
                                 (sqdt * es.normals(s, dE)));
      st = major_filter_step(st, dy, dt, sys, f.mf.Pi0, f.mf.s0, f.p.R0,
                             gains);
    }
    errs.row(pth) = (x - st.xhat).transpose();
    ests.row(pth) = st.xhat.transpose();
  }

  SUBCASE("estimation error is orthogonal to the estimate") {
    for (int a = 0; a < d; ++a) {
      for (int b = 0; b < d; ++b) {
        const Eigen::ArrayXd prod =
            errs.col(a).array() * ests.col(b).array();
        const double mean = prod.mean();
        const double cross =
            mean - errs.col(a).mean() * ests.col(b).mean();
        const double se = std::sqrt((prod - mean).square().sum() /
                                    (paths - 1) / paths);
        CHECK(std::abs(cross) <= 4.0 * se + 1e-15);
      }
    }
  }

  SUBCASE("innovation increments are uncorrelated at lag one") {
    for (int c = 0; c < f.p.p0(); ++c) {
      const Eigen::ArrayXd a = nu1.col(c).array() - nu1.col(c).mean();
      const Eigen::ArrayXd b = nu2.col(c).array() - nu2.col(c).mean();
      const double r =
          (a * b).sum() / std::sqrt(a.square().sum() * b.square().sum());
      CHECK(std::abs(r) <= 4.0 / std::sqrt(double(paths)));
    }
  }

  SUBCASE("sample error covariance matches the integrated covariance") {
    Matrix centered = errs.rowwise() - errs.colwise().mean();
    const Matrix sample = centered.transpose() * centered / (paths - 1);
    const Matrix& model = trajs.first.value_at(steps * dt);
    CHECK((sample - model).norm() <= 0.15 * model.norm());

    // Bias-free reference: the covariance map of the discrete recursion the
    // paths actually step, so the residual is Monte Carlo noise only.
    const Matrix Rv0 = f.p.sigma_v0 * f.p.sigma_v0.transpose();
    const Matrix Qw0 =
        sys.diffusion.leftCols(f.p.r0()) *
        sys.diffusion.leftCols(f.p.r0()).transpose();
    Matrix P = initial_major_covariance(f.p);
    const Matrix I = Matrix::Identity(d, d);
    for (int s = 0; s < steps; ++s) {
      const Matrix& K0 = trajs.first.gain_at(s * dt);
      const Matrix Phi = I + dt * (sys.drift - K0 * sys.observation);
      const Matrix Vb = trajs.second.value_at(s * dt);
      const Matrix Qd = Qw0 + K0 * Rv0 * K0.transpose() +
                        sys.error_injection * Vb *
                            sys.error_injection.transpose();
      P = Phi * P * Phi.transpose() + dt * Qd;
      P = 0.5 * (P + P.transpose());
    }
    CHECK((sample - P).norm() <= 0.10 * P.norm());
  }
}

TEST_CASE("coupled truth against the joint moment recursion") {
  // Faithful closed loop: the averaged-error stack is co-simulated, fed by
  // the shared major process noise and the major innovation, so the
  // injected disturbance is colored and correlated with the filter error.
  // The joint moment recursion keeps those cross terms and must match the
  // sample moments; the integrated V0, which models the stack as an
  // independent white input, is measurably conservative on the unobserved
  // rows. The matched-model frame for the 15 percent invariant lives in the
  // previous case; here the convention gap itself is pinned.
  const auto& f = fixture();
  const double dt = 0.005;
  const int steps = 1000;
  const int paths = 400;
  const int win = 200;
  const int d = f.major_sys.dim();
  const ExtendedSystem& sys = f.major_sys;
  const ExtendedSystem& err_sys = f.stat.error_system;
  const ExtendedSystem& minor_sys = f.stat.minor_systems[0];

  const auto trajs = integrate_coupled_covariances(
      sys, err_sys, initial_major_covariance(f.p),
      initial_error_covariance(f.p), dt, steps * dt);
  const auto vk = integrate_minor_filter_riccati(
      minor_sys, trajs.second, initial_minor_covariance(f.p), dt, steps * dt);
  const GainSchedule gains(trajs.first);
  const double sqdt = std::sqrt(dt);

  std::vector<double> marks;
  for (int s = steps - win; s < steps; ++s) marks.push_back((s + 1) * dt);
  const auto joint = oracle::joint_error_covariance(
      f.p, sys, err_sys, minor_sys, trajs.first, vk, dt, marks);
  Matrix Sref = Matrix::Zero(d, d);
  for (const Matrix& S : joint.at_marks) Sref += S.topLeftCorner(d, d);
  Sref /= double(marks.size());

  Matrix Smc = Matrix::Zero(d, d);
  for (int pth = 0; pth < paths; ++pth) {
    GaussianStream ws(53, pth, NoiseSource::MajorProcess);
    GaussianStream vs(53, pth, NoiseSource::MajorMeasurement);
    Vector x = Vector::Zero(d);
    Vector ebar = Vector::Zero(err_sys.dim());
    auto st = make_major_filter(x, gains);
    for (int s = 0; s < steps; ++s) {
      const Vector u =
          extended_control(sys, f.mf.Pi0, f.mf.s0, f.p.R0, st.xhat);
      const Vector dW0 = sqdt * ws.normals(s, f.p.r0());
      const Vector dy = sys.observation * x * dt +
                        f.p.sigma_v0 * (sqdt * vs.normals(s, f.p.p0()));
      const Vector dnu0 = dy - sys.observation * st.xhat * dt;
      Vector dW = Vector::Zero(sys.diffusion.cols());
      dW.head(f.p.r0()) = dW0;
      x = advance_truth(sys, x, u, dt, dW) +
          sys.error_injection * ebar * dt;
      ebar += err_sys.drift * ebar * dt +
              err_sys.diffusion.middleCols(f.p.r(), f.p.r0()) * dW0 +
              err_sys.diffusion.rightCols(f.p.p0()) * dnu0;
      st = major_filter_step(st, dy, dt, sys, f.mf.Pi0, f.mf.s0, f.p.R0,
                             gains);
      if (s >= steps - win) {
        const Vector e = x - st.xhat;
        Smc += e * e.transpose();
      }
    }
  }
  Smc /= double(paths) * double(win);

  CHECK((Smc - Sref).norm() <= 0.10 * Sref.norm());

  // Convention pins, deterministic: a fine-step recursion against the
  // integrated V0. The observed block agrees, the unobserved rows of V0
  // upper-bound the true moments, and the overall gap sits well outside
  // the matched-model tolerance but is bounded.
  const double dtf = 1e-3;
  const auto trajsf = integrate_coupled_covariances(
      sys, err_sys, initial_major_covariance(f.p),
      initial_error_covariance(f.p), dtf, 5.0);
  const auto vkf = integrate_minor_filter_riccati(
      minor_sys, trajsf.second, initial_minor_covariance(f.p), dtf, 5.0);
  const auto jf = oracle::joint_error_covariance(
      f.p, sys, err_sys, minor_sys, trajsf.first, vkf, dtf, {5.0});
  const Matrix Sx = jf.at_marks[0].topLeftCorner(d, d);
  const Matrix& V0p = trajsf.first.value_at(5.0);
  const int n = f.p.n;
  REQUIRE((Sx.topLeftCorner(n, n) - V0p.topLeftCorner(n, n)).norm() <=
          0.05 * V0p.topLeftCorner(n, n).norm());
  for (int i = n; i < d; ++i) REQUIRE(Sx(i, i) <= V0p(i, i));
  const double gap = (Sx - V0p).norm() / V0p.norm();
  REQUIRE(gap > 0.12);
  REQUIRE(gap < 0.5);
}

TEST_CASE("stale gain detection") {
  const auto& f = fixture();
  const auto trajs = integrate_coupled_covariances(
      f.major_sys, f.stat.error_system, initial_major_covariance(f.p),
      initial_error_covariance(f.p), 0.01, 1.0);
  const GainSchedule gains(trajs.first);
  const int d = f.major_sys.dim();

  auto step_at = [&](double t) {
    auto st = make_major_filter(Vector::Zero(d), gains);
    st.t = t;
    return major_filter_step(st, Vector::Zero(f.p.p0()), 0.01, f.major_sys,
                             f.mf.Pi0, f.mf.s0, f.p.R0, gains);
  };

  CHECK_THROWS_AS(step_at(1.0), StaleGain);   // refresh lands past the grid
  CHECK_THROWS_AS(step_at(-0.5), StaleGain);
  CHECK_THROWS_AS(step_at(1.25), StaleGain);
  CHECK_NOTHROW(step_at(0.304));  // within dt/2 of a grid point
  CHECK_NOTHROW(step_at(0.98));

  // Finer stepping than the gain grid rides piecewise-constant gains.
  auto st = make_major_filter(Vector::Zero(d), gains);
  for (int s = 0; s < 10; ++s)
    st = major_filter_step(st, Vector::Zero(f.p.p0()), 0.002, f.major_sys,
                           f.mf.Pi0, f.mf.s0, f.p.R0, gains);
  CHECK(st.t == doctest::Approx(0.02));
}

TEST_CASE("no average-error feedback inside the filters") {
  // The error-injection map is already nonzero in the reference scenario,
  // because the feedback gains couple every agent to the averaged error;
  // the direct state coupling added here only enlarges it. Either way the
  // filter recursions must never read it: the estimate rows of the closed
  // loop carry no injection, and perturbing the map leaves a filter step
  // untouched.
  GameParameters p = reference_parameters();
  p.G = 0.1 * Matrix::Identity(p.n, p.n);
  const auto mf = solve_fixed_point(p);
  REQUIRE(mf.converged);
  REQUIRE(mf.coefficients.Jbar.cwiseAbs().maxCoeff() > 0.0);

  const auto stat =
      solve_stationary_covariances(p, mf.coefficients, mf.Pi0, mf.s0);
  const int dM = p.dim_major_ex();
  CHECK(stat.major_loop.error_injection.bottomRows(dM).isZero(0.0));

  const auto major_sys = build_major_extended(p, mf.coefficients);
  ExtendedSystem tampered = major_sys;
  tampered.error_injection =
      major_sys.error_injection +
      Matrix::Constant(major_sys.error_injection.rows(),
                       major_sys.error_injection.cols(), 5.0);

  const GainSchedule gains(stat.K0, stat.V0);
  Vector x0(dM);
  x0 << 0.2, -0.4, 0.1, 0.3;
  auto st = make_major_filter(x0, gains);
  const Vector dy = Vector::Constant(p.p0(), 0.05);
  const auto a =
      major_filter_step(st, dy, 0.01, major_sys, mf.Pi0, mf.s0, p.R0, gains);
  const auto b =
      major_filter_step(st, dy, 0.01, tampered, mf.Pi0, mf.s0, p.R0, gains);
  CHECK((a.xhat - b.xhat).norm() == 0.0);
}
