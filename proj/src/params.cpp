#include "mmlqg/params.hpp"

#include <cmath>
#include <sstream>

namespace mmlqg {
namespace {

void check_shape(const Matrix& m, int rows, int cols, const std::string& name) {
  if (m.rows() != rows || m.cols() != cols) {
    std::ostringstream os;
    os << name << " must be " << rows << "x" << cols << ", got " << m.rows()
       << "x" << m.cols();
    throw AssumptionError(os.str());
  }
}

bool is_symmetric(const Matrix& m, double tol = 1e-12) {
  return (m - m.transpose()).cwiseAbs().maxCoeff() <=
         tol * (1.0 + m.cwiseAbs().maxCoeff());
}

bool is_psd(const Matrix& m, double tol = 1e-10) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(m, Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff() >= -tol * (1.0 + m.norm());
}

bool is_pd(const Matrix& m, double tol = 1e-12) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(m, Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff() > tol;
}

void check_weight(const Matrix& m, const std::string& name, bool strict) {
  if (!is_symmetric(m)) throw AssumptionError(name + " must be symmetric");
  if (strict) {
    if (!is_pd(m)) throw AssumptionError(name + " must be positive definite");
  } else {
    if (!is_psd(m)) throw AssumptionError(name + " must be positive semidefinite");
  }
}

}  // namespace

void apply_default_shapes(GameParameters& params, double sigma_w0,
                          double sigma_w, double sigma_v0, double sigma_v) {
  const int n = params.n;
  if (params.G.size() == 0) params.G = Matrix::Zero(n, n);
  if (params.D0.size() == 0) params.D0 = sigma_w0 * Matrix::Identity(n, n);
  if (params.D.size() == 0) params.D = sigma_w * Matrix::Identity(n, n);
  if (params.l0.size() == 0) params.l0 = Matrix::Identity(n, n);
  if (params.l1.empty() && params.l2.empty()) {
    // Minors observe their own state and the major state on separate rows.
    Matrix own = Matrix::Zero(2 * n, n);
    own.topRows(n) = Matrix::Identity(n, n);
    Matrix maj = Matrix::Zero(2 * n, n);
    maj.bottomRows(n) = Matrix::Identity(n, n);
    params.l1.assign(params.K, own);
    params.l2.assign(params.K, maj);
  }
  if (params.sigma_v0.size() == 0 && params.l0.size() > 0)
    params.sigma_v0 =
        sigma_v0 * Matrix::Identity(params.l0.rows(), params.l0.rows());
  if (params.sigma_v.size() == 0 && !params.l1.empty()) {
    const int p = static_cast<int>(params.l1[0].rows());
    params.sigma_v = sigma_v * Matrix::Identity(p, p);
  }
  if (params.pi.size() == 0)
    params.pi = Vector::Constant(params.K, 1.0 / params.K);
}

bool AssumptionReport::all_passed() const {
  for (const auto& c : checks)
    if (c.checkable && !c.passed) return false;
  return true;
}

std::string AssumptionReport::to_text() const {
  std::ostringstream os;
  for (const auto& c : checks) {
    os << (c.checkable ? (c.passed ? "[pass] " : "[FAIL] ") : "[----] ")
       << c.name;
    if (!c.detail.empty()) os << ": " << c.detail;
    os << "\n";
  }
  return os.str();
}

void validate_structure(const GameParameters& p) {
  if (p.n <= 0) throw AssumptionError("n must be positive");
  if (p.m <= 0) throw AssumptionError("m must be positive");
  if (p.K <= 0) throw AssumptionError("K must be positive");
  if (p.rho < 0) throw AssumptionError("rho must be nonnegative");
  if (p.sigma_init < 0) throw AssumptionError("sigma_init must be nonnegative");

  const int n = p.n, m = p.m;
  check_shape(p.A0, n, n, "A0");
  check_shape(p.B0, n, m, "B0");
  if (p.D0.rows() != n) throw AssumptionError("D0 must have n rows");
  if (static_cast<int>(p.A.size()) != p.K)
    throw AssumptionError("need one A_k per type");
  if (static_cast<int>(p.B.size()) != p.K)
    throw AssumptionError("need one B_k per type");
  for (int k = 0; k < p.K; ++k) {
    check_shape(p.A[k], n, n, "A_" + std::to_string(k + 1));
    check_shape(p.B[k], n, m, "B_" + std::to_string(k + 1));
  }
  if (p.D.rows() != n) throw AssumptionError("D must have n rows");
  check_shape(p.G, n, n, "G");
  check_shape(p.H0, n, n, "H0");
  check_shape(p.H1, n, n, "H1");
  check_shape(p.H2, n, n, "H2");
  if (p.eta0.size() != n) throw AssumptionError("eta0 must have length n");
  if (p.eta.size() != n) throw AssumptionError("eta must have length n");

  check_shape(p.Q0, n, n, "Q0");
  check_shape(p.Q, n, n, "Q");
  check_shape(p.R0, m, m, "R0");
  check_shape(p.R, m, m, "R");
  check_weight(p.Q0, "Q0", /*strict=*/false);
  check_weight(p.Q, "Q", /*strict=*/false);
  check_weight(p.R0, "R0", /*strict=*/true);
  check_weight(p.R, "R", /*strict=*/true);

  if (p.pi.size() != p.K) throw AssumptionError("pi must have length K");
  double sum = 0.0;
  for (int k = 0; k < p.K; ++k) {
    if (p.pi[k] < 0) throw AssumptionError("pi must be nonnegative");
    sum += p.pi[k];
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw AssumptionError("pi must sum to 1");

  if (p.l0.cols() != n) throw AssumptionError("l0 must have n columns");
  if (static_cast<int>(p.l1.size()) != p.K ||
      static_cast<int>(p.l2.size()) != p.K)
    throw AssumptionError("need l1_k and l2_k per type");
  const int pm = p.p();
  for (int k = 0; k < p.K; ++k) {
    check_shape(p.l1[k], pm, n, "l1_" + std::to_string(k + 1));
    check_shape(p.l2[k], pm, n, "l2_" + std::to_string(k + 1));
  }
  if (p.sigma_v0.rows() != p.p0())
    throw AssumptionError("sigma_v0 must have p0 rows");
  if (p.sigma_v.rows() != pm)
    throw AssumptionError("sigma_v must have p rows");
}

AssumptionReport validate(const GameParameters& p) {
  AssumptionReport report;
  auto record = [&](const std::string& name, bool checkable, bool passed,
                    const std::string& detail) {
    report.checks.push_back({name, checkable, passed, detail});
  };

  try {
    validate_structure(p);
    record("parameter shapes and weights", true, true, "");
  } catch (const AssumptionError& e) {
    record("parameter shapes and weights", true, false, e.what());
    return report;
  }

  record("initial states zero-mean with bounded variance", false, true,
         "by construction, sigma_init = " + std::to_string(p.sigma_init));
  record("empirical type distribution converges to pi", true, true,
         "pi on the simplex; finite populations use proportional rounding");
  record("noise processes mutually independent", false, true,
         "by construction of the counter-based substreams");
  record("admissible controls adapted to observation sigma-fields", false,
         true, "controllers only see filter states");
  return report;
}

}  // namespace mmlqg
