#pragma once

#include <string>
#include <vector>

#include "mmlqg/types.hpp"

namespace mmlqg {

// Model data for one major agent and K types of minor agents.
//
//   dx0 = (A0 x0 + B0 u0) dt + D0 dw0
//   dxi = (Ak xi + Bk ui + G x0) dt + D dwi          (type k)
//   dy0 = l0 x0 dt + sigma_v0 dv0
//   dyi = (l1_k xi + l2_k x0) dt + sigma_v dvi
//
// Costs discount at rate rho and track Phi = H0 x^(N) + eta0 (major) and
// Psi = H1 x0 + H2 x^(N) + eta (minor), with weights (Q0, R0) and (Q, R).
struct GameParameters {
  int n = 0;  // minor/major state dimension
  int m = 0;  // control dimension
  int K = 1;  // number of minor types

  // Major agent.
  Matrix A0, B0, D0;
  Matrix Q0, R0, H0;
  Vector eta0;

  // Minor agents: A, B per type; the rest shared across types.
  std::vector<Matrix> A, B;
  Matrix D, G;
  Matrix Q, R, H1, H2;
  Vector eta;

  double rho = 0.0;
  Vector pi;  // empirical type distribution limit, on the simplex

  // Observation maps and measurement noise loadings.
  Matrix l0;                // p0 x n
  std::vector<Matrix> l1;   // p x n per type (own state rows)
  std::vector<Matrix> l2;   // p x n per type (major state rows)
  Matrix sigma_v0;          // p0 x ell0
  Matrix sigma_v;           // p x ell

  double sigma_init = 0.0;  // initial states ~ N(0, sigma_init^2 I)

  // Derived dimensions.
  int r0() const { return static_cast<int>(D0.cols()); }
  int r() const { return static_cast<int>(D.cols()); }
  int p0() const { return static_cast<int>(l0.rows()); }
  int p() const { return static_cast<int>(l1.empty() ? 0 : l1[0].rows()); }
  int dim_major_ex() const { return n + n * K; }        // [x0; xbar]
  int dim_major_loop() const { return 2 * (n + n * K); }
  int dim_minor_ex() const { return 3 * n + 2 * n * K; }
  int dim_error_stack() const { return dim_minor_ex() * K; }

  Matrix Rv0() const { return sigma_v0 * sigma_v0.transpose(); }
  Matrix Rv() const { return sigma_v * sigma_v.transpose(); }
};

// Populates defaulted observation/noise fields for entries left empty,
// mirroring the config-file defaults: identity major observation, stacked
// (own state; major state) minor observation with p = 2n, isotropic noise
// loadings.
void apply_default_shapes(GameParameters& params, double sigma_w0,
                          double sigma_w, double sigma_v0, double sigma_v);

// One assumption check. `checkable` is false for assumptions that are
// satisfied by construction rather than by a numerical test.
struct AssumptionCheck {
  std::string name;
  bool checkable = true;
  bool passed = false;
  std::string detail;
};

struct AssumptionReport {
  std::vector<AssumptionCheck> checks;
  bool all_passed() const;
  std::string to_text() const;
};

// Structural validation: dimensions, symmetry/PSD of the weights, R/R0
// positive definite, pi on the simplex, noise loadings well-formed. Throws
// AssumptionError naming the offending field.
void validate_structure(const GameParameters& params);

// Structural checks as a report instead of a throw.
AssumptionReport validate(const GameParameters& params);

}  // namespace mmlqg
