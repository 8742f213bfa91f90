#include "mmlqg/reference.hpp"

namespace mmlqg {

GameParameters reference_parameters() {
  GameParameters p;
  p.n = 2;
  p.m = 1;
  p.K = 1;

  p.A0 = Matrix(2, 2);
  p.A0 << -1.0, -1.0, 1.0, 0.0;
  p.B0 = Matrix(2, 1);
  p.B0 << 1.0, 0.0;

  Matrix A(2, 2);
  A << -0.05, -2.0, 1.0, 0.0;
  Matrix B(2, 1);
  B << 1.0, 0.0;
  p.A = {A};
  p.B = {B};

  p.Q0 = Matrix::Identity(2, 2);
  p.Q = Matrix::Identity(2, 2);
  p.R0 = Matrix::Identity(1, 1);
  p.R = Matrix::Identity(1, 1);
  p.H0 = 0.6 * Matrix::Identity(2, 2);
  p.H1 = 0.6 * Matrix::Identity(2, 2);
  p.H2 = 0.6 * Matrix::Identity(2, 2);
  p.eta0 = Vector::Constant(2, 0.25);
  p.eta = Vector::Constant(2, 0.25);
  p.rho = 0.9;
  p.sigma_init = 0.0;

  apply_default_shapes(p, /*sigma_w0=*/0.009, /*sigma_w=*/0.009,
                       /*sigma_v0=*/0.0003, /*sigma_v=*/0.0003);
  return p;
}

}  // namespace mmlqg
