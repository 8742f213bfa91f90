#include "mmlqg/filters.hpp"

#include <Eigen/Dense>

#include <string>
#include <utility>

namespace mmlqg {

namespace {

void check_filter_inputs(const AgentFilterState& state, const Vector& dy,
                         double dt, const ExtendedSystem& sys,
                         const Matrix& Pi, const Vector& s, const Matrix& R,
                         const char* who) {
  const std::string name(who);
  require(dt > 0.0, name + ": dt must be positive");
  const int d = sys.dim();
  require(state.xhat.size() == d, name + ": estimate dimension");
  require(sys.observation.cols() == d, name + ": observation width");
  require(dy.size() == sys.observation.rows(), name + ": observation rows");
  require(Pi.rows() == d && Pi.cols() == d, name + ": Pi dimension");
  require(s.size() == d, name + ": offset dimension");
  require(R.rows() == sys.control.cols() && R.cols() == R.rows(),
          name + ": control weight dimension");
}

AgentFilterState step_impl(const AgentFilterState& state, const Vector& dy,
                           double dt, const ExtendedSystem& sys,
                           const Vector& u, const GainSchedule& gains) {
  // Gain current for the pre-step time; the schedule throws StaleGain when
  // state.t has drifted off the covariance grid.
  const Matrix& K = gains.gain_at(state.t);
  require(K.rows() == sys.dim() && K.cols() == dy.size(),
          "filter step: gain dimension");
  require(u.size() == sys.control.cols(), "filter step: control dimension");

  const Vector dnu = dy - sys.observation * state.xhat * dt;

  AgentFilterState next = state;
  next.xhat = state.xhat +
              (sys.drift * state.xhat + sys.control * u + sys.offset) * dt +
              K * dnu;
  next.t = state.t + dt;
  next.V = gains.cov_at(next.t);
  next.K = gains.gain_at(next.t);
  return next;
}

}  // namespace

AgentFilterState make_major_filter(const Vector& xhat0,
                                   const GainSchedule& gains) {
  AgentFilterState state;
  state.role = FilterRole::Major;
  state.xhat = xhat0;
  state.t = 0.0;
  state.V = gains.cov_at(0.0);
  state.K = gains.gain_at(0.0);
  return state;
}

AgentFilterState make_minor_filter(int type, int agent_id,
                                   const Vector& xhat0,
                                   const GainSchedule& gains) {
  AgentFilterState state;
  state.role = FilterRole::Minor;
  state.type = type;
  state.agent_id = agent_id;
  state.xhat = xhat0;
  state.t = 0.0;
  state.V = gains.cov_at(0.0);
  state.K = gains.gain_at(0.0);
  return state;
}

Innovation innovation_of(const AgentFilterState& state, const Vector& dy,
                         double dt, const ExtendedSystem& sys) {
  require(state.xhat.size() == sys.observation.cols(),
          "innovation: estimate dimension");
  require(dy.size() == sys.observation.rows(), "innovation: observation rows");
  return Innovation{dy - sys.observation * state.xhat * dt, state.t};
}

Vector extended_control(const ExtendedSystem& sys, const Matrix& Pi,
                        const Vector& s, const Matrix& R,
                        const Vector& xhat) {
  return -R.llt().solve(sys.control.transpose() * (Pi * xhat + s));
}

AgentFilterState major_filter_step(const AgentFilterState& state,
                                   const Vector& dy0, double dt,
                                   const ExtendedSystem& sys,
                                   const Matrix& Pi0, const Vector& s0,
                                   const Matrix& R0,
                                   const GainSchedule& gains) {
  require(state.role == FilterRole::Major, "major_filter_step: role");
  require(sys.role == SystemRole::Major, "major_filter_step: system role");
  check_filter_inputs(state, dy0, dt, sys, Pi0, s0, R0, "major_filter_step");
  const Vector u = extended_control(sys, Pi0, s0, R0, state.xhat);
  return step_impl(state, dy0, dt, sys, u, gains);
}

AgentFilterState major_filter_step(const AgentFilterState& state,
                                   const Vector& dy0, double dt,
                                   const ExtendedSystem& sys,
                                   const Matrix& Pi0, const Vector& s0,
                                   const Matrix& R0, const GainSchedule& gains,
                                   const Vector& applied_u0) {
  require(state.role == FilterRole::Major, "major_filter_step: role");
  require(sys.role == SystemRole::Major, "major_filter_step: system role");
  check_filter_inputs(state, dy0, dt, sys, Pi0, s0, R0, "major_filter_step");
  return step_impl(state, dy0, dt, sys, applied_u0, gains);
}

AgentFilterState minor_filter_step(const AgentFilterState& state,
                                   const Vector& dyi, double dt,
                                   const ExtendedSystem& sys,
                                   const Matrix& Pik, const Vector& sk,
                                   const Matrix& Rk,
                                   const GainSchedule& gains) {
  require(state.role == FilterRole::Minor, "minor_filter_step: role");
  require(sys.role == SystemRole::Minor, "minor_filter_step: system role");
  check_filter_inputs(state, dyi, dt, sys, Pik, sk, Rk, "minor_filter_step");
  const Vector u = extended_control(sys, Pik, sk, Rk, state.xhat);
  return step_impl(state, dyi, dt, sys, u, gains);
}

AgentFilterState minor_filter_step(const AgentFilterState& state,
                                   const Vector& dyi, double dt,
                                   const ExtendedSystem& sys,
                                   const Matrix& Pik, const Vector& sk,
                                   const Matrix& Rk, const GainSchedule& gains,
                                   const Vector& applied_ui) {
  require(state.role == FilterRole::Minor, "minor_filter_step: role");
  require(sys.role == SystemRole::Minor, "minor_filter_step: system role");
  check_filter_inputs(state, dyi, dt, sys, Pik, sk, Rk, "minor_filter_step");
  return step_impl(state, dyi, dt, sys, applied_ui, gains);
}

Matrix stacked_closed_loop_drift(const Matrix& A0, const Matrix& B,
                                 const Matrix& L, const Matrix& H0,
                                 const Matrix& K0) {
  const int n = static_cast<int>(A0.rows());
  require(A0.cols() == n, "stacked drift: A0 square");
  require(B.rows() == n && L.cols() == n && B.cols() == L.rows(),
          "stacked drift: B L shape");
  require(H0.cols() == n && K0.rows() == n && K0.cols() == H0.rows(),
          "stacked drift: K0 H0 shape");

  const Matrix BL = B * L;
  Matrix F = Matrix::Zero(2 * n, 2 * n);
  F.topLeftCorner(n, n) = A0;
  F.topRightCorner(n, n) = -BL;
  F.bottomLeftCorner(n, n) = K0 * H0;
  F.bottomRightCorner(n, n) = A0 - BL - K0 * H0;
  return F;
}

std::vector<Vector> estimates_of_estimates_filter(
    const Matrix& A0, const Matrix& B, const Matrix& L, const Matrix& H0,
    const Matrix& Hi, const Matrix& K0, const Matrix& Ki,
    const EoEInputs& inputs) {
  const Matrix F = stacked_closed_loop_drift(A0, B, L, H0, K0);
  const int n = static_cast<int>(A0.rows());
  const int pi = static_cast<int>(Hi.rows());
  require(Hi.cols() == n, "estimates of estimates: Hi width");
  require(Ki.rows() == 2 * n && Ki.cols() == pi,
          "estimates of estimates: Ki shape");
  require(inputs.zhat0.size() == 2 * n, "estimates of estimates: init size");
  require(inputs.dt > 0.0, "estimates of estimates: dt must be positive");

  Matrix Hstack = Matrix::Zero(pi, 2 * n);
  Hstack.leftCols(n) = Hi;

  std::vector<Vector> out;
  out.reserve(inputs.dyi.size() + 1);
  Vector z = inputs.zhat0;
  out.push_back(z);
  for (const Vector& dy : inputs.dyi) {
    require(dy.size() == pi, "estimates of estimates: increment size");
    z += F * z * inputs.dt + Ki * (dy - Hstack * z * inputs.dt);
    out.push_back(z);
  }
  return out;
}

Vector estimate_major_control(const AgentFilterState& minor_state,
                              const ExtendedSystem& major_sys,
                              const Matrix& Pi0, const Vector& s0,
                              const Matrix& R0) {
  require(minor_state.role == FilterRole::Minor,
          "estimate_major_control: role");
  const int dmaj = major_sys.dim();
  const int dmin = static_cast<int>(minor_state.xhat.size());
  const int n = dmin - 2 * dmaj;  // dmin = n + 2(n + nK)
  require(n > 0, "estimate_major_control: dimension mismatch");
  require(Pi0.rows() == dmaj && Pi0.cols() == dmaj && s0.size() == dmaj,
          "estimate_major_control: Pi0/s0 dimension");

  const Vector iterated = minor_state.xhat.segment(n + dmaj, dmaj);
  return -R0.llt().solve(major_sys.control.transpose() *
                         (Pi0 * iterated + s0));
}

}  // namespace mmlqg
