#pragma once

#include <vector>

#include "mmlqg/blocks.hpp"
#include "mmlqg/riccati.hpp"
#include "mmlqg/types.hpp"

namespace mmlqg {

// Gain/covariance source for filter stepping: piecewise-constant lookups
// into an integrated covariance trajectory, or a fixed stationary pair.
// The trajectory variant is non-owning; the caller keeps it alive.
class GainSchedule {
 public:
  explicit GainSchedule(const CovarianceTrajectory& traj) : traj_(&traj) {}
  GainSchedule(Matrix K, Matrix V) : K_(std::move(K)), V_(std::move(V)) {}

  bool stationary() const { return traj_ == nullptr; }
  const Matrix& gain_at(double t) const {
    return traj_ ? traj_->gain_at(t) : K_;
  }
  const Matrix& cov_at(double t) const {
    return traj_ ? traj_->value_at(t) : V_;
  }

 private:
  const CovarianceTrajectory* traj_ = nullptr;
  Matrix K_, V_;
};

enum class FilterRole { Major, Minor };

// Filter state of one agent. The major estimate stacks [x0hat; xbarhat];
// a minor estimate stacks [xihat, x0hat, xbarhat, iterated x0hat, iterated
// xbarhat], all conditioned on the agent's own observation history. V and K
// mirror the schedule at time t (K = V L^T Rv^-1 by construction).
struct AgentFilterState {
  FilterRole role = FilterRole::Major;
  int type = -1;      // minor type index
  int agent_id = -1;  // minor agent index within the population
  Vector xhat;
  Matrix V;
  Matrix K;
  double t = 0.0;
};

struct Innovation {
  Vector dnu;
  double t = 0.0;
};

AgentFilterState make_major_filter(const Vector& xhat0,
                                   const GainSchedule& gains);
AgentFilterState make_minor_filter(int type, int agent_id,
                                   const Vector& xhat0,
                                   const GainSchedule& gains);

// dnu = dy - observation * xhat * dt at the pre-step estimate.
Innovation innovation_of(const AgentFilterState& state, const Vector& dy,
                         double dt, const ExtendedSystem& sys);

// Certainty-equivalence control -R^-1 B^T (Pi xhat + s) for the extended
// system's control matrix B.
Vector extended_control(const ExtendedSystem& sys, const Matrix& Pi,
                        const Vector& s, const Matrix& R, const Vector& xhat);

// One explicit Euler update of the major filter,
//   xhat += (A0ex xhat + B0ex u0 + M0) dt + K0 dnu0,
// with u0 evaluated at the pre-step estimate and K0 read from the schedule
// at state.t (StaleGain if that time is off the gain grid by more than half
// a grid step). V and K are refreshed for the new time.
AgentFilterState major_filter_step(const AgentFilterState& state,
                                   const Vector& dy0, double dt,
                                   const ExtendedSystem& sys,
                                   const Matrix& Pi0, const Vector& s0,
                                   const Matrix& R0,
                                   const GainSchedule& gains);

// Same recursion conditioned on an externally chosen control instead of the
// certainty-equivalence law; deviation studies feed the control actually
// applied so the estimate stays consistent with the closed loop.
AgentFilterState major_filter_step(const AgentFilterState& state,
                                   const Vector& dy0, double dt,
                                   const ExtendedSystem& sys,
                                   const Matrix& Pi0, const Vector& s0,
                                   const Matrix& R0, const GainSchedule& gains,
                                   const Vector& applied_u0);

// Minor counterpart on the (3n+2nK)-dimensional extended estimate; the
// embedded major closed loop advances the iterated estimates.
AgentFilterState minor_filter_step(const AgentFilterState& state,
                                   const Vector& dyi, double dt,
                                   const ExtendedSystem& sys,
                                   const Matrix& Pik, const Vector& sk,
                                   const Matrix& Rk,
                                   const GainSchedule& gains);

AgentFilterState minor_filter_step(const AgentFilterState& state,
                                   const Vector& dyi, double dt,
                                   const ExtendedSystem& sys,
                                   const Matrix& Pik, const Vector& sk,
                                   const Matrix& Rk, const GainSchedule& gains,
                                   const Vector& applied_ui);

// [[A0, -B L], [K0 H0, A0 - B L - K0 H0]]: joint drift of a closed-loop
// plant x0 under u0 = -L x0hat and its own Kalman filter.
Matrix stacked_closed_loop_drift(const Matrix& A0, const Matrix& B,
                                 const Matrix& L, const Matrix& H0,
                                 const Matrix& K0);

struct EoEInputs {
  double dt = 0.0;
  Vector zhat0;             // initial stacked estimate [x0hat_i; iterated]
  std::vector<Vector> dyi;  // observation increments H_i x0 dt + dv_i
};

// Estimates-of-estimates filter: a Kalman filter for the stacked
// [x0; x0hat] system driven by a minor agent's observations [H_i, 0] with
// the supplied gain Ki. Returns the stacked estimate at every grid time,
// initial value first.
std::vector<Vector> estimates_of_estimates_filter(
    const Matrix& A0, const Matrix& B, const Matrix& L, const Matrix& H0,
    const Matrix& Hi, const Matrix& K0, const Matrix& Ki,
    const EoEInputs& inputs);

// Minor agent's reconstruction of the major control: the major feedback map
// applied to the iterated-estimate blocks of the minor's extended estimate,
//   -R0^-1 B0ex^T [Pi0 (iterated x0hat, iterated xbarhat) + s0].
Vector estimate_major_control(const AgentFilterState& minor_state,
                              const ExtendedSystem& major_sys,
                              const Matrix& Pi0, const Vector& s0,
                              const Matrix& R0);

}  // namespace mmlqg
