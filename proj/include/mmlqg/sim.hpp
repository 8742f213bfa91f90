#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmlqg/consistency.hpp"
#include "mmlqg/params.hpp"
#include "mmlqg/types.hpp"

namespace mmlqg {

// Finite-population Monte Carlo engine. One closed-loop path couples the
// physical states (major, N minors), the major filter, the N minor extended
// filters, and a mean-field reference integrated alongside; controls are
// read off the filter estimates only, so the information pattern of the
// limit game is preserved exactly.

enum class PopulationMode { Sampled, Proportional };

struct Population {
  int N = 0;
  std::vector<int> type_of;  // type index per agent, 0-based
  std::vector<int> rank_of;  // within-type rank; keys the agent's noise
  Vector empirical_pi;       // N_k / N

  int count_of_type(int k) const;
};

// Sampled mode draws types i.i.d. from params.pi through the TypeDraw
// substream (agent i uses counter i, so growing N never reshuffles existing
// agents). Proportional mode assigns floor(pi_k N) per type and distributes
// the remainder by largest fractional part, agents ordered by type.
Population generate_population(const GameParameters& params, int N,
                               PopulationMode mode, std::uint64_t seed);

struct SimulateOptions {
  std::uint64_t path = 0;        // path index inside a Monte Carlo batch
  bool stationary_gains = false; // stationary filter gains instead of the
                                 // integrated covariance schedules
  bool track_mean_field = true;  // integrate the mean-field reference and
                                 // the empirical averaged-error feed
  bool record_minor_series = true;
  int record_only_agent = 0;     // when record_minor_series is false, still
                                 // keep this minor's series (0 = none)
  int deviating_agent = -1;      // 0 = major, i >= 1 = minor i
  double gain_scale = 1.0;       // scales the feedback part of the deviating
                                 // agent's control
  double offset_scale = 1.0;     // scales its feedforward part
};

struct MinorSeries {
  int type = 0;
  Matrix x;     // (S+1) x n true state
  Matrix zhat;  // (S+1) x (3n+2nK) extended estimate
  Matrix u;     // (S+1) x m control
  Matrix nu;    // S x p innovation increments

  bool recorded() const { return x.rows() > 0; }
};

struct SimulationRun {
  std::uint64_t seed = 0;
  std::uint64_t path = 0;
  double dt = 0.0;
  double T = 0.0;
  Population pop;
  std::vector<double> time;  // S+1 grid points, t_s = s dt

  Matrix x0;     // (S+1) x n major true state
  Matrix xhat0;  // (S+1) x (n+nK) major filter estimate [x0hat; xbarhat]
  Matrix u0;     // (S+1) x m0
  Matrix nu0;    // S x p0 major innovation increments
  Matrix xbar;   // (S+1) x nK mean-field reference
  Matrix xN;     // (S+1) x n empirical average of the minor states

  std::vector<MinorSeries> minors;  // size N; series empty unless recorded

  Vector costs;              // N+1 discounted costs, slot 0 = major
  Vector truncation_bounds;  // e^(-rho T) tail bounds, same layout

  // Diagnostics shared by every recording mode.
  Vector major_error_rms;  // |x0 - x0hat| per grid point
  Vector minor_error_rms;  // rms over agents of |xi - xihat|
  Vector second_moment;    // mean over minors of the five-block squared
                           // estimate norms (undiscounted)

  int steps() const { return static_cast<int>(time.size()) - 1; }
};

// Closed-loop Euler-Maruyama pass under the infinite-population control
// laws. The empirical average x^(N) feeds costs and diagnostics only; every
// control is a function of the owning agent's filter state. NumericalBlowup
// if any state norm passes 1e9 (message names the step and agent).
SimulationRun simulate(const GameParameters& params,
                       const MeanFieldSolution& solution,
                       const Population& pop, double dt, double T,
                       std::uint64_t seed);
SimulationRun simulate(const GameParameters& params,
                       const MeanFieldSolution& solution,
                       const Population& pop, double dt, double T,
                       std::uint64_t seed, const SimulateOptions& options);

// Discounted quadratic cost of one agent by the trapezoid rule on the
// stored grid (agent 0 = major). Recomputes from the stored series with the
// same accumulation order as the engine, so it reproduces run.costs
// bitwise; IncompleteTrajectory if the agent's series was not recorded.
double evaluate_cost(const SimulationRun& run, int agent,
                     const GameParameters& params);

struct CostDetail {
  double value = 0.0;
  double truncation_bound = 0.0;  // e^(-rho T) g(T)/rho, g the undiscounted
                                  // terminal integrand
};
CostDetail evaluate_cost_detail(const SimulationRun& run, int agent,
                                const GameParameters& params);

// Finite family of alternative linear laws for one agent: scalings of the
// feedback gain, scalings of the feedforward offset, and the identity pair
// (the certainty-equivalence law itself, a zero-gap control row).
struct DeviationSpec {
  int agent = 1;  // 0 = major, i >= 1 = minor i
  std::vector<double> gain_scales{0.5, 0.9, 1.1, 1.5};
  std::vector<double> offset_scales{0.5, 0.9, 1.1, 1.5};
  bool include_identity = true;
};

struct DeviationResult {
  double gain_scale = 1.0;
  double offset_scale = 1.0;
  double mean_gap = 0.0;  // mean over paths of J(dev) - J(eq)
  double std_error = 0.0;
  std::string description;
};

struct NashGapReport {
  int N = 0;
  int agent = 0;
  int paths = 0;
  double epsilon_hat = 0.0;  // max(0, -min mean gap)
  std::vector<DeviationResult> deviations;
};

struct NashGapOptions {
  double dt = 0.01;
  double T = 25.0;
  bool stationary_gains = false;
  int threads = 1;
};

// Common-random-number paired estimate of the deviation gaps. Minor
// deviations re-simulate only the deviating agent against the stored common
// signals (a minor influences nothing but its own state and the 1/N share
// of x^(N) in cost targets); a major deviation reruns the full loop on the
// same noise. Gap estimates use the realized costs J^N; the performance
// function of the limit theorem adds a control-independent summand that
// cancels from every difference.
NashGapReport estimate_nash_gap(const GameParameters& params,
                                const MeanFieldSolution& solution,
                                const Population& pop,
                                const DeviationSpec& deviation, int paths,
                                std::uint64_t seed,
                                const NashGapOptions& options = {});

struct StabilityReport {
  std::vector<double> time;
  Vector envelope;  // e^(-rho t / 2) second_moment series
  double sup = 0.0;
  double t_at_sup = 0.0;
  double tail_max = 0.0;      // max over t >= tail_start
  double tail_start = 0.0;
  bool tail_below_sup = true;
};

// Discounted second-moment envelope of the minor filter blocks (own state,
// major state, mean field, and both iterated estimates). tail_start < 0
// defaults to 0.8 T.
StabilityReport stability_metrics(const SimulationRun& run, double rho,
                                  double tail_start = -1.0);

// Per-minor separated-cost summands: the discounted integral of
// |(xi - xihat) - H1 (x0 - x0hat|i) - H2 (x^(N) - xNhat|i)|^2_Q on the
// stored grid, with xNhat|i the empirical-pi mix of the agent's mean-field
// estimate blocks. Requires recorded minor series.
Vector en_terms(const SimulationRun& run, const GameParameters& params);

// Deterministic counterpart: the discounted integral of tr[Q^pi Vk(t)]
// along the minor filter covariance trajectory, mixed across types by
// params.pi.
double en_deterministic(const GameParameters& params,
                        const MeanFieldSolution& solution, double dt,
                        double T);

struct ENLimitRow {
  int N = 0;
  double monte_carlo = 0.0;
  double deterministic = 0.0;
  double rel_deviation = 0.0;
};

struct ENLimitReport {
  std::vector<ENLimitRow> rows;
};

struct ENLimitOptions {
  double dt = 0.01;
  double T = 25.0;
  PopulationMode mode = PopulationMode::Proportional;
  int threads = 1;
};

// Monte Carlo estimate of the separated-cost summand per population size,
// against the deterministic integral it converges to.
ENLimitReport estimate_EN_limit(const GameParameters& params,
                                const MeanFieldSolution& solution,
                                const std::vector<int>& N_schedule, int paths,
                                std::uint64_t seed,
                                const ENLimitOptions& options = {});

// Time-averaged rms distance between the empirical average x^(N) and the
// empirical-pi mix of the mean-field reference.
double mean_field_gap(const SimulationRun& run);

}  // namespace mmlqg
