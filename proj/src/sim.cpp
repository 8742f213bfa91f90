#include "mmlqg/sim.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <memory>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>
#include <utility>
#include <vector>

#include "mmlqg/blocks.hpp"
#include "mmlqg/filters.hpp"
#include "mmlqg/riccati.hpp"
#include "mmlqg/rng.hpp"

namespace mmlqg {

namespace {

// The major's slot on noise sources shared with minors (initial draws);
// minor agents key by (type, rank), which never reaches this value.
constexpr std::uint32_t kMajorKey = 0xffffffffu;
constexpr double kBlowupNorm = 1e9;

int steps_of(double dt, double T) {
  require(dt > 0.0 && T > 0.0, "simulate: dt and T must be positive");
  const int S = static_cast<int>(std::lround(T / dt));
  require(S >= 1 && std::abs(S * dt - T) <= 1e-9 * std::max(1.0, T),
          "simulate: dt must divide T");
  return S;
}

bool noise_free(const GameParameters& p) {
  return p.sigma_v0.norm() == 0.0 && p.sigma_v.norm() == 0.0 &&
         p.D0.norm() == 0.0 && p.D.norm() == 0.0;
}

// Systems and gain schedules shared by every path of a Monte Carlo batch.
// GainSchedule keeps a pointer into the covariance trajectories, so the
// struct is pinned to one heap location and never copied.
struct EngineSetup {
  ExtendedSystem major_sys;
  std::vector<ExtendedSystem> minor_sys;  // per type, K0 frozen
  ExtendedSystem error_sys;
  CovarianceTrajectory v0, vbar;
  std::vector<CovarianceTrajectory> vk;  // per type
  std::vector<GainSchedule> major_gain;  // single element
  std::vector<GainSchedule> minor_gain;  // per type

  EngineSetup() = default;
  EngineSetup(const EngineSetup&) = delete;
  EngineSetup& operator=(const EngineSetup&) = delete;
};

std::unique_ptr<EngineSetup> build_setup(const GameParameters& p,
                                         const MeanFieldSolution& sol,
                                         double dt, double T,
                                         bool stationary_gains) {
  require(sol.converged, "simulate: mean-field solution not converged");
  auto su = std::make_unique<EngineSetup>();
  su->major_sys = build_major_extended(p, sol.coefficients);

  // The minor extended drift and the averaged-error stack embed the major
  // filter gain; both are frozen at the stationary fixed point, matching
  // the convention of the covariance integrators. Without noise the
  // stationary solve has no positive-definite innovation covariance, and
  // the exact gains are zero anyway.
  Matrix K0_stat;
  std::vector<Matrix> Kk_stat;
  Matrix V0_stat;
  std::vector<Matrix> Vk_stat;
  if (noise_free(p)) {
    K0_stat = Matrix::Zero(p.dim_major_ex(), p.p0());
    V0_stat = Matrix::Zero(p.dim_major_ex(), p.dim_major_ex());
    const ClosedLoopMajor loop =
        build_major_closed_loop(p, sol.coefficients, sol.Pi0, sol.s0, K0_stat);
    for (int k = 0; k < p.K; ++k) {
      su->minor_sys.push_back(
          build_minor_extended(p, k, sol.coefficients, loop));
      Kk_stat.push_back(Matrix::Zero(p.dim_minor_ex(), p.p()));
      Vk_stat.push_back(Matrix::Zero(p.dim_minor_ex(), p.dim_minor_ex()));
    }
    su->error_sys = build_error_stack(p, su->minor_sys, Kk_stat);
  } else {
    auto stat =
        solve_stationary_covariances(p, sol.coefficients, sol.Pi0, sol.s0);
    su->minor_sys = std::move(stat.minor_systems);
    su->error_sys = std::move(stat.error_system);
    K0_stat = std::move(stat.K0);
    Kk_stat = std::move(stat.Kk);
    V0_stat = std::move(stat.V0);
    Vk_stat = std::move(stat.Vk);
  }

  if (stationary_gains) {
    su->major_gain.emplace_back(K0_stat, V0_stat);
    for (int k = 0; k < p.K; ++k)
      su->minor_gain.emplace_back(Kk_stat[k], Vk_stat[k]);
    return su;
  }

  auto trajs = integrate_coupled_covariances(
      su->major_sys, su->error_sys, initial_major_covariance(p),
      initial_error_covariance(p), dt, T);
  su->v0 = std::move(trajs.first);
  su->vbar = std::move(trajs.second);
  for (int k = 0; k < p.K; ++k)
    su->vk.push_back(integrate_minor_filter_riccati(
        su->minor_sys[k], su->vbar, initial_minor_covariance(p), dt, T));
  su->major_gain.emplace_back(su->v0);
  for (int k = 0; k < p.K; ++k) su->minor_gain.emplace_back(su->vk[k]);
  return su;
}

// u = gain_scale (-R^-1 B^T Pi xhat) + offset_scale (-R^-1 B^T s). The
// unscaled branch goes through extended_control so an identity deviation is
// bitwise the equilibrium law.
Vector control_of(const ExtendedSystem& sys, const Matrix& Pi, const Vector& s,
                  const Matrix& R, const Vector& xhat, double gain_scale,
                  double offset_scale) {
  if (gain_scale == 1.0 && offset_scale == 1.0)
    return extended_control(sys, Pi, s, R, xhat);
  const Vector feedback = -R.llt().solve(sys.control.transpose() * (Pi * xhat));
  const Vector offset = -R.llt().solve(sys.control.transpose() * s);
  return gain_scale * feedback + offset_scale * offset;
}

double major_integrand(const GameParameters& p, const Vector& x0,
                       const Vector& u0, const Vector& xN, double disc) {
  const Vector d = x0 - (p.H0 * xN + p.eta0);
  return disc * (d.dot(p.Q0 * d) + u0.dot(p.R0 * u0));
}

double minor_integrand(const GameParameters& p, const Vector& xi,
                       const Vector& ui, const Vector& x0, const Vector& xN,
                       double disc) {
  const Vector d = xi - (p.H1 * x0 + p.H2 * xN + p.eta);
  return disc * (d.dot(p.Q * d) + ui.dot(p.R * ui));
}

// Trapezoid accumulation shared by the engine, the replay, and
// evaluate_cost, so recomputed costs reproduce engine costs bitwise.
void accumulate(double& acc, int s, int S, double dt, double g) {
  const double w = (s == 0 || s == S) ? 0.5 : 1.0;
  acc += w * dt * g;
}

void check_state(const Vector& v, int s, int agent) {
  if (v.allFinite() && v.norm() <= kBlowupNorm) return;
  std::ostringstream msg;
  msg << "simulate: state norm exceeded 1e9 at step " << s << " for agent "
      << agent;
  throw NumericalBlowup(msg.str());
}

// Agents iterated by (type, rank) so aggregate sums do not depend on the
// index order of the population (cost symmetry under permutation).
std::vector<int> canonical_order(const Population& pop) {
  std::vector<int> order(pop.N);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (pop.type_of[a] != pop.type_of[b])
      return pop.type_of[a] < pop.type_of[b];
    return pop.rank_of[a] < pop.rank_of[b];
  });
  return order;
}

void validate_population(const GameParameters& p, const Population& pop) {
  require(pop.N >= 1, "simulate: population must have at least one agent");
  require(static_cast<int>(pop.type_of.size()) == pop.N &&
              static_cast<int>(pop.rank_of.size()) == pop.N,
          "simulate: population index arrays must have length N");
  for (int i = 0; i < pop.N; ++i)
    require(pop.type_of[i] >= 0 && pop.type_of[i] < p.K,
            "simulate: agent type out of range");
}

SimulationRun run_engine(const EngineSetup& su, const GameParameters& p,
                         const MeanFieldSolution& sol, const Population& pop,
                         double dt, double T, std::uint64_t seed,
                         const SimulateOptions& opt) {
  const int S = steps_of(dt, T);
  validate_population(p, pop);
  require(opt.deviating_agent <= pop.N,
          "simulate: deviating agent outside the population");

  const int n = p.n;
  const int nK = p.n * p.K;
  const int dM = p.dim_major_ex();
  const int dm = p.dim_minor_ex();
  const int N = pop.N;
  const double sqdt = std::sqrt(dt);
  const std::uint64_t path = opt.path;
  const GainSchedule& g0 = su.major_gain.front();
  const std::vector<int> order = canonical_order(pop);

  SimulationRun run;
  run.seed = seed;
  run.path = path;
  run.dt = dt;
  run.T = T;
  run.pop = pop;
  run.time.resize(S + 1);
  for (int s = 0; s <= S; ++s) run.time[s] = s * dt;
  run.x0.setZero(S + 1, n);
  run.xhat0.setZero(S + 1, dM);
  run.u0.setZero(S + 1, static_cast<int>(p.B0.cols()));
  run.nu0.setZero(S, p.p0());
  run.xN.setZero(S + 1, n);
  if (opt.track_mean_field) run.xbar.setZero(S + 1, nK);
  run.minors.resize(N);
  for (int i = 0; i < N; ++i) {
    run.minors[i].type = pop.type_of[i];
    const bool keep =
        opt.record_minor_series || opt.record_only_agent == i + 1;
    if (!keep) continue;
    run.minors[i].x.setZero(S + 1, n);
    run.minors[i].zhat.setZero(S + 1, dm);
    run.minors[i].u.setZero(S + 1, p.m);
    run.minors[i].nu.setZero(S, p.p());
  }
  run.costs.setZero(N + 1);
  run.truncation_bounds.setZero(N + 1);
  run.major_error_rms.setZero(S + 1);
  run.minor_error_rms.setZero(S + 1);
  run.second_moment.setZero(S + 1);

  // Substreams: the major's process and measurement sources are its own;
  // the initial-state source is shared with minors and keyed by kMajorKey.
  GaussianStream w0s(seed, path, NoiseSource::MajorProcess);
  GaussianStream v0s(seed, path, NoiseSource::MajorMeasurement);
  std::vector<GaussianStream> wis, vis;
  wis.reserve(N);
  vis.reserve(N);
  for (int i = 0; i < N; ++i) {
    const auto k = static_cast<std::uint32_t>(pop.type_of[i]);
    const auto r = static_cast<std::uint32_t>(pop.rank_of[i]);
    wis.emplace_back(seed, path, NoiseSource::MinorProcess, k, r);
    vis.emplace_back(seed, path, NoiseSource::MinorMeasurement, k, r);
  }

  Vector xM = Vector::Zero(dM);
  xM.head(n) = p.sigma_init *
               GaussianStream(seed, path, NoiseSource::InitialState, kMajorKey)
                   .normals(0, n);
  AgentFilterState stM = make_major_filter(Vector::Zero(dM), g0);
  std::vector<Vector> xi(N);
  std::vector<AgentFilterState> stm;
  stm.reserve(N);
  for (int i = 0; i < N; ++i) {
    const auto k = static_cast<std::uint32_t>(pop.type_of[i]);
    const auto r = static_cast<std::uint32_t>(pop.rank_of[i]);
    xi[i] = p.sigma_init *
            GaussianStream(seed, path, NoiseSource::InitialState, k, r)
                .normals(0, n);
    stm.push_back(make_minor_filter(pop.type_of[i], i + 1, Vector::Zero(dm),
                                    su.minor_gain[pop.type_of[i]]));
  }

  std::vector<Vector> ui(N);
  for (int s = 0; s <= S; ++s) {
    const double t = run.time[s];
    const double disc = std::exp(-p.rho * t);
    const Vector x0s = xM.head(n);

    check_state(xM, s, 0);
    check_state(stM.xhat, s, 0);

    Vector xNs = Vector::Zero(n);
    for (int j : order) xNs += xi[j];
    xNs /= static_cast<double>(N);

    const bool dev0 = opt.deviating_agent == 0;
    const Vector u0 =
        control_of(su.major_sys, sol.Pi0, sol.s0, p.R0, stM.xhat,
                   dev0 ? opt.gain_scale : 1.0, dev0 ? opt.offset_scale : 1.0);
    for (int i = 0; i < N; ++i) {
      check_state(xi[i], s, i + 1);
      check_state(stm[i].xhat, s, i + 1);
      const int k = pop.type_of[i];
      const bool dev = opt.deviating_agent == i + 1;
      ui[i] =
          control_of(su.minor_sys[k], sol.Pik[k], sol.sk[k], p.R, stm[i].xhat,
                     dev ? opt.gain_scale : 1.0, dev ? opt.offset_scale : 1.0);
    }

    accumulate(run.costs[0], s, S, dt,
               major_integrand(p, x0s, u0, xNs, disc));
    for (int i = 0; i < N; ++i)
      accumulate(run.costs[1 + i], s, S, dt,
                 minor_integrand(p, xi[i], ui[i], x0s, xNs, disc));

    run.x0.row(s) = x0s;
    run.xhat0.row(s) = stM.xhat;
    run.u0.row(s) = u0;
    run.xN.row(s) = xNs;
    if (opt.track_mean_field) run.xbar.row(s) = xM.tail(nK);
    for (int i = 0; i < N; ++i) {
      if (!run.minors[i].recorded()) continue;
      run.minors[i].x.row(s) = xi[i];
      run.minors[i].zhat.row(s) = stm[i].xhat;
      run.minors[i].u.row(s) = ui[i];
    }

    run.major_error_rms[s] = (x0s - stM.xhat.head(n)).norm();
    double err2 = 0.0;
    double mom = 0.0;
    for (int i = 0; i < N; ++i) {
      err2 += (xi[i] - stm[i].xhat.head(n)).squaredNorm();
      // The five estimate blocks partition the extended vector, so the sum
      // of their squared norms is the squared norm of the whole estimate.
      mom += stm[i].xhat.squaredNorm();
    }
    run.minor_error_rms[s] = std::sqrt(err2 / N);
    run.second_moment[s] = mom / N;

    if (s == S) {
      const double scale = std::exp(-p.rho * T) / p.rho;
      run.truncation_bounds[0] =
          scale * major_integrand(p, x0s, u0, xNs, 1.0);
      for (int i = 0; i < N; ++i)
        run.truncation_bounds[1 + i] =
            scale * minor_integrand(p, xi[i], ui[i], x0s, xNs, 1.0);
      break;
    }

    // Observation increments from the physical states only.
    const Vector dW0 = sqdt * w0s.normals(s, p.r0());
    const Vector dy0 =
        p.l0 * x0s * dt +
        p.sigma_v0 *
            (sqdt * v0s.normals(s, static_cast<int>(p.sigma_v0.cols())));
    run.nu0.row(s) = dy0 - su.major_sys.observation * stM.xhat * dt;

    // Empirical per-type averaged error of the extended minor states,
    // assembled before anything moves; it feeds the mean-field rows of the
    // major extended truth exactly where the limit model injects the
    // averaged-error process.
    Vector ebarN;
    if (opt.track_mean_field) {
      ebarN = Vector::Zero(su.error_sys.dim());
      std::vector<int> cnt(p.K, 0);
      Vector zj(dm);
      for (int j : order) {
        const int k = pop.type_of[j];
        zj << xi[j], xM, stM.xhat;
        ebarN.segment(k * dm, dm) += zj - stm[j].xhat;
        ++cnt[k];
      }
      for (int k = 0; k < p.K; ++k)
        if (cnt[k] > 0) ebarN.segment(k * dm, dm) /= cnt[k];
    }

    for (int i = 0; i < N; ++i) {
      const int k = pop.type_of[i];
      const Vector dyi =
          (p.l1[k] * xi[i] + p.l2[k] * x0s) * dt +
          p.sigma_v *
              (sqdt * vis[i].normals(s, static_cast<int>(p.sigma_v.cols())));
      if (run.minors[i].recorded())
        run.minors[i].nu.row(s) =
            dyi - su.minor_sys[k].observation * stm[i].xhat * dt;
      xi[i] += (p.A[k] * xi[i] + p.B[k] * ui[i] + p.G * x0s) * dt +
               p.D * (sqdt * wis[i].normals(s, p.r()));
      stm[i] = minor_filter_step(stm[i], dyi, dt, su.minor_sys[k], sol.Pik[k],
                                 sol.sk[k], p.R, su.minor_gain[k], ui[i]);
    }

    Vector dWext = Vector::Zero(su.major_sys.diffusion.cols());
    dWext.head(p.r0()) = dW0;
    xM = xM +
         (su.major_sys.drift * xM + su.major_sys.control * u0 +
          su.major_sys.offset) *
             dt +
         su.major_sys.diffusion * dWext;
    if (opt.track_mean_field)
      xM += su.major_sys.error_injection * ebarN * dt;
    stM = major_filter_step(stM, dy0, dt, su.major_sys, sol.Pi0, sol.s0, p.R0,
                            g0, u0);
  }

  return run;
}

// Re-simulates one minor agent against the recorded common signals. A minor
// deviation reaches nothing else in the loop: the major observes only its
// own state, other minors observe themselves and the major, and the
// deviator's 1/N share of x^(N) is restored in the cost targets.
double replay_minor_cost(const EngineSetup& su, const GameParameters& p,
                         const MeanFieldSolution& sol, const Population& pop,
                         int agent, double dt, std::uint64_t seed,
                         std::uint64_t path, const Matrix& x0_series,
                         const Matrix& xN_series, const Matrix& xi_eq,
                         double gain_scale, double offset_scale) {
  const int i = agent - 1;
  const int k = pop.type_of[i];
  const auto ku = static_cast<std::uint32_t>(k);
  const auto r = static_cast<std::uint32_t>(pop.rank_of[i]);
  const int S = static_cast<int>(x0_series.rows()) - 1;
  const double sqdt = std::sqrt(dt);

  GaussianStream wi(seed, path, NoiseSource::MinorProcess, ku, r);
  GaussianStream vi(seed, path, NoiseSource::MinorMeasurement, ku, r);
  Vector x = p.sigma_init *
             GaussianStream(seed, path, NoiseSource::InitialState, ku, r)
                 .normals(0, p.n);
  AgentFilterState st = make_minor_filter(
      k, agent, Vector::Zero(p.dim_minor_ex()), su.minor_gain[k]);

  double cost = 0.0;
  for (int s = 0; s <= S; ++s) {
    const double disc = std::exp(-p.rho * (s * dt));
    const Vector x0s = x0_series.row(s);
    check_state(x, s, agent);
    check_state(st.xhat, s, agent);
    const Vector u = control_of(su.minor_sys[k], sol.Pik[k], sol.sk[k], p.R,
                                st.xhat, gain_scale, offset_scale);
    const Vector xNs =
        xN_series.row(s).transpose() +
        (x - xi_eq.row(s).transpose()) / static_cast<double>(pop.N);
    accumulate(cost, s, S, dt, minor_integrand(p, x, u, x0s, xNs, disc));
    if (s == S) break;

    const Vector dyi =
        (p.l1[k] * x + p.l2[k] * x0s) * dt +
        p.sigma_v *
            (sqdt * vi.normals(s, static_cast<int>(p.sigma_v.cols())));
    x += (p.A[k] * x + p.B[k] * u + p.G * x0s) * dt +
         p.D * (sqdt * wi.normals(s, p.r()));
    st = minor_filter_step(st, dyi, dt, su.minor_sys[k], sol.Pik[k], sol.sk[k],
                           p.R, su.minor_gain[k], u);
  }
  return cost;
}

void for_each_path(int paths, int threads,
                   const std::function<void(int)>& body) {
  threads = std::max(1, std::min(threads, paths));
  if (threads == 1) {
    for (int pth = 0; pth < paths; ++pth) body(pth);
    return;
  }
  std::atomic<int> next{0};
  std::mutex mu;
  std::exception_ptr first_error;
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (int pth = next.fetch_add(1); pth < paths;
           pth = next.fetch_add(1)) {
        try {
          body(pth);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!first_error) first_error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

double discounted_trace_integral(const GameParameters& p, const Matrix& Qpi,
                                 const CovarianceTrajectory& traj, double dt,
                                 int S) {
  double acc = 0.0;
  for (int s = 0; s <= S; ++s) {
    const double disc = std::exp(-p.rho * (s * dt));
    accumulate(acc, s, S, dt, disc * (Qpi * traj.values[s]).trace());
  }
  return acc;
}

}  // namespace

int Population::count_of_type(int k) const {
  return static_cast<int>(std::count(type_of.begin(), type_of.end(), k));
}

Population generate_population(const GameParameters& params, int N,
                               PopulationMode mode, std::uint64_t seed) {
  require(N >= 1, "generate_population: N must be at least 1");
  const int K = params.K;
  require(params.pi.size() == K, "generate_population: pi size");

  Population pop;
  pop.N = N;
  pop.type_of.resize(N);
  pop.rank_of.resize(N);
  std::vector<int> counts(K, 0);

  if (mode == PopulationMode::Sampled) {
    const GaussianStream draw(seed, 0, NoiseSource::TypeDraw);
    for (int i = 0; i < N; ++i) {
      const double u = draw.uniform(static_cast<std::uint64_t>(i), 0);
      int k = 0;
      double c = params.pi[0];
      while (k + 1 < K && u > c) {
        ++k;
        c += params.pi[k];
      }
      pop.type_of[i] = k;
      pop.rank_of[i] = counts[k]++;
    }
  } else {
    std::vector<int> nk(K);
    std::vector<std::pair<double, int>> rem;
    int assigned = 0;
    for (int k = 0; k < K; ++k) {
      const double share = params.pi[k] * N;
      nk[k] = static_cast<int>(std::floor(share));
      assigned += nk[k];
      rem.emplace_back(share - nk[k], k);
    }
    std::sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    for (int j = 0; j < N - assigned; ++j) ++nk[rem[j].second];
    int idx = 0;
    for (int k = 0; k < K; ++k)
      for (int rk = 0; rk < nk[k]; ++rk) {
        pop.type_of[idx] = k;
        pop.rank_of[idx] = rk;
        ++idx;
      }
    counts = nk;
  }

  pop.empirical_pi.resize(K);
  for (int k = 0; k < K; ++k)
    pop.empirical_pi[k] = static_cast<double>(counts[k]) / N;
  return pop;
}

SimulationRun simulate(const GameParameters& params,
                       const MeanFieldSolution& solution,
                       const Population& pop, double dt, double T,
                       std::uint64_t seed) {
  return simulate(params, solution, pop, dt, T, seed, SimulateOptions{});
}

SimulationRun simulate(const GameParameters& params,
                       const MeanFieldSolution& solution,
                       const Population& pop, double dt, double T,
                       std::uint64_t seed, const SimulateOptions& options) {
  const auto setup =
      build_setup(params, solution, dt, T, options.stationary_gains);
  return run_engine(*setup, params, solution, pop, dt, T, seed, options);
}

CostDetail evaluate_cost_detail(const SimulationRun& run, int agent,
                                const GameParameters& params) {
  const int S = run.steps();
  require(S >= 1 && run.x0.rows() == S + 1 && run.xN.rows() == S + 1,
          "evaluate_cost: incomplete grid");
  require(agent >= 0 && agent <= run.pop.N, "evaluate_cost: agent id");

  CostDetail out;
  const double scale = std::exp(-params.rho * run.T) / params.rho;
  if (agent == 0) {
    for (int s = 0; s <= S; ++s) {
      const double disc = std::exp(-params.rho * run.time[s]);
      const Vector x0s = run.x0.row(s);
      const Vector u0 = run.u0.row(s);
      const Vector xNs = run.xN.row(s);
      accumulate(out.value, s, S, run.dt,
                 major_integrand(params, x0s, u0, xNs, disc));
      if (s == S)
        out.truncation_bound =
            scale * major_integrand(params, x0s, u0, xNs, 1.0);
    }
    return out;
  }

  const MinorSeries& m = run.minors[agent - 1];
  if (!m.recorded())
    throw IncompleteTrajectory(
        "evaluate_cost: minor series not recorded for this agent");
  for (int s = 0; s <= S; ++s) {
    const double disc = std::exp(-params.rho * run.time[s]);
    const Vector xis = m.x.row(s);
    const Vector uis = m.u.row(s);
    const Vector x0s = run.x0.row(s);
    const Vector xNs = run.xN.row(s);
    accumulate(out.value, s, S, run.dt,
               minor_integrand(params, xis, uis, x0s, xNs, disc));
    if (s == S)
      out.truncation_bound =
          scale * minor_integrand(params, xis, uis, x0s, xNs, 1.0);
  }
  return out;
}

double evaluate_cost(const SimulationRun& run, int agent,
                     const GameParameters& params) {
  return evaluate_cost_detail(run, agent, params).value;
}

NashGapReport estimate_nash_gap(const GameParameters& params,
                                const MeanFieldSolution& solution,
                                const Population& pop,
                                const DeviationSpec& deviation, int paths,
                                std::uint64_t seed,
                                const NashGapOptions& options) {
  require(paths >= 1, "estimate_nash_gap: paths must be at least 1");
  require(deviation.agent >= 0 && deviation.agent <= pop.N,
          "estimate_nash_gap: deviating agent outside the population");
  validate_population(params, pop);

  const auto setup = build_setup(params, solution, options.dt, options.T,
                                 options.stationary_gains);

  std::vector<std::pair<double, double>> family;
  if (deviation.include_identity) family.emplace_back(1.0, 1.0);
  for (double g : deviation.gain_scales) family.emplace_back(g, 1.0);
  for (double o : deviation.offset_scales) family.emplace_back(1.0, o);
  require(!family.empty(), "estimate_nash_gap: empty deviation family");
  const int D = static_cast<int>(family.size());

  Matrix gaps(paths, D);
  for_each_path(paths, options.threads, [&](int pth) {
    SimulateOptions so;
    so.path = static_cast<std::uint64_t>(pth);
    so.stationary_gains = options.stationary_gains;
    so.track_mean_field = false;
    so.record_minor_series = false;
    so.record_only_agent = deviation.agent;
    const SimulationRun eq = run_engine(*setup, params, solution, pop,
                                        options.dt, options.T, seed, so);
    for (int d = 0; d < D; ++d) {
      const double gs = family[d].first;
      const double os = family[d].second;
      double jdev = 0.0;
      if (deviation.agent == 0) {
        if (gs == 1.0 && os == 1.0) {
          // The identity rerun is the equilibrium run; determinism makes
          // the subtraction exact without paying for a second pass.
          jdev = eq.costs[0];
        } else {
          SimulateOptions sd = so;
          sd.deviating_agent = 0;
          sd.gain_scale = gs;
          sd.offset_scale = os;
          jdev = run_engine(*setup, params, solution, pop, options.dt,
                            options.T, seed, sd)
                     .costs[0];
        }
        gaps(pth, d) = jdev - eq.costs[0];
      } else {
        jdev = replay_minor_cost(*setup, params, solution, pop,
                                 deviation.agent, options.dt, seed,
                                 so.path, eq.x0, eq.xN,
                                 eq.minors[deviation.agent - 1].x, gs, os);
        gaps(pth, d) = jdev - eq.costs[deviation.agent];
      }
    }
  });

  NashGapReport report;
  report.N = pop.N;
  report.agent = deviation.agent;
  report.paths = paths;
  double worst = 0.0;
  for (int d = 0; d < D; ++d) {
    DeviationResult res;
    res.gain_scale = family[d].first;
    res.offset_scale = family[d].second;
    res.mean_gap = gaps.col(d).mean();
    if (paths > 1) {
      const double var =
          (gaps.col(d).array() - res.mean_gap).square().sum() / (paths - 1);
      res.std_error = std::sqrt(var / paths);
    }
    std::ostringstream desc;
    if (res.gain_scale == 1.0 && res.offset_scale == 1.0)
      desc << "equilibrium law";
    else if (res.offset_scale == 1.0)
      desc << "gain x" << res.gain_scale;
    else
      desc << "offset x" << res.offset_scale;
    res.description = desc.str();
    worst = std::min(worst, res.mean_gap);
    report.deviations.push_back(std::move(res));
  }
  report.epsilon_hat = std::max(0.0, -worst);
  return report;
}

StabilityReport stability_metrics(const SimulationRun& run, double rho,
                                  double tail_start) {
  const int S = run.steps();
  require(S >= 1 && run.second_moment.size() == S + 1,
          "stability_metrics: missing second-moment series");
  StabilityReport rep;
  rep.time = run.time;
  rep.envelope.resize(S + 1);
  rep.tail_start = tail_start < 0.0 ? 0.8 * run.T : tail_start;
  int arg = 0;
  for (int s = 0; s <= S; ++s) {
    rep.envelope[s] =
        std::exp(-0.5 * rho * run.time[s]) * run.second_moment[s];
    if (rep.envelope[s] > rep.envelope[arg]) arg = s;
    if (run.time[s] >= rep.tail_start)
      rep.tail_max = std::max(rep.tail_max, rep.envelope[s]);
  }
  rep.sup = rep.envelope[arg];
  rep.t_at_sup = run.time[arg];
  rep.tail_below_sup = rep.t_at_sup < rep.tail_start;
  return rep;
}

Vector en_terms(const SimulationRun& run, const GameParameters& params) {
  const int S = run.steps();
  const int n = params.n;
  Vector out(run.pop.N);
  for (int i = 0; i < run.pop.N; ++i) {
    const MinorSeries& m = run.minors[i];
    if (!m.recorded())
      throw IncompleteTrajectory("en_terms: minor series not recorded");
    double acc = 0.0;
    for (int s = 0; s <= S; ++s) {
      const double disc = std::exp(-params.rho * run.time[s]);
      const Vector e_own =
          m.x.row(s).transpose() - m.zhat.row(s).segment(0, n).transpose();
      const Vector e_x0 =
          run.x0.row(s).transpose() - m.zhat.row(s).segment(n, n).transpose();
      Vector xNhat = Vector::Zero(n);
      for (int k = 0; k < params.K; ++k)
        xNhat += run.pop.empirical_pi[k] *
                 m.zhat.row(s).segment(2 * n + k * n, n).transpose();
      const Vector e_mf = run.xN.row(s).transpose() - xNhat;
      const Vector d = e_own - params.H1 * e_x0 - params.H2 * e_mf;
      accumulate(acc, s, S, run.dt, disc * d.dot(params.Q * d));
    }
    out[i] = acc;
  }
  return out;
}

double en_deterministic(const GameParameters& params,
                        const MeanFieldSolution& solution, double dt,
                        double T) {
  const int S = steps_of(dt, T);
  const auto setup = build_setup(params, solution, dt, T, false);
  require(!setup->vk.empty(), "en_deterministic: missing covariance grid");
  const Matrix Qpi = q_pi(params);
  double det = 0.0;
  for (int k = 0; k < params.K; ++k)
    det += params.pi[k] *
           discounted_trace_integral(params, Qpi, setup->vk[k], dt, S);
  return det;
}

ENLimitReport estimate_EN_limit(const GameParameters& params,
                                const MeanFieldSolution& solution,
                                const std::vector<int>& N_schedule, int paths,
                                std::uint64_t seed,
                                const ENLimitOptions& options) {
  require(paths >= 1, "estimate_EN_limit: paths must be at least 1");
  require(!N_schedule.empty(), "estimate_EN_limit: empty schedule");
  const int S = steps_of(options.dt, options.T);
  const auto setup =
      build_setup(params, solution, options.dt, options.T, false);

  require(!setup->vk.empty(), "estimate_EN_limit: missing covariance grid");
  const Matrix Qpi = q_pi(params);
  double det = 0.0;
  for (int k = 0; k < params.K; ++k)
    det += params.pi[k] * discounted_trace_integral(params, Qpi,
                                                    setup->vk[k], options.dt,
                                                    S);

  ENLimitReport report;
  for (int N : N_schedule) {
    const Population pop =
        generate_population(params, N, options.mode, seed);
    std::vector<double> per_path(paths, 0.0);
    for_each_path(paths, options.threads, [&](int pth) {
      SimulateOptions so;
      so.path = static_cast<std::uint64_t>(pth);
      const SimulationRun run = run_engine(*setup, params, solution, pop,
                                           options.dt, options.T, seed, so);
      per_path[pth] = en_terms(run, params).mean();
    });
    ENLimitRow row;
    row.N = N;
    row.monte_carlo =
        std::accumulate(per_path.begin(), per_path.end(), 0.0) / paths;
    row.deterministic = det;
    row.rel_deviation =
        det > 0.0 ? std::abs(row.monte_carlo - det) / det
                  : std::abs(row.monte_carlo);
    report.rows.push_back(row);
  }
  return report;
}

double mean_field_gap(const SimulationRun& run) {
  const int S = run.steps();
  require(S >= 1, "mean_field_gap: empty run");
  if (run.xbar.rows() != S + 1)
    throw IncompleteTrajectory(
        "mean_field_gap: mean-field reference not recorded");
  const int n = static_cast<int>(run.xN.cols());
  const int K = static_cast<int>(run.pop.empirical_pi.size());
  double acc = 0.0;
  for (int s = 0; s <= S; ++s) {
    Vector mix = Vector::Zero(n);
    for (int k = 0; k < K; ++k)
      mix += run.pop.empirical_pi[k] *
             run.xbar.row(s).segment(k * n, n).transpose();
    acc += (run.xN.row(s).transpose() - mix).squaredNorm();
  }
  return std::sqrt(acc / (S + 1));
}

}  // namespace mmlqg
