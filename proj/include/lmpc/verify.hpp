#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "lmpc/memory.hpp"
#include "lmpc/model.hpp"
#include "lmpc/nlp.hpp"

namespace lmpc::verify {

using json = memory::json;

// ---------------------------------------------------------------------------
// Portable randomness: mt19937_64 is bit-stable across platforms, but the
// distribution adapters in <random> are not, so the mapping to doubles is
// done by hand. Samples are seeded individually, making results independent
// of evaluation order.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;  // [0, 1)
}

// Uniform sample from the probability simplex: normalized exponentials.
inline Vec simplex_sample(int dim, std::mt19937_64& rng) {
  Vec lam(dim);
  for (int i = 0; i < dim; ++i) lam[i] = -std::log(1.0 - uniform01(rng));
  const double total = lam.sum();
  if (total <= 0.0) return Vec::Constant(dim, 1.0 / dim);
  return lam / total;
}

// ---------------------------------------------------------------------------
// Sampled certificates. With num_samples independent draws all passing, the
// property holds with probability at least epsilon at confidence 1 - beta,
// where epsilon = beta^(1/num_samples).

struct SampleCertificate {
  long samples_drawn = 0;
  long samples_passed = 0;
  double beta = 0.0;
  double epsilon = 0.0;
  std::uint64_t rng_seed = 0;
  double elapsed_seconds = 0.0;

  bool clean() const { return samples_drawn > 0 && samples_passed == samples_drawn; }
};

inline double epsilon_bound(long num_samples, double beta) {
  if (num_samples <= 0) throw ConfigError("epsilon_bound needs a positive sample count");
  if (!(beta > 0.0 && beta < 1.0)) throw ConfigError("beta must lie in (0, 1)");
  return std::exp(-std::log(1.0 / beta) / static_cast<double>(num_samples));
}

// ---------------------------------------------------------------------------
// Closed-form input composition for the drag-limited double integrator
// x+ = [x + dt v, v + dt g(v) a], g(v) = 1 - v^2/v_max^2. For weights lam on
// stored pairs (v_k, a_k), the returned a satisfies
// g(sum lam v) a = sum lam g(v_k) a_k, which maps the combined state onto the
// same combination of the stored successors.
inline double compose_input_double_integrator(const std::vector<double>& velocities,
                                              const std::vector<double>& accelerations,
                                              const Vec& lambda, double v_max) {
  if (velocities.size() != accelerations.size() ||
      static_cast<int>(velocities.size()) != lambda.size())
    throw DimensionMismatch("compose_input_double_integrator");
  double v_mix = 0.0, weighted = 0.0;
  for (int k = 0; k < lambda.size(); ++k) {
    v_mix += lambda[k] * velocities[k];
    weighted += lambda[k] * (1.0 - velocities[k] * velocities[k] / (v_max * v_max)) *
                accelerations[k];
  }
  const double denom = 1.0 - v_mix * v_mix / (v_max * v_max);
  if (std::abs(denom) < 1e-12)
    throw DegenerateDenominator("mixed velocity sits on the drag singularity");
  return weighted / denom;
}

// ---------------------------------------------------------------------------
// Sampled check of the hull-invariance assumption: for random convex
// combinations of stored states there must exist an input mapping the
// combination into the hull of the stored successors. Each sample solves a
// small feasibility program in (u, mu); failures are counted, not thrown.

inline SampleCertificate sample_check_assumption4(const memory::SafeSetStore& store,
                                                  long num_samples, double beta,
                                                  std::uint64_t seed,
                                                  const nlp::SolverOptions& solver_opts = {}) {
  const auto t_begin = std::chrono::steady_clock::now();
  if (store.empty()) throw EmptyStore("sample_check_assumption4");
  const SystemModel& model = store.instance().model;
  const int n = model.n, d = model.d;

  // Pool of stored transitions (x_k, u_k, x_{k+1}).
  struct Transition {
    StateVec x;
    InputVec u;
    StateVec next;
  };
  std::vector<Transition> pool;
  for (int i = 0; i < store.num_iterations(); ++i) {
    const auto& tr = store.trajectory(i);
    for (int k = 0; k + 1 < static_cast<int>(tr.states.size()); ++k)
      pool.push_back({tr.states[k], tr.inputs[k], tr.states[k + 1]});
  }
  if (pool.empty()) throw EmptyStore("no stored transitions");

  const int m = n + 1;  // combination size: enough to hit any hull point
  SampleCertificate cert;
  cert.samples_drawn = num_samples;
  cert.beta = beta;
  cert.epsilon = epsilon_bound(num_samples, beta);
  cert.rng_seed = seed;

  for (long s = 0; s < num_samples; ++s) {
    std::mt19937_64 rng(splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(s))));
    std::vector<const Transition*> picks(m);
    for (int j = 0; j < m; ++j) picks[j] = &pool[rng() % pool.size()];
    const Vec lambda = simplex_sample(m, rng);

    StateVec x_mix = StateVec::Zero(n);
    InputVec u_mix = InputVec::Zero(d);
    Mat successors(n, m);
    for (int j = 0; j < m; ++j) {
      x_mix += lambda[j] * picks[j]->x;
      u_mix += lambda[j] * picks[j]->u;
      successors.col(j) = picks[j]->next;
    }

    nlp::NlpProblem p;
    p.dim = d + m;
    p.objective = [](const Vec&) { return 0.0; };
    p.gradient = [dim = p.dim](const Vec&) { return Vec::Zero(dim); };
    p.m_eq = n + 1;
    p.eq = [&model, x_mix, successors, d, m, n](const Vec& z) {
      Vec c(n + 1);
      const Vec mu = z.segment(d, m);
      c.head(n) = model.step(x_mix, z.head(d)) - successors * mu;
      c[n] = mu.sum() - 1.0;
      return c;
    };
    p.eq_jac = [&model, x_mix, successors, d, m, n](const Vec& z) {
      Mat A(n, n), B(n, d);
      model.step_jacobian(x_mix, z.head(d), A, B);
      Mat J = Mat::Zero(n + 1, d + m);
      J.topLeftCorner(n, d) = B;
      J.topRightCorner(n, m) = -successors;
      J.row(n).tail(m).setOnes();
      return J;
    };
    p.lower = Vec(d + m);
    p.upper = Vec(d + m);
    p.lower.head(d) = model.input_lower;
    p.upper.head(d) = model.input_upper;
    p.lower.tail(m).setZero();
    p.upper.tail(m).setOnes();

    Vec z0(d + m);
    z0.head(d) = u_mix.cwiseMax(model.input_lower).cwiseMin(model.input_upper);
    z0.tail(m) = lambda;
    try {
      const nlp::NlpSolution sol = nlp::solve(p, z0, solver_opts);
      if (sol.feasible(1e-6)) ++cert.samples_passed;
    } catch (const LmpcError&) {
      // counted as a failure
    }
  }
  cert.elapsed_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_begin).count();
  return cert;
}

// ---------------------------------------------------------------------------
// Trajectory audit: replays the recorded inputs through the model, re-checks
// constraints, goal arrival, and the per-step cost decrease. One line per
// property when a stream is supplied.

struct AuditReport {
  bool replay_ok = true;
  bool constraints_ok = true;
  bool goal_ok = true;
  bool decrease_ok = true;
  double max_replay_error = 0.0;
  double max_constraint_violation = 0.0;
  double worst_decrease_margin = 0.0;  // most negative slack across steps

  bool ok() const { return replay_ok && constraints_ok && goal_ok && decrease_ok; }
};

inline AuditReport audit_run(const BenchmarkInstance& inst, const memory::Trajectory& traj,
                             const std::vector<double>& step_costs, std::ostream* out = nullptr,
                             double cost_slack = 1e-4) {
  AuditReport rep;
  if (traj.states.empty()) throw AuditFailure("empty trajectory");

  StateVec x = traj.states.front();
  for (size_t k = 0; k + 1 < traj.states.size(); ++k) {
    x = inst.model.step(x, traj.inputs[k]);
    rep.max_replay_error = std::max(rep.max_replay_error, inf_norm(x - traj.states[k + 1]));
  }
  rep.replay_ok = rep.max_replay_error <= 1e-9;

  for (size_t k = 0; k < traj.states.size(); ++k) {
    const InputVec u = k < traj.inputs.size() ? traj.inputs[k] : InputVec::Zero(inst.model.d);
    rep.max_constraint_violation =
        std::max(rep.max_constraint_violation,
                 constraint_residuals(inst, traj.states[k], u).max_violation());
  }
  rep.constraints_ok = rep.max_constraint_violation <= 1e-6;

  rep.goal_ok = goal_reached(traj.states.back(), inst.goal, inst.goal_tol);

  // The controller's optimal cost must fall by a full unit per step away from
  // the goal, and reach zero-equivalent at arrival (the last step costs 1).
  for (size_t k = 0; k < step_costs.size(); ++k) {
    const double next = k + 1 < step_costs.size() ? step_costs[k + 1] : 0.0;
    const double margin = step_costs[k] - (1.0 + next);
    rep.worst_decrease_margin = std::min(rep.worst_decrease_margin, margin);
  }
  rep.decrease_ok = rep.worst_decrease_margin >= -cost_slack;

  if (out) {
    auto line = [&](bool ok, const std::string& name, double value) {
      *out << (ok ? "[PASS] " : "[FAIL] ") << name << " (" << value << ")\n";
    };
    line(rep.replay_ok, "replay-consistency", rep.max_replay_error);
    line(rep.constraints_ok, "constraint-residuals", rep.max_constraint_violation);
    line(rep.goal_ok, "goal-arrival", rep.goal_ok ? 0.0 : 1.0);
    line(rep.decrease_ok, "cost-decrease", rep.worst_decrease_margin);
  }
  return rep;
}

inline json certificate_to_json(const SampleCertificate& cert) {
  json j;
  j["samples_drawn"] = cert.samples_drawn;
  j["samples_passed"] = cert.samples_passed;
  j["beta"] = cert.beta;
  j["epsilon"] = cert.epsilon;
  j["rng_seed"] = cert.rng_seed;
  j["elapsed_seconds"] = cert.elapsed_seconds;
  j["clean_sweep"] = cert.clean();
  return j;
}

}  // namespace lmpc::verify
