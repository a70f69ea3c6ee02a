#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <future>
#include <map>
#include <memory>
#include <optional>
#include <utility>
#include <vector>

#include "lmpc/initializers.hpp"
#include "lmpc/memory.hpp"
#include "lmpc/model.hpp"
#include "lmpc/nlp.hpp"

namespace lmpc::controller {

enum class Mode { Enumeration, Relaxed, Robust };

inline const char* to_string(Mode m) {
  switch (m) {
    case Mode::Enumeration: return "enumeration";
    case Mode::Relaxed: return "relaxed";
    default: return "robust";
  }
}

struct LmpcConfig {
  Mode mode = Mode::Enumeration;
  int horizon = 0;                 // 0: use the instance default
  int use_last_iterations = 0;     // i: slice to the last i stored iterations (0: all)
  long points_per_iteration = -1;  // P: window length per iteration (negative: all)
  nlp::SolverOptions solver;
  int step_cap = 0;  // 0: 4x the duration of the first stored trajectory
  bool parallel_candidates = false;
  double cost_slack = 1e-4;
  // Terminal-set handling inside robust steps (enumeration or relaxed).
  Mode robust_terminal = Mode::Enumeration;
};

struct StepResult {
  InputVec input;
  std::vector<StateVec> predicted_states;  // x_t .. x_{t+H}
  std::vector<InputVec> predicted_inputs;  // H entries
  double cost = 0.0;                       // objective value of the winning program
  bool probe = false;                      // end-game reach-the-goal-in-m shortcut
  int probe_steps = 0;
  int terminal_iteration = -1;  // enumeration pick (also the top weight in relaxed)
  int terminal_time_index = -1;
  bool terminal_padded = false;
  StateVec terminal_state;  // the picked candidate's state (disambiguates goal vertices)
  Vec lambda;                                      // relaxed weights over `candidates`
  std::vector<memory::CandidatePoint> candidates;  // list the lambda indexes into
  double goal_weight = 0.0;  // weight on zero-cost terminal candidates (1 for probes)
  int candidates_evaluated = 0;
  int nlp_solves = 0;
  double solve_time = 0.0;  // seconds
  // Constraint violation of the shifted previous solution used to start this
  // step's program. Negative when no shifted start existed (cold start). The
  // one-step cost decrease bound is only guaranteed when this is ~zero: a
  // weight mix shifts exactly only under linear dynamics.
  double warm_residual = -1.0;
};

struct IterationRecord {
  int iteration = 0;
  memory::Trajectory trajectory;
  std::vector<StepResult> steps;
  int T_j = 0;
  bool feasible_every_step = true;
};

// One stored-point weight from the previous relaxed solution, already shifted
// by one time step. The state pins down which stored point is meant: goal
// entries replicate one (iteration, time_index) across several goal vertices,
// so the index pair alone is ambiguous there.
struct SupportEntry {
  int iteration = 0;
  int time_index = 0;
  double weight = 0.0;
  StateVec state;
};

// Carries the shifted previous solution between closed-loop steps.
struct WarmStart {
  std::vector<InputVec> inputs;
  std::vector<SupportEntry> lambda_support;
};

namespace detail {

inline int effective_horizon(const BenchmarkInstance& inst, const LmpcConfig& cfg) {
  const int N = cfg.horizon > 0 ? cfg.horizon : inst.horizon;
  if (N < 1) throw ConfigError("horizon must be >= 1");
  return N;
}

inline memory::SubsetSpec subset_for(const memory::SafeSetStore& store, const LmpcConfig& cfg) {
  memory::SubsetSpec spec;
  spec.points_per_iteration = cfg.points_per_iteration;
  spec.first_iteration =
      cfg.use_last_iterations > 0 ? std::max(0, store.num_iterations() - cfg.use_last_iterations)
                                  : 0;
  return spec;
}

// Number of window slots the step enumerates, before deduplication: the
// published workload measure. Probes are counted by the caller.
inline int window_slots(const memory::SafeSetStore& store, int t_query,
                        const memory::SubsetSpec& spec) {
  int slots = 0;
  for (int i = std::max(0, spec.first_iteration); i < store.num_iterations(); ++i) {
    const int Ti = store.trajectory(i).duration();
    const int delta = store.delta_index(t_query, i);
    slots += spec.capped() ? static_cast<int>(spec.points_per_iteration) : (Ti - delta + 1);
  }
  return slots;
}

inline Vec stack_inputs(const std::vector<InputVec>& inputs) {
  if (inputs.empty()) return Vec(0);
  const int d = static_cast<int>(inputs[0].size());
  Vec u(static_cast<int>(inputs.size()) * d);
  for (size_t k = 0; k < inputs.size(); ++k) u.segment(static_cast<int>(k) * d, d) = inputs[k];
  return u;
}

inline std::vector<InputVec> unstack_inputs(const Vec& u, int H, int d) {
  std::vector<InputVec> out(H);
  for (int k = 0; k < H; ++k) out[k] = u.segment(k * d, d);
  return out;
}

// Single-shooting rollout with input sensitivities, memoized on the exact
// input vector because the solver asks for values and Jacobians at the same
// point back to back.
struct Transcription {
  SystemModel model;
  StateVec x0;
  int H = 0;

  mutable Vec cached_u;
  mutable std::vector<StateVec> states;  // H+1
  mutable std::vector<Mat> sens;         // d x_k / d u_stacked, n x (H*d)
  mutable bool have_sens = false;

  void ensure(const Vec& u, bool want_sens) const {
    const int n = model.n, d = model.d;
    if (cached_u.size() == u.size() && cached_u == u && (!want_sens || have_sens)) return;
    states.assign(1, x0);
    if (want_sens) {
      sens.assign(1, Mat::Zero(n, H * d));
      have_sens = true;
    } else {
      sens.clear();
      have_sens = false;
    }
    Mat A(n, n), B(n, d);
    for (int k = 0; k < H; ++k) {
      const InputVec uk = u.segment(k * d, d);
      StateVec next = model.step(states.back(), uk);
      if (!next.allFinite()) throw CallbackFailure("non-finite rollout state");
      if (want_sens) {
        model.step_jacobian(states.back(), uk, A, B);
        Mat Sk = A * sens.back();
        Sk.middleCols(k * d, d) += B;
        sens.push_back(std::move(Sk));
      }
      states.push_back(std::move(next));
    }
    cached_u = u;
  }
};

// Feasibility program: steer to a fixed terminal state in H steps. Interior
// states keep the model's inequality constraints; the terminal state is a
// stored (feasible) point, so only the equality is needed there.
inline nlp::NlpProblem reach_problem(const BenchmarkInstance& inst, const StateVec& x_t,
                                     const StateVec& target, int H) {
  auto tr = std::make_shared<Transcription>();
  tr->model = inst.model;
  tr->x0 = x_t;
  tr->H = H;
  const int n = inst.model.n, d = inst.model.d, ns = inst.model.num_state_ineq;

  nlp::NlpProblem p;
  p.dim = H * d;
  p.objective = [](const Vec&) { return 0.0; };
  p.gradient = [dim = p.dim](const Vec&) { return Vec::Zero(dim); };
  p.m_eq = n;
  p.eq = [tr, target](const Vec& u) {
    tr->ensure(u, false);
    return Vec(tr->states.back() - target);
  };
  p.eq_jac = [tr](const Vec& u) {
    tr->ensure(u, true);
    return tr->sens.back();
  };
  p.m_ineq = ns * std::max(0, H - 1);
  if (p.m_ineq) {
    p.ineq = [tr, ns, H](const Vec& u) {
      tr->ensure(u, false);
      Vec h(ns * (H - 1));
      for (int k = 1; k < H; ++k) h.segment((k - 1) * ns, ns) = tr->model.state_ineq(tr->states[k]);
      return h;
    };
    p.ineq_jac = [tr, ns, H, d](const Vec& u) {
      tr->ensure(u, true);
      Mat J(ns * (H - 1), H * d);
      for (int k = 1; k < H; ++k)
        J.middleRows((k - 1) * ns, ns) = tr->model.state_ineq_jacobian(tr->states[k]) * tr->sens[k];
      return J;
    };
  }
  p.lower = Vec(H * d);
  p.upper = Vec(H * d);
  for (int k = 0; k < H; ++k) {
    p.lower.segment(k * d, d) = inst.model.input_lower;
    p.upper.segment(k * d, d) = inst.model.input_upper;
  }
  return p;
}

// Goal probe: reach the goal set in exactly H steps. Point goals and
// degenerate box dimensions become equalities, wide box dimensions become a
// pair of inequalities on the terminal state.
inline nlp::NlpProblem goal_probe_problem(const BenchmarkInstance& inst, const StateVec& x_t,
                                          int H) {
  if (inst.goal.kind == GoalSpec::Kind::Point) return reach_problem(inst, x_t, inst.goal.point, H);

  auto tr = std::make_shared<Transcription>();
  tr->model = inst.model;
  tr->x0 = x_t;
  tr->H = H;
  const int n = inst.model.n, d = inst.model.d, ns = inst.model.num_state_ineq;
  std::vector<int> eq_dims, box_dims;
  for (int i = 0; i < n; ++i)
    (inst.goal.upper[i] - inst.goal.lower[i] <= 1e-12 ? eq_dims : box_dims).push_back(i);

  nlp::NlpProblem p;
  p.dim = H * d;
  p.objective = [](const Vec&) { return 0.0; };
  p.gradient = [dim = p.dim](const Vec&) { return Vec::Zero(dim); };
  p.m_eq = static_cast<int>(eq_dims.size());
  if (p.m_eq) {
    p.eq = [tr, eq_dims, goal = inst.goal](const Vec& u) {
      tr->ensure(u, false);
      Vec c(eq_dims.size());
      for (size_t i = 0; i < eq_dims.size(); ++i)
        c[i] = tr->states.back()[eq_dims[i]] - goal.lower[eq_dims[i]];
      return c;
    };
    p.eq_jac = [tr, eq_dims](const Vec& u) {
      tr->ensure(u, true);
      Mat J(eq_dims.size(), u.size());
      for (size_t i = 0; i < eq_dims.size(); ++i) J.row(i) = tr->sens.back().row(eq_dims[i]);
      return J;
    };
  }
  const int interior = ns * std::max(0, H - 1);
  p.m_ineq = interior + 2 * static_cast<int>(box_dims.size());
  p.ineq = [tr, ns, H, box_dims, interior, goal = inst.goal](const Vec& u) {
    tr->ensure(u, false);
    Vec h(interior + 2 * box_dims.size());
    for (int k = 1; k < H; ++k) h.segment((k - 1) * ns, ns) = tr->model.state_ineq(tr->states[k]);
    for (size_t i = 0; i < box_dims.size(); ++i) {
      const int dim_i = box_dims[i];
      h[interior + 2 * i] = tr->states.back()[dim_i] - goal.upper[dim_i];
      h[interior + 2 * i + 1] = goal.lower[dim_i] - tr->states.back()[dim_i];
    }
    return h;
  };
  p.ineq_jac = [tr, ns, H, d, box_dims, interior](const Vec& u) {
    tr->ensure(u, true);
    Mat J = Mat::Zero(interior + 2 * box_dims.size(), H * d);
    for (int k = 1; k < H; ++k)
      J.middleRows((k - 1) * ns, ns) = tr->model.state_ineq_jacobian(tr->states[k]) * tr->sens[k];
    for (size_t i = 0; i < box_dims.size(); ++i) {
      J.row(interior + 2 * i) = tr->sens.back().row(box_dims[i]);
      J.row(interior + 2 * i + 1) = -tr->sens.back().row(box_dims[i]);
    }
    return J;
  };
  p.lower = Vec(H * d);
  p.upper = Vec(H * d);
  for (int k = 0; k < H; ++k) {
    p.lower.segment(k * d, d) = inst.model.input_lower;
    p.upper.segment(k * d, d) = inst.model.input_upper;
  }
  return p;
}

// Relaxed program: inputs plus simplex weights over the candidate states;
// terminal state pinned to the weighted combination, objective is the
// weighted stored cost.
inline nlp::NlpProblem relaxed_problem(const BenchmarkInstance& inst, const StateVec& x_t, int H,
                                       const std::vector<memory::CandidatePoint>& cands) {
  auto tr = std::make_shared<Transcription>();
  tr->model = inst.model;
  tr->x0 = x_t;
  tr->H = H;
  const int n = inst.model.n, d = inst.model.d, ns = inst.model.num_state_ineq;
  const int nu = H * d, K = static_cast<int>(cands.size());
  Mat Z(n, K);
  Vec costs(K);
  for (int j = 0; j < K; ++j) {
    Z.col(j) = cands[j].state;
    costs[j] = cands[j].cost_to_go;
  }

  nlp::NlpProblem p;
  p.dim = nu + K;
  p.objective = [costs, nu, K](const Vec& z) { return costs.dot(z.segment(nu, K)); };
  p.gradient = [costs, nu, K](const Vec& z) {
    Vec g = Vec::Zero(z.size());
    g.segment(nu, K) = costs;
    return g;
  };
  p.m_eq = n + 1;
  p.eq = [tr, Z, nu, K, n](const Vec& z) {
    tr->ensure(z.head(nu), false);
    Vec c(n + 1);
    const Vec lam = z.segment(nu, K);
    c.head(n) = tr->states.back() - Z * lam;
    c[n] = lam.sum() - 1.0;
    return c;
  };
  p.eq_jac = [tr, Z, nu, K, n](const Vec& z) {
    tr->ensure(z.head(nu), true);
    Mat J = Mat::Zero(n + 1, nu + K);
    J.topLeftCorner(n, nu) = tr->sens.back();
    J.topRightCorner(n, K) = -Z;
    J.row(n).segment(nu, K).setOnes();
    return J;
  };
  p.m_ineq = ns * std::max(0, H - 1);
  if (p.m_ineq) {
    p.ineq = [tr, ns, H, nu](const Vec& z) {
      tr->ensure(z.head(nu), false);
      Vec h(ns * (H - 1));
      for (int k = 1; k < H; ++k) h.segment((k - 1) * ns, ns) = tr->model.state_ineq(tr->states[k]);
      return h;
    };
    p.ineq_jac = [tr, ns, H, d, nu, K](const Vec& z) {
      tr->ensure(z.head(nu), true);
      Mat J = Mat::Zero(ns * (H - 1), nu + K);
      for (int k = 1; k < H; ++k)
        J.middleRows((k - 1) * ns, ns).leftCols(nu) =
            tr->model.state_ineq_jacobian(tr->states[k]) * tr->sens[k];
      return J;
    };
  }
  p.lower = Vec(nu + K);
  p.upper = Vec(nu + K);
  for (int k = 0; k < H; ++k) {
    p.lower.segment(k * d, d) = inst.model.input_lower;
    p.upper.segment(k * d, d) = inst.model.input_upper;
  }
  p.lower.segment(nu, K).setZero();
  p.upper.segment(nu, K).setOnes();
  return p;
}

inline std::vector<StateVec> rollout(const SystemModel& m, const StateVec& x0,
                                     const std::vector<InputVec>& inputs) {
  std::vector<StateVec> states = {x0};
  for (const auto& u : inputs) states.push_back(m.step(states.back(), u));
  return states;
}

// Warm-start inputs for an H-step program: the shifted tail plus zero padding.
inline std::vector<InputVec> warm_inputs(const WarmStart* warm, int H, int d) {
  std::vector<InputVec> u(H, InputVec::Zero(d));
  if (warm)
    for (int k = 0; k < H && k < static_cast<int>(warm->inputs.size()); ++k)
      u[k] = warm->inputs[k];
  return u;
}

inline bool accept(const nlp::NlpSolution& sol, const nlp::SolverOptions& opt) {
  return sol.status == nlp::SolveStatus::Optimal || sol.feasible(opt.tol_feas);
}

// Try the end-game probes in ascending length; any feasible probe dominates
// every candidate program (its cost m is below the baseline N).
inline std::optional<StepResult> try_probes(const BenchmarkInstance& inst, const StateVec& x_t,
                                            int N, const LmpcConfig& cfg, const WarmStart* warm,
                                            int* solves) {
  for (int m = 1; m < N; ++m) {
    if (inst.model.min_steps && inst.model.min_steps(x_t, inst.goal.lower, inst.goal.upper) > m)
      continue;
    nlp::NlpProblem p = goal_probe_problem(inst, x_t, m);
    const Vec u0 = stack_inputs(warm_inputs(warm, m, inst.model.d));
    nlp::NlpSolution sol = nlp::solve(p, u0, cfg.solver);
    ++*solves;
    if (!accept(sol, cfg.solver)) continue;
    StepResult r;
    r.probe = true;
    r.probe_steps = m;
    r.cost = m;
    r.goal_weight = 1.0;
    r.warm_residual = 0.0;  // a verified reach plan: the decrease bound applies
    r.predicted_inputs = unstack_inputs(sol.z, m, inst.model.d);
    r.predicted_states = rollout(inst.model, x_t, r.predicted_inputs);
    r.input = r.predicted_inputs[0];
    return r;
  }
  return std::nullopt;
}

struct CandidateOrder {
  int index;  // into the candidate list
  double total_cost;
};

inline std::vector<CandidateOrder> sorted_candidates(
    const std::vector<memory::CandidatePoint>& cands, int N) {
  std::vector<CandidateOrder> order(cands.size());
  for (size_t j = 0; j < cands.size(); ++j)
    order[j] = {static_cast<int>(j), N + cands[j].cost_to_go};
  std::sort(order.begin(), order.end(), [&](const CandidateOrder& a, const CandidateOrder& b) {
    return std::tuple(a.total_cost, cands[a.index].iteration, cands[a.index].time_index) <
           std::tuple(b.total_cost, cands[b.index].iteration, cands[b.index].time_index);
  });
  return order;
}

}  // namespace detail

// One receding-horizon step of the enumeration controller: per stored
// candidate terminal state, an H-step reach program; cheapest feasible one
// wins. Candidates are tried in (cost, iteration, time index) order, so the
// first feasible program is the optimum and the remaining solves can be
// skipped; unreachable candidates are screened by the model's step bound.
inline StepResult enumeration_step(const BenchmarkInstance& inst,
                                   const memory::SafeSetStore& store, const LmpcConfig& cfg,
                                   const StateVec& x_t, int t,
                                   const WarmStart* warm = nullptr) {
  const auto t_begin = std::chrono::steady_clock::now();
  const int N = detail::effective_horizon(inst, cfg);
  const auto spec = detail::subset_for(store, cfg);
  const auto cands = store.safe_set(t + N, spec);
  const int evaluated = detail::window_slots(store, t + N, spec) + (N - 1);
  int solves = 0;

  std::optional<StepResult> result = detail::try_probes(inst, x_t, N, cfg, warm, &solves);

  if (!result) {
    const auto order = detail::sorted_candidates(cands, N);
    const Vec u0 = detail::stack_inputs(detail::warm_inputs(warm, N, inst.model.d));

    auto attempt = [&](int idx) -> std::optional<nlp::NlpSolution> {
      const auto& c = cands[idx];
      if (inst.model.min_steps && inst.model.min_steps(x_t, c.state, c.state) > N)
        return std::nullopt;
      nlp::NlpProblem p = detail::reach_problem(inst, x_t, c.state, N);
      nlp::NlpSolution sol = nlp::solve(p, u0, cfg.solver);
      if (!detail::accept(sol, cfg.solver)) return std::nullopt;
      return sol;
    };

    auto finish = [&](int idx, const nlp::NlpSolution& sol, double total_cost) {
      StepResult r;
      r.cost = total_cost;
      r.terminal_iteration = cands[idx].iteration;
      r.terminal_time_index = cands[idx].time_index;
      r.terminal_padded = cands[idx].padded;
      r.terminal_state = cands[idx].state;
      r.goal_weight = cands[idx].cost_to_go == 0.0 ? 1.0 : 0.0;
      r.predicted_inputs = detail::unstack_inputs(sol.z, N, inst.model.d);
      r.predicted_states = detail::rollout(inst.model, x_t, r.predicted_inputs);
      r.input = r.predicted_inputs[0];
      result = std::move(r);
    };

    if (!cfg.parallel_candidates) {
      for (const auto& o : order) {
        auto sol = attempt(o.index);
        ++solves;
        if (sol) {
          finish(o.index, *sol, o.total_cost);
          break;
        }
      }
    } else {
      // Evaluate everything, reduce deterministically by the same order.
      std::vector<std::future<std::optional<nlp::NlpSolution>>> futs;
      futs.reserve(order.size());
      for (const auto& o : order)
        futs.push_back(std::async(std::launch::async, attempt, o.index));
      std::vector<std::optional<nlp::NlpSolution>> sols(order.size());
      for (size_t j = 0; j < order.size(); ++j) {
        sols[j] = futs[j].get();
        ++solves;
      }
      for (size_t j = 0; j < order.size(); ++j)
        if (sols[j]) {
          finish(order[j].index, *sols[j], order[j].total_cost);
          break;
        }
    }
  }

  if (!result)
    throw NoFeasibleCandidate("enumeration step at t=" + std::to_string(t) + " with " +
                              std::to_string(cands.size()) + " candidates");
  result->candidates_evaluated = evaluated;
  result->nlp_solves = solves;
  result->solve_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_begin)
                           .count();
  return std::move(*result);
}

// One step of the relaxed controller: a single program over inputs and
// simplex weights. Started from the shifted previous solution; if the solver
// cannot certify that start, it falls back to the one-hot weight on the
// shifted stored candidate, which is feasible by construction.
inline StepResult relaxed_step(const BenchmarkInstance& inst, const memory::SafeSetStore& store,
                               const LmpcConfig& cfg, const StateVec& x_t, int t,
                               const WarmStart* warm = nullptr) {
  const auto t_begin = std::chrono::steady_clock::now();
  const int N = detail::effective_horizon(inst, cfg);
  const auto spec = detail::subset_for(store, cfg);
  const auto cands = store.safe_set(t + N, spec);
  const int K = static_cast<int>(cands.size());
  const int evaluated = detail::window_slots(store, t + N, spec) + (N - 1);
  int solves = 0;

  std::optional<StepResult> result = detail::try_probes(inst, x_t, N, cfg, warm, &solves);

  if (!result) {
    const int nu = N * inst.model.d;
    nlp::NlpProblem p = detail::relaxed_problem(inst, x_t, N, cands);

    auto find_candidate = [&](const SupportEntry& s) {
      int by_index = -1;
      for (int j = 0; j < K; ++j) {
        if (cands[j].iteration == s.iteration && cands[j].time_index == s.time_index) {
          if (!s.state.size() || inf_norm(cands[j].state - s.state) <= 1e-12) return j;
          if (by_index < 0) by_index = j;
        }
      }
      // Index fell outside the window (or points at a different goal vertex):
      // the carried state still identifies the point exactly.
      if (s.state.size())
        for (int j = 0; j < K; ++j)
          if (inf_norm(cands[j].state - s.state) <= 1e-12) return j;
      return by_index;
    };

    // Map the shifted weight support onto this step's candidate list.
    Vec lam0 = Vec::Zero(K);
    if (warm && !warm->lambda_support.empty()) {
      for (const auto& s : warm->lambda_support) {
        int j = find_candidate(s);
        if (j < 0) {
          // Weight whose successor fell out of the window: push it to the
          // nearest candidate, preferring goal entries.
          double best_d = 1e100;
          for (int q = 0; q < K; ++q) {
            const double dist = cands[q].cost_to_go * 1e6 +
                                (s.state.size() ? inf_norm(cands[q].state - s.state) : 0.0);
            if (dist < best_d) {
              best_d = dist;
              j = q;
            }
          }
        }
        if (j >= 0) lam0[j] += s.weight;
      }
      const double total = lam0.sum();
      if (total > 1e-12) lam0 /= total;
    }
    const bool shifted_start = lam0.sum() > 0.5;
    if (!shifted_start) {
      // Cold start: one-hot on the cheapest candidate nearest the rollout end.
      const auto guess = detail::rollout(inst.model, x_t,
                                         detail::warm_inputs(warm, N, inst.model.d));
      int j_best = 0;
      double best = 1e100;
      for (int j = 0; j < K; ++j) {
        const double dist = inf_norm(cands[j].state - guess.back());
        if (dist < best) {
          best = dist;
          j_best = j;
        }
      }
      lam0.setZero();
      lam0[j_best] = 1.0;
    }

    Vec z0(nu + K);
    z0.head(nu) = detail::stack_inputs(detail::warm_inputs(warm, N, inst.model.d));
    z0.segment(nu, K) = lam0;
    double warm_viol = -1.0;
    if (shifted_start) {
      warm_viol = p.m_eq ? inf_norm(p.eq(z0)) : 0.0;
      if (p.m_ineq) warm_viol = std::max(warm_viol, std::max(0.0, p.ineq(z0).maxCoeff()));
    }
    nlp::NlpSolution sol = nlp::solve(p, z0, cfg.solver);
    ++solves;
    {
      // Also try cold one-hot starts in candidate cost order, screened the
      // way enumeration screens reachability. The first accepted one is kept
      // when it beats the warm-started solution: the warm basin tracks the
      // previous groove and is not always the cheapest one.
      const auto order = detail::sorted_candidates(cands, N);
      for (const auto& o : order) {
        const auto& c = cands[o.index];
        if (inst.model.min_steps && inst.model.min_steps(x_t, c.state, c.state) > N) continue;
        Vec z1 = z0;
        z1.segment(nu, K).setZero();
        z1[nu + o.index] = 1.0;
        nlp::NlpSolution alt = nlp::solve(p, z1, cfg.solver);
        ++solves;
        if (!detail::accept(alt, cfg.solver)) continue;
        if (!detail::accept(sol, cfg.solver) || alt.objective < sol.objective)
          sol = std::move(alt);
        break;
      }
    }
    if (detail::accept(sol, cfg.solver)) {
      StepResult r;
      r.cost = N + sol.objective;
      r.lambda = sol.z.segment(nu, K);
      r.candidates = cands;
      for (int j = 0; j < K; ++j)
        if (cands[j].cost_to_go == 0.0) r.goal_weight += std::max(0.0, r.lambda[j]);
      int j_top = 0;
      for (int j = 1; j < K; ++j)
        if (r.lambda[j] > r.lambda[j_top]) j_top = j;
      r.terminal_iteration = cands[j_top].iteration;
      r.terminal_time_index = cands[j_top].time_index;
      r.terminal_padded = cands[j_top].padded;
      r.terminal_state = cands[j_top].state;
      r.warm_residual = warm_viol;
      r.predicted_inputs = detail::unstack_inputs(sol.z.head(nu), N, inst.model.d);
      r.predicted_states = detail::rollout(inst.model, x_t, r.predicted_inputs);
      r.input = r.predicted_inputs[0];
      result = std::move(r);
    }
  }

  if (!result)
    throw NoFeasibleCandidate("relaxed step at t=" + std::to_string(t) + " with " +
                              std::to_string(K) + " candidates");
  result->candidates_evaluated = evaluated;
  result->nlp_solves = solves;
  result->solve_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_begin)
                           .count();
  return std::move(*result);
}

namespace detail {

// Builds the warm start for time t+1 from the step just taken: shifted inputs
// with the stored continuation appended, and the shifted weight support.
inline WarmStart shift_warm(const BenchmarkInstance& inst, const memory::SafeSetStore& store,
                            const StepResult& step) {
  WarmStart w;
  for (size_t k = 1; k < step.predicted_inputs.size(); ++k)
    w.inputs.push_back(step.predicted_inputs[k]);

  if (step.probe) return w;  // the shortened probe needs no continuation

  // Successor of a stored point one step later: the next stored state, or the
  // point itself for goal entries (goal points and box vertices hold still
  // under the zero continuation input).
  auto next_state = [&](int iter, int k, const StateVec& state, bool padded) {
    if (padded || iter < 0) return state;
    const auto& tr = store.trajectory(iter);
    return tr.states[std::min(k + 1, tr.duration())];
  };

  InputVec cont = InputVec::Zero(inst.model.d);
  if (!step.lambda.size()) {
    if (!step.terminal_padded && step.terminal_iteration >= 0) {
      const auto& tr = store.trajectory(step.terminal_iteration);
      if (step.terminal_time_index < static_cast<int>(tr.inputs.size()))
        cont = tr.inputs[step.terminal_time_index];
    }
    w.lambda_support = {{step.terminal_iteration, step.terminal_time_index + 1, 1.0,
                         next_state(step.terminal_iteration, step.terminal_time_index,
                                    step.terminal_state, step.terminal_padded)}};
  } else {
    // Weighted stored continuation; padded entries park with zero input.
    for (int j = 0; j < step.lambda.size(); ++j) {
      const double weight = std::max(0.0, step.lambda[j]);
      if (weight <= 1e-12) continue;
      const auto& c = step.candidates[j];
      if (!c.padded && c.time_index < static_cast<int>(store.trajectory(c.iteration).inputs.size()))
        cont += weight * store.trajectory(c.iteration).inputs[c.time_index];
      w.lambda_support.push_back({c.iteration, c.time_index + 1, weight,
                                  next_state(c.iteration, c.time_index, c.state, c.padded)});
    }
    cont = cont.cwiseMax(inst.model.input_lower).cwiseMin(inst.model.input_upper);
  }
  w.inputs.push_back(cont);
  return w;
}

// Warm start for the first closed-loop step: the prefix of the best stored
// trajectory, which certifies feasibility at t = 0 from the start state.
inline WarmStart initial_warm(const memory::SafeSetStore& store, int N) {
  int best = 0;
  for (int i = 1; i < store.num_iterations(); ++i)
    if (store.trajectory(i).duration() <= store.trajectory(best).duration()) best = i;
  WarmStart w;
  const auto& tr = store.trajectory(best);
  for (int k = 0; k < N && k < static_cast<int>(tr.inputs.size()); ++k)
    w.inputs.push_back(tr.inputs[k]);
  const int k0 = std::min(N, tr.duration());
  w.lambda_support = {{best, k0, 1.0, tr.states[k0]}};
  return w;
}

}  // namespace detail

inline StepResult dispatch_step(const BenchmarkInstance& inst, const memory::SafeSetStore& store,
                                const LmpcConfig& cfg, const StateVec& x_t, int t,
                                const WarmStart* warm) {
  switch (cfg.mode) {
    case Mode::Enumeration: return enumeration_step(inst, store, cfg, x_t, t, warm);
    case Mode::Relaxed: return relaxed_step(inst, store, cfg, x_t, t, warm);
    default: throw ConfigError("robust mode uses run_robust_iteration");
  }
}

// Decides membership in the N-step controllable set of the stored safe set:
// true iff the t = 0 program (any variant) is feasible from x_0.
inline bool check_initial_condition(const BenchmarkInstance& inst,
                                    const memory::SafeSetStore& store, const LmpcConfig& cfg,
                                    const StateVec& x_0) {
  if (store.empty()) throw EmptyStore("check_initial_condition");
  if (inst.model.num_state_ineq && inst.model.state_ineq(x_0).maxCoeff() > 1e-6) return false;
  const int N = detail::effective_horizon(inst, cfg);
  const WarmStart warm = detail::initial_warm(store, N);
  try {
    dispatch_step(inst, store, cfg, x_0, 0, &warm);
    return true;
  } catch (const NoFeasibleCandidate&) {
    return false;
  }
}

// Runs one closed-loop iteration from x_0 until the goal set is reached.
// Enforces the guarantees the theory provides: costs never increase, and the
// enumeration cost (like any probe-resolved step) decreases by one full unit
// per step; the relaxed cost may shed less when the optimal weights already
// sit partly on zero-cost candidates, so its hard floor is 1 - goal_weight.
inline IterationRecord run_iteration(const BenchmarkInstance& inst, memory::SafeSetStore& store,
                                     const LmpcConfig& cfg, const StateVec& x_0) {
  if (store.empty()) throw EmptyStore("run_iteration");
  const int N = detail::effective_horizon(inst, cfg);
  const int cap = cfg.step_cap > 0 ? cfg.step_cap : 4 * store.trajectory(0).duration();
  if (cap < N) throw ConfigError("step_cap below the horizon");
  if (inst.model.num_state_ineq && inst.model.state_ineq(x_0).maxCoeff() > 1e-6)
    throw NoFeasibleCandidate("initial state violates state constraints");

  IterationRecord rec;
  rec.trajectory.states.push_back(x_0);
  WarmStart warm = detail::initial_warm(store, N);

  StateVec x = x_0;
  for (int t = 0; t < cap && !goal_reached(x, inst.goal, inst.goal_tol); ++t) {
    StepResult step = dispatch_step(inst, store, cfg, x, t, &warm);

    if (!rec.steps.empty()) {
      const StepResult& prev = rec.steps.back();
      const double floor_decrease =
          (prev.probe || cfg.mode == Mode::Enumeration) ? 1.0 : (1.0 - prev.goal_weight);
      // The bound presumes the shifted previous solution is feasible for this
      // step's program. Enumeration shifts along a stored trajectory, which is
      // exact; a relaxed weight mix is exact only under linear dynamics, so
      // there the premise is checked numerically before enforcing.
      const bool bound_applies =
          cfg.mode == Mode::Enumeration ||
          (step.warm_residual >= 0.0 && step.warm_residual <= cfg.solver.tol_feas);
      if (bound_applies && step.cost > prev.cost - floor_decrease + cfg.cost_slack)
        throw CostDecreaseViolation("cost " + std::to_string(prev.cost) + " -> " +
                                    std::to_string(step.cost) + " at t=" + std::to_string(t));
    }

    const ConstraintResiduals res = constraint_residuals(inst, x, step.input);
    if (res.max_violation() > 1e-6) rec.feasible_every_step = false;

    x = inst.model.step(x, step.input);
    rec.trajectory.inputs.push_back(step.input);
    rec.trajectory.states.push_back(x);
    warm = detail::shift_warm(inst, store, step);
    rec.steps.push_back(std::move(step));
  }
  if (!goal_reached(x, inst.goal, inst.goal_tol))
    throw StepCapExceeded("no arrival within " + std::to_string(cap) + " steps");

  rec.trajectory.inputs.push_back(InputVec::Zero(inst.model.d));
  rec.T_j = rec.trajectory.duration();
  return rec;
}

// Full learning run: seed the store with the benchmark initializer, then run
// and absorb num_iterations closed-loop iterations from the start state.
inline std::vector<IterationRecord> run_task(const BenchmarkInstance& inst, const LmpcConfig& cfg,
                                             int num_iterations, memory::SafeSetStore* store_out =
                                                                     nullptr) {
  memory::SafeSetStore local(inst);
  memory::SafeSetStore& store = store_out ? *store_out : local;
  std::vector<IterationRecord> records;

  if (store.empty()) {
    IterationRecord rec;
    rec.iteration = 0;
    rec.trajectory = initial_feasible_trajectory(inst);
    rec.T_j = rec.trajectory.duration();
    store.add_trajectory(rec.trajectory);
    records.push_back(std::move(rec));
  }

  for (int j = 1; j <= num_iterations; ++j) {
    IterationRecord rec = run_iteration(inst, store, cfg, inst.x_start);
    rec.iteration = store.num_iterations();
    store.add_trajectory(rec.trajectory);
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace lmpc::controller
