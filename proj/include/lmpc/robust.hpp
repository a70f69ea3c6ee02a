#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <memory>
#include <optional>
#include <random>
#include <vector>

#include "lmpc/controller.hpp"
#include "lmpc/memory.hpp"
#include "lmpc/model.hpp"
#include "lmpc/nlp.hpp"

namespace lmpc::robust {

// Disturbance tube around the nominal trajectory. The error set E is the
// zonotope {sum_g G_g w_g : w_g in W}; membership enters the step program
// through the generator weights, because the box hull of E is not invariant
// under the error recursion once the linking input is re-decided each step.
// The box hull is kept for reporting and audits (it contains E).
struct TubeSpec {
  Mat K;                        // error feedback u = u_bar + K (x - x_bar)
  std::vector<Mat> generators;  // E = sum of G_g * W
  Vec disturbance_lower, disturbance_upper;  // W, also the generator weight box
  Vec error_lower, error_upper;              // box hull of E
  Vec feedback_lower, feedback_upper;        // V: range of K e over E

  InputVec error_feedback(const StateVec& x, const StateVec& xbar) const {
    return K * (x - xbar);
  }
};

struct RobustInstance {
  BenchmarkInstance base;        // original model, constraints, goal
  Vec state_lower, state_upper;  // original state box X
  TubeSpec tube;
  BenchmarkInstance tightened;  // nominal system: state box X (-) E, inputs U (-) V
};

// Exact Pontryagin difference of boxes: [a,b] (-) [c,d] = [a-c, b-d].
inline void box_pontryagin(const Vec& lower, const Vec& upper, const Vec& sub_lower,
                           const Vec& sub_upper, Vec& out_lower, Vec& out_upper) {
  out_lower = lower - sub_lower;
  out_upper = upper - sub_upper;
  for (int i = 0; i < out_lower.size(); ++i)
    if (out_lower[i] > out_upper[i] + 1e-15)
      throw ConfigError("empty Pontryagin difference in dimension " + std::to_string(i));
}

namespace detail {

inline SystemModel box_state_model(SystemModel m, const Vec& lower, const Vec& upper) {
  const int n = m.n;
  m.num_state_ineq = 2 * n;
  m.state_ineq = [lower, upper, n](const StateVec& x) {
    Vec h(2 * n);
    h.head(n) = x - upper;
    h.tail(n) = lower - x;
    return h;
  };
  m.state_ineq_jacobian = [n](const StateVec&) {
    Mat J(2 * n, n);
    J.topRows(n) = Mat::Identity(n, n);
    J.bottomRows(n) = -Mat::Identity(n, n);
    return J;
  };
  return m;
}

}  // namespace detail

// Demo plant: discrete double integrator x+ = [x + dt v, v + dt u] with an
// additive box disturbance, deadbeat error feedback K = [-4, -4] (A + BK is
// nilpotent of order two, so E = W + (A+BK) W is reached after two steps and
// invariant from then on).
inline RobustInstance make_robust_double_integrator(double dt = 0.5, double w_abs = 0.01) {
  const int n = 2, d = 1;
  SystemModel m;
  m.name = "lin-double-integrator";
  m.n = n;
  m.d = d;
  m.step = [dt](const StateVec& x, const InputVec& u) {
    StateVec next(2);
    next[0] = x[0] + dt * x[1];
    next[1] = x[1] + dt * u[0];
    return next;
  };
  m.step_jacobian = [dt](const StateVec&, const InputVec&, Mat& A, Mat& B) {
    A = Mat::Identity(2, 2);
    A(0, 1) = dt;
    B = Mat::Zero(2, 1);
    B(1, 0) = dt;
  };
  m.input_lower = Vec::Constant(1, -1.0);
  m.input_upper = Vec::Constant(1, 1.0);

  RobustInstance rob;
  rob.state_lower = (Vec(2) << -12.0, -0.5).finished();
  rob.state_upper = (Vec(2) << 1.0, 3.5).finished();

  TubeSpec& tube = rob.tube;
  tube.K = (Mat(1, 2) << -4.0, -4.0).finished();
  Mat A(2, 2), B(2, 1);
  m.step_jacobian(Vec::Zero(2), Vec::Zero(1), A, B);
  const Mat M = A + B * tube.K;
  tube.generators = {Mat::Identity(2, 2), M};
  tube.disturbance_lower = Vec::Constant(2, -w_abs);
  tube.disturbance_upper = Vec::Constant(2, w_abs);
  tube.error_upper = Vec::Zero(2);
  for (const Mat& G : tube.generators)
    tube.error_upper += G.cwiseAbs() * tube.disturbance_upper;
  tube.error_lower = -tube.error_upper;
  tube.feedback_upper = Vec::Zero(1);
  for (const Mat& G : tube.generators)
    tube.feedback_upper += (tube.K * G).cwiseAbs() * tube.disturbance_upper;
  tube.feedback_lower = -tube.feedback_upper;

  rob.base.model = detail::box_state_model(m, rob.state_lower, rob.state_upper);
  rob.base.x_start = (Vec(2) << -10.0, 0.0).finished();
  rob.base.goal = GoalSpec::make_point(Vec::Zero(2));
  rob.base.horizon = 4;
  rob.base.params["dt"] = dt;
  rob.base.params["w_abs"] = w_abs;

  Vec tight_xl, tight_xu, tight_ul, tight_uu;
  box_pontryagin(rob.state_lower, rob.state_upper, tube.error_lower, tube.error_upper, tight_xl,
                 tight_xu);
  box_pontryagin(m.input_lower, m.input_upper, tube.feedback_lower, tube.feedback_upper, tight_ul,
                 tight_uu);
  rob.tightened = rob.base;
  rob.tightened.model = detail::box_state_model(m, tight_xl, tight_xu);
  rob.tightened.model.input_lower = tight_ul;
  rob.tightened.model.input_upper = tight_uu;
  return rob;
}

// First feasible nominal trajectory for the demo: a symmetric triangular
// velocity profile sized to half the tightened input bound. The headroom
// keeps the seed deliberately slow so the learning loop has room to improve.
inline memory::Trajectory robust_demo_initial_trajectory(const RobustInstance& rob) {
  const double dt = rob.base.params.at("dt");
  const double dist = (rob.base.goal.point - rob.base.x_start)[0];
  const double u_max = 0.5 * rob.tightened.model.input_upper[0];
  int half = 1;
  while (dist / (dt * dt * half * half) > u_max) ++half;
  const double accel = dist / (dt * dt * half * half);

  memory::Trajectory traj;
  traj.states.push_back(rob.base.x_start);
  for (int k = 0; k < 2 * half; ++k) {
    const InputVec u = Vec::Constant(1, k < half ? accel : -accel);
    traj.inputs.push_back(u);
    traj.states.push_back(rob.tightened.model.step(traj.states.back(), u));
  }
  traj.inputs.push_back(InputVec::Zero(1));
  if (!goal_reached(traj.states.back(), rob.base.goal, rob.base.goal_tol))
    throw InitializationFailed("robust demo triangle profile missed the goal");
  return traj;
}

struct RobustStepResult {
  StateVec xbar;                      // committed nominal state at time t
  InputVec link_input;                // connects the previous nominal state (empty at t=0)
  bool arrived = false;               // nominal state placed on the goal, iteration over
  InputVec nominal_input;             // first planned nominal input (empty when arrived)
  InputVec applied_input;             // nominal_input + K (x - xbar)
  controller::StepResult plan;        // cost, candidates, predicted nominal plan
};

namespace detail {

using controller::WarmStart;

struct Layout {
  int n = 0, d = 0, H = 0, G = 0, K = 0;
  bool link = false;
  int xbar_at = 0, gen_at = 0, link_at = 0, plan_at = 0, lambda_at = 0, dim = 0;
};

inline Layout make_layout(const RobustInstance& rob, int H, int K, bool link) {
  Layout L;
  L.n = rob.base.model.n;
  L.d = rob.base.model.d;
  L.H = H;
  L.G = static_cast<int>(rob.tube.generators.size());
  L.K = K;
  L.link = link;
  L.xbar_at = 0;
  L.gen_at = L.n;
  L.link_at = L.gen_at + L.G * L.n;
  L.plan_at = L.link_at + (link ? L.d : 0);
  L.lambda_at = L.plan_at + H * L.d;
  L.dim = L.lambda_at + K;
  return L;
}

// Rollout of the nominal plan with sensitivities against [xbar | plan inputs].
struct RobustRollout {
  SystemModel model;
  Layout L;

  mutable Vec cached_z;
  mutable std::vector<StateVec> states;
  mutable std::vector<Mat> sens_x0;    // d x_k / d xbar (n x n)
  mutable std::vector<Mat> sens_plan;  // d x_k / d plan (n x H*d)
  mutable bool have_sens = false;

  void ensure(const Vec& z, bool want_sens) const {
    if (cached_z.size() == z.size() && cached_z == z && (!want_sens || have_sens)) return;
    const int n = L.n, d = L.d;
    states.assign(1, StateVec(z.segment(L.xbar_at, n)));
    if (want_sens) {
      sens_x0.assign(1, Mat::Identity(n, n));
      sens_plan.assign(1, Mat::Zero(n, L.H * d));
      have_sens = true;
    } else {
      sens_x0.clear();
      sens_plan.clear();
      have_sens = false;
    }
    Mat A(n, n), B(n, d);
    for (int k = 0; k < L.H; ++k) {
      const InputVec uk = z.segment(L.plan_at + k * d, d);
      StateVec next = model.step(states.back(), uk);
      if (!next.allFinite()) throw CallbackFailure("non-finite nominal rollout");
      if (want_sens) {
        model.step_jacobian(states.back(), uk, A, B);
        sens_x0.push_back(A * sens_x0.back());
        Mat Sp = A * sens_plan.back();
        Sp.middleCols(k * d, d) += B;
        sens_plan.push_back(std::move(Sp));
      }
      states.push_back(std::move(next));
    }
    cached_z = z;
  }
};

// Assembles the step program. Equalities: tube membership
// xbar + sum_g G_g w_g = x_t, the linking dynamics for t >= 1, and the
// terminal condition (fixed target, or the weighted candidate combination).
// Inequalities: tightened state box on the interior rollout states.
struct RobustProgram {
  Layout L;
  nlp::NlpProblem problem;
  std::shared_ptr<RobustRollout> ro;
};

inline RobustProgram build_program(const RobustInstance& rob, const StateVec& x_t,
                                   const StateVec* xbar_prev, int H,
                                   const std::optional<StateVec>& target,
                                   const std::vector<memory::CandidatePoint>& cands) {
  const int K = target ? 0 : static_cast<int>(cands.size());
  RobustProgram prog;
  prog.L = make_layout(rob, H, K, xbar_prev != nullptr);
  const Layout L = prog.L;
  const SystemModel& nm = rob.tightened.model;
  const int n = L.n, d = L.d, ns = nm.num_state_ineq;

  prog.ro = std::make_shared<RobustRollout>();
  prog.ro->model = nm;
  prog.ro->L = L;
  auto ro = prog.ro;

  Mat Z(n, std::max(1, K));
  Vec costs(std::max(1, K));
  for (int j = 0; j < K; ++j) {
    Z.col(j) = cands[j].state;
    costs[j] = cands[j].cost_to_go;
  }

  nlp::NlpProblem& p = prog.problem;
  p.dim = L.dim;
  if (K) {
    p.objective = [costs, L](const Vec& z) {
      return costs.head(L.K).dot(z.segment(L.lambda_at, L.K));
    };
    p.gradient = [costs, L](const Vec& z) {
      Vec g = Vec::Zero(z.size());
      g.segment(L.lambda_at, L.K) = costs.head(L.K);
      return g;
    };
  } else {
    p.objective = [](const Vec&) { return 0.0; };
    p.gradient = [dim = L.dim](const Vec&) { return Vec::Zero(dim); };
  }

  const StateVec xprev = xbar_prev ? *xbar_prev : StateVec();
  const auto gens = rob.tube.generators;
  const int m_membership = n;
  const int m_link = L.link ? n : 0;
  const int m_terminal = n + (K ? 1 : 0);
  p.m_eq = m_membership + m_link + m_terminal;
  p.eq = [ro, gens, x_t, xprev, Z, target, L, n](const Vec& z) {
    ro->ensure(z, false);
    Vec c(L.n + (L.link ? L.n : 0) + L.n + (L.K ? 1 : 0));
    StateVec mem = StateVec(z.segment(L.xbar_at, n)) - x_t;
    for (int g = 0; g < L.G; ++g) mem += gens[g] * z.segment(L.gen_at + g * n, n);
    c.head(n) = mem;
    int at = n;
    if (L.link) {
      c.segment(at, n) =
          StateVec(z.segment(L.xbar_at, n)) - ro->model.step(xprev, z.segment(L.link_at, L.d));
      at += n;
    }
    if (target) {
      c.segment(at, n) = ro->states.back() - *target;
    } else {
      const Vec lam = z.segment(L.lambda_at, L.K);
      c.segment(at, n) = ro->states.back() - Z * lam;
      c[at + n] = lam.sum() - 1.0;
    }
    return c;
  };
  p.eq_jac = [ro, gens, xprev, Z, target, L, n, d](const Vec& z) {
    ro->ensure(z, true);
    Mat J = Mat::Zero(L.n + (L.link ? L.n : 0) + L.n + (L.K ? 1 : 0), L.dim);
    J.block(0, L.xbar_at, n, n).setIdentity();
    for (int g = 0; g < L.G; ++g) J.block(0, L.gen_at + g * n, n, n) = gens[g];
    int at = n;
    if (L.link) {
      J.block(at, L.xbar_at, n, n).setIdentity();
      Mat A(n, n), B(n, d);
      ro->model.step_jacobian(xprev, z.segment(L.link_at, d), A, B);
      J.block(at, L.link_at, n, d) = -B;
      at += n;
    }
    J.block(at, L.xbar_at, n, n) = ro->sens_x0.back();
    J.block(at, L.plan_at, n, L.H * d) = ro->sens_plan.back();
    if (!target) {
      J.block(at, L.lambda_at, n, L.K) = -Z;
      J.row(at + n).segment(L.lambda_at, L.K).setOnes();
    }
    return J;
  };

  p.m_ineq = ns * std::max(0, H - 1);
  if (p.m_ineq) {
    p.ineq = [ro, ns, H](const Vec& z) {
      ro->ensure(z, false);
      Vec h(ns * (H - 1));
      for (int k = 1; k < H; ++k) h.segment((k - 1) * ns, ns) = ro->model.state_ineq(ro->states[k]);
      return h;
    };
    p.ineq_jac = [ro, ns, H, L, d](const Vec& z) {
      ro->ensure(z, true);
      Mat J = Mat::Zero(ns * (H - 1), L.dim);
      for (int k = 1; k < H; ++k) {
        const Mat Hx = ro->model.state_ineq_jacobian(ro->states[k]);
        J.middleRows((k - 1) * ns, ns).middleCols(L.xbar_at, L.n) = Hx * ro->sens_x0[k];
        J.middleRows((k - 1) * ns, ns).middleCols(L.plan_at, L.H * d) = Hx * ro->sens_plan[k];
      }
      return J;
    };
  }

  // Bounds: nominal state in the tightened box, generator weights in W,
  // inputs in the tightened input box, weights in the simplex box.
  p.lower = Vec::Constant(L.dim, -1e19);
  p.upper = Vec::Constant(L.dim, 1e19);
  const Vec h_up = nm.state_ineq(Vec::Zero(n));  // [-(upper); lower] offsets
  for (int i = 0; i < n; ++i) {
    p.upper[L.xbar_at + i] = -h_up[i];
    p.lower[L.xbar_at + i] = h_up[n + i];
  }
  for (int g = 0; g < L.G; ++g) {
    p.lower.segment(L.gen_at + g * n, n) = rob.tube.disturbance_lower;
    p.upper.segment(L.gen_at + g * n, n) = rob.tube.disturbance_upper;
  }
  if (L.link) {
    p.lower.segment(L.link_at, d) = nm.input_lower;
    p.upper.segment(L.link_at, d) = nm.input_upper;
  }
  for (int k = 0; k < H; ++k) {
    p.lower.segment(L.plan_at + k * d, d) = nm.input_lower;
    p.upper.segment(L.plan_at + k * d, d) = nm.input_upper;
  }
  if (K) {
    p.lower.segment(L.lambda_at, K).setZero();
    p.upper.segment(L.lambda_at, K).setOnes();
  }
  return prog;
}

inline Vec warm_point(const RobustProgram& prog, const RobustInstance& rob, const StateVec& x_t,
                      const StateVec* xbar_prev, const WarmStart* warm, const Vec* lam0) {
  const Layout& L = prog.L;
  Vec z = Vec::Zero(L.dim);
  const int n = L.n, d = L.d;
  InputVec link = InputVec::Zero(d);
  if (L.link && warm && !warm->inputs.empty()) link = warm->inputs[0];
  StateVec xbar = L.link ? rob.tightened.model.step(*xbar_prev, link) : x_t;
  z.segment(L.xbar_at, n) = xbar;
  if (L.G) z.segment(L.gen_at, n) = (x_t - xbar)
                                        .cwiseMax(rob.tube.disturbance_lower)
                                        .cwiseMin(rob.tube.disturbance_upper);
  if (L.link) z.segment(L.link_at, d) = link;
  for (int k = 0; k < L.H; ++k) {
    // The warm plan is shifted by one: entry k+1 of the previous plan.
    InputVec uk = InputVec::Zero(d);
    if (warm) {
      const size_t idx = L.link ? k + 1 : k;
      if (idx < warm->inputs.size()) uk = warm->inputs[idx];
    }
    z.segment(L.plan_at + k * d, d) =
        uk.cwiseMax(rob.tightened.model.input_lower).cwiseMin(rob.tightened.model.input_upper);
  }
  if (L.K && lam0) z.segment(L.lambda_at, L.K) = *lam0;
  // Project the bound box once so the solver starts strictly inside.
  return z.cwiseMax(prog.problem.lower).cwiseMin(prog.problem.upper);
}

}  // namespace detail

// One robust step: place the nominal state inside the tube around the
// measured state, link it to the previous nominal state, and plan to the
// stored nominal safe set. Probes of length m = 0..N-1 implement early goal
// arrival; m = 0 detects that the nominal state itself can sit on the goal.
inline RobustStepResult robust_step(const RobustInstance& rob, const memory::SafeSetStore& store,
                                    const controller::LmpcConfig& cfg, const StateVec& x_t,
                                    const StateVec* xbar_prev, int t,
                                    const controller::WarmStart* warm = nullptr) {
  const auto t_begin = std::chrono::steady_clock::now();
  const int N = controller::detail::effective_horizon(rob.tightened, cfg);
  const auto spec = controller::detail::subset_for(store, cfg);
  const auto cands = store.safe_set(t + N, spec);
  const int evaluated = controller::detail::window_slots(store, t + N, spec) + N;  // probes 0..N-1
  int solves = 0;

  auto finalize = [&](RobustStepResult r) {
    r.plan.candidates_evaluated = evaluated;
    r.plan.nlp_solves = solves;
    r.plan.solve_time =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_begin).count();
    return r;
  };

  auto extract = [&](const detail::RobustProgram& prog, const nlp::NlpSolution& sol,
                     RobustStepResult& r) {
    const detail::Layout& L = prog.L;
    r.xbar = sol.z.segment(L.xbar_at, L.n);
    if (L.link) r.link_input = sol.z.segment(L.link_at, L.d);
    if (L.H > 0) {
      r.plan.predicted_inputs = controller::detail::unstack_inputs(
          sol.z.segment(L.plan_at, L.H * L.d), L.H, L.d);
      r.plan.predicted_states =
          controller::detail::rollout(rob.tightened.model, r.xbar, r.plan.predicted_inputs);
      r.nominal_input = r.plan.predicted_inputs[0];
      r.applied_input = r.nominal_input + rob.tube.error_feedback(x_t, r.xbar);
      r.plan.input = r.applied_input;
    }
    if (L.K) r.plan.lambda = sol.z.segment(L.lambda_at, L.K);
  };

  // Goal probes, shortest first; m = 0 ends the iteration.
  for (int m = 0; m < N; ++m) {
    auto prog = detail::build_program(rob, x_t, xbar_prev, m, rob.base.goal.point, {});
    const Vec z0 = detail::warm_point(prog, rob, x_t, xbar_prev, warm, nullptr);
    nlp::NlpSolution sol = nlp::solve(prog.problem, z0, cfg.solver);
    ++solves;
    if (!controller::detail::accept(sol, cfg.solver)) continue;
    RobustStepResult r;
    extract(prog, sol, r);
    r.arrived = (m == 0);
    r.plan.probe = true;
    r.plan.probe_steps = m;
    r.plan.cost = m;
    r.plan.goal_weight = 1.0;
    r.plan.warm_residual = 0.0;  // a verified reach plan: the decrease bound applies
    return finalize(std::move(r));
  }

  const bool relaxed = cfg.robust_terminal == controller::Mode::Relaxed;
  if (!relaxed) {
    const auto order = controller::detail::sorted_candidates(cands, N);
    for (const auto& o : order) {
      const auto& c = cands[o.index];
      auto prog = detail::build_program(rob, x_t, xbar_prev, N, c.state, {});
      const Vec z0 = detail::warm_point(prog, rob, x_t, xbar_prev, warm, nullptr);
      nlp::NlpSolution sol = nlp::solve(prog.problem, z0, cfg.solver);
      ++solves;
      if (!controller::detail::accept(sol, cfg.solver)) continue;
      RobustStepResult r;
      extract(prog, sol, r);
      r.plan.cost = o.total_cost;
      r.plan.terminal_iteration = c.iteration;
      r.plan.terminal_time_index = c.time_index;
      r.plan.terminal_padded = c.padded;
      r.plan.goal_weight = c.cost_to_go == 0.0 ? 1.0 : 0.0;
      return finalize(std::move(r));
    }
  } else {
    auto prog = detail::build_program(rob, x_t, xbar_prev, N, std::nullopt, cands);
    Vec lam0 = Vec::Zero(cands.size());
    if (warm && !warm->lambda_support.empty()) {
      for (const auto& s : warm->lambda_support) {
        int hit = -1;
        for (size_t j = 0; j < cands.size() && hit < 0; ++j)
          if (s.state.size() && inf_norm(cands[j].state - s.state) <= 1e-12)
            hit = static_cast<int>(j);
        for (size_t j = 0; j < cands.size() && hit < 0; ++j)
          if (cands[j].iteration == s.iteration && cands[j].time_index == s.time_index)
            hit = static_cast<int>(j);
        if (hit >= 0) lam0[hit] += s.weight;
      }
    }
    const bool shifted_start = lam0.sum() > 0.5;
    if (!shifted_start) {
      lam0.setZero();
      lam0[0] = 1.0;
    } else {
      lam0 /= lam0.sum();
    }
    const Vec z0 = detail::warm_point(prog, rob, x_t, xbar_prev, warm, &lam0);
    double warm_viol = -1.0;
    if (shifted_start) {
      warm_viol = prog.problem.m_eq ? inf_norm(prog.problem.eq(z0)) : 0.0;
      if (prog.problem.m_ineq)
        warm_viol = std::max(warm_viol, std::max(0.0, prog.problem.ineq(z0).maxCoeff()));
    }
    nlp::NlpSolution sol = nlp::solve(prog.problem, z0, cfg.solver);
    ++solves;
    if (controller::detail::accept(sol, cfg.solver)) {
      RobustStepResult r;
      extract(prog, sol, r);
      r.plan.cost = N + sol.objective;
      r.plan.warm_residual = warm_viol;
      r.plan.candidates = cands;
      for (size_t j = 0; j < cands.size(); ++j)
        if (cands[j].cost_to_go == 0.0) r.plan.goal_weight += std::max(0.0, r.plan.lambda[j]);
      return finalize(std::move(r));
    }
  }
  throw NoFeasibleCandidate("robust step at t=" + std::to_string(t));
}

struct RobustRunRecord {
  controller::IterationRecord nominal;
  std::vector<StateVec> true_states;
  std::vector<InputVec> true_inputs;
  std::vector<Vec> disturbances;
};

inline std::vector<Vec> sample_disturbances(const TubeSpec& tube, int count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Vec> out;
  out.reserve(count);
  const int n = static_cast<int>(tube.disturbance_lower.size());
  for (int k = 0; k < count; ++k) {
    Vec w(n);
    for (int i = 0; i < n; ++i) {
      const double u01 = static_cast<double>(rng() >> 11) * 0x1.0p-53;
      w[i] = tube.disturbance_lower[i] +
             u01 * (tube.disturbance_upper[i] - tube.disturbance_lower[i]);
    }
    out.push_back(std::move(w));
  }
  return out;
}

// One closed-loop robust iteration under a fixed disturbance sequence. The
// recorded trajectory is the nominal one; its inputs are the linking inputs,
// with the committed states snapped onto the exact nominal dynamics so the
// replay audit sees machine-precision consistency.
inline RobustRunRecord run_robust_iteration(const RobustInstance& rob,
                                            memory::SafeSetStore& store,
                                            const controller::LmpcConfig& cfg,
                                            const StateVec& x_0,
                                            const std::vector<Vec>& disturbances) {
  if (store.empty()) throw EmptyStore("run_robust_iteration");
  const int cap = cfg.step_cap > 0 ? cfg.step_cap : 4 * store.trajectory(0).duration();

  RobustRunRecord rec;
  rec.true_states.push_back(x_0);
  controller::WarmStart warm =
      controller::detail::initial_warm(store, controller::detail::effective_horizon(rob.tightened,
                                                                                    cfg));
  StateVec x = x_0;
  std::optional<StateVec> xbar_prev;

  for (int t = 0; t <= cap; ++t) {
    if (t == cap) throw StepCapExceeded("robust nominal no arrival in " + std::to_string(cap));
    RobustStepResult step =
        robust_step(rob, store, cfg, x, xbar_prev ? &*xbar_prev : nullptr, t, &warm);

    StateVec xbar = step.xbar;
    if (xbar_prev) {
      // Snap onto the exact dynamics; the solve leaves only polish-level slack.
      xbar = rob.tightened.model.step(*xbar_prev, step.link_input);
      rec.nominal.trajectory.inputs.push_back(step.link_input);
    }
    rec.nominal.trajectory.states.push_back(xbar);

    if (!rec.nominal.steps.empty() && !step.arrived) {
      const auto& prev = rec.nominal.steps.back();
      const double floor_decrease =
          (prev.probe || cfg.robust_terminal != controller::Mode::Relaxed) ? 1.0 : (1.0 - prev.goal_weight);
      // As in the nominal loop: a relaxed weight mix shifts exactly only under
      // linear dynamics, so enforce the bound only when the shifted start was
      // verified feasible for this step's program.
      const bool bound_applies =
          cfg.robust_terminal != controller::Mode::Relaxed ||
          (step.plan.warm_residual >= 0.0 && step.plan.warm_residual <= cfg.solver.tol_feas);
      if (bound_applies && step.plan.cost > prev.cost - floor_decrease + cfg.cost_slack)
        throw CostDecreaseViolation("robust cost " + std::to_string(prev.cost) + " -> " +
                                    std::to_string(step.plan.cost));
    }

    if (step.arrived) break;

    rec.nominal.steps.push_back(step.plan);
    const Vec w = t < static_cast<int>(disturbances.size()) ? disturbances[t]
                                                            : Vec::Zero(rob.base.model.n);
    x = rob.base.model.step(x, step.applied_input) + w;
    rec.true_inputs.push_back(step.applied_input);
    rec.true_states.push_back(x);
    rec.disturbances.push_back(w);
    warm = controller::detail::shift_warm(rob.tightened, store, step.plan);
    // robust_step consumes warm.inputs[0] as the linking input.
    warm.inputs.insert(warm.inputs.begin(), step.nominal_input);
    xbar_prev = xbar;
  }

  rec.nominal.T_j = rec.nominal.trajectory.duration();
  rec.nominal.trajectory.inputs.push_back(InputVec::Zero(rob.base.model.d));
  return rec;
}

// Learning campaign on the robust demo: the nominal store grows by one
// trajectory per iteration, each run under a fresh disturbance sequence.
inline std::vector<RobustRunRecord> run_robust_task(const RobustInstance& rob,
                                                    const controller::LmpcConfig& cfg,
                                                    int num_iterations, std::uint64_t seed,
                                                    memory::SafeSetStore* store_out = nullptr) {
  memory::SafeSetStore local(rob.tightened);
  memory::SafeSetStore& store = store_out ? *store_out : local;
  std::vector<RobustRunRecord> records;

  if (store.empty()) {
    RobustRunRecord rec;
    rec.nominal.trajectory = robust_demo_initial_trajectory(rob);
    rec.nominal.T_j = rec.nominal.trajectory.duration();
    store.add_trajectory(rec.nominal.trajectory);
    records.push_back(std::move(rec));
  }

  const int cap = cfg.step_cap > 0 ? cfg.step_cap : 4 * store.trajectory(0).duration();
  for (int j = 1; j <= num_iterations; ++j) {
    const auto w = sample_disturbances(rob.tube, cap, seed + 7919 * j);
    RobustRunRecord rec = run_robust_iteration(rob, store, cfg, rob.base.x_start, w);
    rec.nominal.iteration = store.num_iterations();
    store.add_trajectory(rec.nominal.trajectory);
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace lmpc::robust
