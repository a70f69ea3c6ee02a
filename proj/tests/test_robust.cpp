#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include <lmpc/robust.hpp>

using namespace lmpc;
using Catch::Approx;

namespace {

controller::LmpcConfig robust_config(controller::Mode terminal) {
  controller::LmpcConfig cfg;
  cfg.mode = controller::Mode::Robust;
  cfg.horizon = 4;
  cfg.robust_terminal = terminal;
  return cfg;
}

// Worst-case |e| per dimension over a run, e_t = true state minus committed
// nominal state.
Vec worst_error(const robust::RobustRunRecord& rec) {
  Vec worst = Vec::Zero(rec.true_states.front().size());
  REQUIRE(rec.true_states.size() == rec.nominal.trajectory.states.size());
  for (size_t t = 0; t < rec.true_states.size(); ++t) {
    const Vec e = (rec.true_states[t] - rec.nominal.trajectory.states[t]).cwiseAbs();
    worst = worst.cwiseMax(e);
  }
  return worst;
}

}  // namespace

TEST_CASE("tube arithmetic for the linear demo instance") {
  const auto rob = robust::make_robust_double_integrator();

  SECTION("generators are identity and the closed-loop map, which is nilpotent") {
    REQUIRE(rob.tube.generators.size() == 2);
    REQUIRE(rob.tube.generators[0].isApprox(Mat::Identity(2, 2)));
    const Mat& M = rob.tube.generators[1];
    Mat expected(2, 2);
    expected << 1.0, 0.5, -2.0, -1.0;  // A + B K with K = [-4, -4], dt = 1/2
    REQUIRE(M.isApprox(expected));
    REQUIRE((M * M).norm() == Approx(0.0).margin(1e-15));
  }

  SECTION("error box hull matches |I| w + |A+BK| w") {
    REQUIRE(rob.tube.error_upper[0] == Approx(0.025).margin(1e-15));
    REQUIRE(rob.tube.error_upper[1] == Approx(0.04).margin(1e-15));
    REQUIRE(rob.tube.error_lower == -rob.tube.error_upper);
  }

  SECTION("feedback usage bound |K| w + |K (A+BK)| w") {
    REQUIRE(rob.tube.feedback_upper[0] == Approx(0.14).margin(1e-15));
    REQUIRE(rob.tube.feedback_lower[0] == Approx(-0.14).margin(1e-15));
  }

  SECTION("tightened boxes are the exact Pontryagin differences") {
    REQUIRE(rob.tightened.model.input_lower[0] == Approx(-0.86).margin(1e-15));
    REQUIRE(rob.tightened.model.input_upper[0] == Approx(0.86).margin(1e-15));
    // state box [-12, 1] x [-0.5, 3.5] shrunk by (0.025, 0.04)
    const Vec h = rob.tightened.model.state_ineq(Vec::Zero(2));
    REQUIRE(h.size() == 4);
    REQUIRE(h[0] == Approx(-0.975).margin(1e-12));   // x - 0.975
    REQUIRE(h[1] == Approx(-3.46).margin(1e-12));    // v - 3.46
    REQUIRE(h[2] == Approx(-11.975).margin(1e-12));  // -11.975 - x
    REQUIRE(h[3] == Approx(-0.46).margin(1e-12));    // -0.46 - v
  }

  SECTION("disturbance scale propagates linearly") {
    const auto wide = robust::make_robust_double_integrator(0.5, 0.02);
    REQUIRE(wide.tube.error_upper.isApprox(2.0 * rob.tube.error_upper));
    REQUIRE(wide.tube.feedback_upper.isApprox(2.0 * rob.tube.feedback_upper));
    REQUIRE(wide.tightened.model.input_upper[0] == Approx(0.72).margin(1e-15));
  }

  SECTION("error feedback is K (x - xbar)") {
    Vec x(2), xbar(2);
    x << 0.1, 0.2;
    xbar << 0.05, 0.15;
    REQUIRE(rob.tube.error_feedback(x, xbar)[0] == Approx(-4 * 0.05 - 4 * 0.05).margin(1e-15));
  }
}

TEST_CASE("box Pontryagin difference") {
  Vec lo(2), hi(2), slo(2), shi(2), out_lo(2), out_hi(2);
  lo << -1.0, -2.0;
  hi << 1.0, 2.0;
  slo << -0.25, 0.0;
  shi << 0.25, 0.5;
  robust::box_pontryagin(lo, hi, slo, shi, out_lo, out_hi);
  REQUIRE(out_lo[0] == Approx(-0.75).margin(1e-15));
  REQUIRE(out_hi[0] == Approx(0.75).margin(1e-15));
  REQUIRE(out_lo[1] == Approx(-2.0).margin(1e-15));
  REQUIRE(out_hi[1] == Approx(1.5).margin(1e-15));

  SECTION("empty difference is rejected") {
    Vec big_lo(2), big_hi(2);
    big_lo << -2.0, -0.1;
    big_hi << 2.0, 0.1;
    REQUIRE_THROWS_AS(robust::box_pontryagin(lo, hi, big_lo, big_hi, out_lo, out_hi), ConfigError);
  }
}

TEST_CASE("demo seed trajectory is a slow exact triangle") {
  const auto rob = robust::make_robust_double_integrator();
  const auto traj = robust::robust_demo_initial_trajectory(rob);

  // Smallest half-length whose required acceleration fits under half the
  // tightened input bound, recomputed here from the instance data.
  const double dt = rob.base.params.at("dt");
  const double dist = (rob.base.goal.point - rob.base.x_start)[0];
  int half = 1;
  while (dist / (dt * dt * half * half) > 0.5 * rob.tightened.model.input_upper[0]) ++half;
  REQUIRE(half == 10);

  REQUIRE(traj.duration() == 2 * half);
  REQUIRE(traj.inputs.size() == traj.states.size());  // zero input padded at the goal
  REQUIRE(traj.states.front().isApprox(rob.base.x_start));
  REQUIRE((traj.states.back() - rob.base.goal.point).norm() < 1e-9);
  REQUIRE(traj.inputs.back().norm() == 0.0);

  const double accel = dist / (dt * dt * half * half);
  REQUIRE(accel == Approx(0.4).margin(1e-15));
  for (int k = 0; k < traj.duration(); ++k)
    REQUIRE(std::abs(traj.inputs[k][0]) == Approx(accel).margin(1e-15));

  // Strict store admission audits replay, goal arrival and tightened bounds.
  memory::SafeSetStore store(rob.tightened);
  REQUIRE_NOTHROW(store.add_trajectory(traj));
  REQUIRE(store.cost_to_go(0, 0) == 2 * half);
}

TEST_CASE("disturbance sampling is seeded and box-bounded") {
  const auto rob = robust::make_robust_double_integrator();
  const auto w = robust::sample_disturbances(rob.tube, 200, 42);
  REQUIRE(w.size() == 200);
  double largest = 0.0;
  for (const auto& wi : w) {
    REQUIRE(wi.size() == 2);
    REQUIRE((wi.array() >= rob.tube.disturbance_lower.array()).all());
    REQUIRE((wi.array() <= rob.tube.disturbance_upper.array()).all());
    largest = std::max(largest, wi.cwiseAbs().maxCoeff());
  }
  REQUIRE(largest > 1e-3);  // not degenerate

  const auto w2 = robust::sample_disturbances(rob.tube, 200, 42);
  for (size_t k = 0; k < w.size(); ++k) REQUIRE(w[k] == w2[k]);
  const auto w3 = robust::sample_disturbances(rob.tube, 200, 43);
  REQUIRE(w[0] != w3[0]);
}

TEST_CASE("degenerate tube reduces the first robust step to the nominal step") {
  const auto rob = robust::make_robust_double_integrator(0.5, 0.0);
  REQUIRE(rob.tube.error_upper.norm() == 0.0);
  REQUIRE(rob.tightened.model.input_upper[0] == Approx(1.0).margin(1e-15));

  memory::SafeSetStore store(rob.tightened);
  store.add_trajectory(robust::robust_demo_initial_trajectory(rob));
  const auto cfg = robust_config(controller::Mode::Enumeration);

  const auto step = robust::robust_step(rob, store, cfg, rob.base.x_start, nullptr, 0, nullptr);
  REQUIRE((step.xbar - rob.base.x_start).norm() < 1e-9);
  REQUIRE_FALSE(step.arrived);
  REQUIRE(step.applied_input.isApprox(step.nominal_input, 1e-9));

  controller::LmpcConfig plain = cfg;
  plain.mode = controller::Mode::Enumeration;
  const auto nominal = controller::enumeration_step(rob.tightened, store, plain,
                                                    rob.base.x_start, 0, nullptr);
  // The objective is flat over the optimal set, so only the cost and the
  // deterministic terminal pick are comparable, not the input itself.
  REQUIRE(step.plan.cost == Approx(nominal.cost).margin(1e-6));
  REQUIRE(step.plan.terminal_iteration == nominal.terminal_iteration);
  REQUIRE(step.plan.terminal_time_index == nominal.terminal_time_index);
}

TEST_CASE("robust learning keeps the truth in the tube and shortens the nominal run") {
  const auto rob = robust::make_robust_double_integrator();
  const auto mode = GENERATE(controller::Mode::Enumeration, controller::Mode::Relaxed);
  INFO("terminal mode: " << controller::to_string(mode));
  const auto cfg = robust_config(mode);

  memory::SafeSetStore store(rob.tightened);
  const auto records = robust::run_robust_task(rob, cfg, 3, 12345, &store);
  REQUIRE(records.size() == 4);
  REQUIRE(records[0].nominal.T_j == 20);  // seed triangle
  REQUIRE(store.num_iterations() == 4);

  for (size_t j = 1; j < records.size(); ++j) {
    const auto& rec = records[j];
    INFO("iteration " << j << " with T_j " << rec.nominal.T_j);

    // Nominal completion time never regresses, and learning actually helps.
    REQUIRE(rec.nominal.T_j <= records[j - 1].nominal.T_j);

    const int T = rec.nominal.T_j;
    REQUIRE(static_cast<int>(rec.nominal.steps.size()) == T);
    REQUIRE(static_cast<int>(rec.true_states.size()) == T + 1);
    REQUIRE(static_cast<int>(rec.true_inputs.size()) == T);
    REQUIRE(static_cast<int>(rec.disturbances.size()) == T);

    // (a) tube membership of the realized error at every step
    const Vec worst = worst_error(rec);
    REQUIRE((worst.array() <= rob.tube.error_upper.array() + 1e-7).all());

    // (b) the true trajectory satisfies the original, untightened constraints
    for (const auto& x : rec.true_states)
      REQUIRE(rob.base.model.state_ineq(x).maxCoeff() < 1e-7);
    for (const auto& u : rec.true_inputs) {
      REQUIRE(u[0] <= rob.base.model.input_upper[0] + 1e-7);
      REQUIRE(u[0] >= rob.base.model.input_lower[0] - 1e-7);
    }

    // The committed nominal trajectory reaches the goal exactly enough for
    // the strict replay audit (it was added to the store without throwing).
    REQUIRE(goal_reached(rec.nominal.trajectory.states.back(), rob.base.goal,
                         rob.base.goal_tol));

    // Candidate workload at t=0: every window slot of every stored run plus
    // one goal probe per horizon offset. The store visible to iteration j was
    // runs 0..j-1.
    int t_star = store.trajectory(0).duration();
    for (size_t i = 1; i < j; ++i)
      t_star = std::min(t_star, store.trajectory(static_cast<int>(i)).duration());
    const int slots = std::max(t_star - cfg.horizon, 0) + 1;
    REQUIRE(rec.nominal.steps[0].candidates_evaluated ==
            static_cast<int>(j) * slots + cfg.horizon);
  }

  const int final_T = records.back().nominal.T_j;
  REQUIRE(final_T < records[0].nominal.T_j);
  if (mode == controller::Mode::Relaxed) {
    REQUIRE(final_T == 14);
    // Relaxed terminal records hull weights.
    const auto& lam = records.back().nominal.steps[0].lambda;
    if (!records.back().nominal.steps[0].probe) {
      REQUIRE(lam.size() > 0);
      REQUIRE(lam.sum() == Approx(1.0).margin(1e-6));
      REQUIRE(lam.minCoeff() >= -1e-9);
    }
  } else {
    REQUIRE(final_T == 15);
  }
}

TEST_CASE("robust runs are deterministic for a fixed seed") {
  const auto rob = robust::make_robust_double_integrator();
  const auto cfg = robust_config(controller::Mode::Enumeration);
  const auto a = robust::run_robust_task(rob, cfg, 2, 777);
  const auto b = robust::run_robust_task(rob, cfg, 2, 777);
  REQUIRE(a.size() == b.size());
  for (size_t j = 0; j < a.size(); ++j) {
    REQUIRE(a[j].nominal.T_j == b[j].nominal.T_j);
    REQUIRE(a[j].true_states.size() == b[j].true_states.size());
    for (size_t t = 0; t < a[j].true_states.size(); ++t)
      REQUIRE(a[j].true_states[t] == b[j].true_states[t]);
  }
  const auto c = robust::run_robust_task(rob, cfg, 2, 778);
  bool identical = true;
  for (size_t t = 0; t < c[1].true_states.size() && identical; ++t)
    identical = t < a[1].true_states.size() && c[1].true_states[t] == a[1].true_states[t];
  REQUIRE_FALSE(identical);
}

TEST_CASE("robust iteration guards") {
  const auto rob = robust::make_robust_double_integrator();
  const auto cfg = robust_config(controller::Mode::Enumeration);

  SECTION("empty store") {
    memory::SafeSetStore store(rob.tightened);
    REQUIRE_THROWS_AS(
        robust::run_robust_iteration(rob, store, cfg, rob.base.x_start, {}),
        EmptyStore);
  }

  SECTION("step cap hit is loud") {
    memory::SafeSetStore store(rob.tightened);
    store.add_trajectory(robust::robust_demo_initial_trajectory(rob));
    auto capped = cfg;
    capped.step_cap = 5;  // optimum needs 14+ nominal steps
    const auto w = robust::sample_disturbances(rob.tube, 8, 1);
    REQUIRE_THROWS_AS(robust::run_robust_iteration(rob, store, capped, rob.base.x_start, w),
                      StepCapExceeded);
  }
}
