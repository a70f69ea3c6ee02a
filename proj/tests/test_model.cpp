#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <random>

#include "lmpc/model.hpp"

using namespace lmpc;

namespace {

// Central-difference check of an analytic step Jacobian at one point.
void require_step_jacobian(const SystemModel& m, const StateVec& x, const InputVec& u) {
  Mat A(m.n, m.n), B(m.n, m.d);
  m.step_jacobian(x, u, A, B);
  const double h = 1e-6;
  for (int j = 0; j < m.n; ++j) {
    StateVec xp = x, xm = x;
    xp[j] += h;
    xm[j] -= h;
    const Vec col = (m.step(xp, u) - m.step(xm, u)) / (2 * h);
    REQUIRE(inf_norm(col - A.col(j)) < 1e-6);
  }
  for (int j = 0; j < m.d; ++j) {
    InputVec up = u, um = u;
    up[j] += h;
    um[j] -= h;
    const Vec col = (m.step(x, up) - m.step(x, um)) / (2 * h);
    REQUIRE(inf_norm(col - B.col(j)) < 1e-6);
  }
  if (m.num_state_ineq) {
    const Mat J = m.state_ineq_jacobian(x);
    for (int j = 0; j < m.n; ++j) {
      StateVec xp = x, xm = x;
      xp[j] += h;
      xm[j] -= h;
      const Vec col = (m.state_ineq(xp) - m.state_ineq(xm)) / (2 * h);
      REQUIRE(inf_norm(col - J.col(j)) < 1e-6);
    }
  }
}

InputVec random_input(const SystemModel& m, std::mt19937_64& rng) {
  InputVec u(m.d);
  for (int i = 0; i < m.d; ++i) {
    const double t = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    u[i] = m.input_lower[i] + t * (m.input_upper[i] - m.input_lower[i]);
  }
  return u;
}

}  // namespace

TEST_CASE("obstacle vehicle step matches hand-computed values") {
  const auto inst = make_obstacle_dubins();
  const StateVec x = (StateVec(3) << 1.0, 2.0, 3.0).finished();
  const InputVec u = (InputVec(2) << 0.5, -0.25).finished();
  const StateVec next = inst.model.step(x, u);
  REQUIRE(next[0] == Catch::Approx(3.6327476856711183).epsilon(1e-14));
  REQUIRE(next[1] == Catch::Approx(3.438276615812609).epsilon(1e-14));
  REQUIRE(next[2] == Catch::Approx(2.75).epsilon(1e-14));
}

TEST_CASE("drag-limited double integrator step matches hand-computed values") {
  const auto inst = make_double_integrator(3.0, 0.5);
  const StateVec x = (StateVec(2) << -5.0, 2.0).finished();
  const InputVec u = (InputVec(1) << 0.8).finished();
  const StateVec next = inst.model.step(x, u);
  REQUIRE(next[0] == Catch::Approx(-4.0).epsilon(1e-14));
  REQUIRE(next[1] == Catch::Approx(2.2222222222222223).epsilon(1e-14));
}

TEST_CASE("track-coordinate vehicle step matches hand-computed values") {
  const auto inst = make_racing_dubins(0.5, 10.0);
  const StateVec x = (StateVec(3) << 2.0, 0.5, 1.5).finished();
  const InputVec u = (InputVec(2) << 0.3, -0.5).finished();
  const StateVec next = inst.model.step(x, u);
  REQUIRE(next[0] == Catch::Approx(2.7855296041668627).epsilon(1e-14));
  REQUIRE(next[1] == Catch::Approx(0.5748750624851211).epsilon(1e-14));
  REQUIRE(next[2] == Catch::Approx(1.25).epsilon(1e-14));
}

TEST_CASE("racing step is singular when the lateral error reaches the track radius") {
  const auto inst = make_racing_dubins(0.5, 10.0);
  const StateVec x = (StateVec(3) << 0.0, 10.0, 1.0).finished();
  REQUIRE_THROWS_AS(inst.model.step(x, InputVec::Zero(2)), SingularGeometry);
}

TEST_CASE("analytic Jacobians match central differences on every benchmark") {
  std::mt19937_64 rng(42);
  for (const char* name : {"obstacle-dubins", "double-integrator", "racing-dubins"}) {
    const auto inst = make_benchmark(name);
    for (int trial = 0; trial < 20; ++trial) {
      StateVec x(inst.model.n);
      for (int i = 0; i < inst.model.n; ++i)
        x[i] = -1.5 + 3.0 * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
      if (inst.model.name == "double-integrator") x[1] = std::abs(x[1]);  // keep v in range
      require_step_jacobian(inst.model, x, random_input(inst.model, rng));
    }
  }
}

TEST_CASE("goal sets: point, box, vertices, membership") {
  const StateVec xf = (StateVec(2) << 1.0, 2.0).finished();
  const GoalSpec point = GoalSpec::make_point(xf);
  REQUIRE(goal_reached(xf, point, 1e-9));
  REQUIRE(goal_reached((StateVec(2) << 1.0 + 5e-7, 2.0).finished(), point, 1e-6));
  REQUIRE(!goal_reached((StateVec(2) << 1.1, 2.0).finished(), point, 1e-6));
  REQUIRE(point.vertices().size() == 1);

  const GoalSpec box = GoalSpec::make_box((StateVec(3) << 0.0, -1.0, 0.0).finished(),
                                          (StateVec(3) << 1.0, 1.0, 0.0).finished());
  REQUIRE(box.vertices().size() == 4);  // third dimension is degenerate
  REQUIRE(goal_reached((StateVec(3) << 0.5, 0.0, 0.0).finished(), box, 1e-9));
  REQUIRE(!goal_reached((StateVec(3) << 0.5, 0.0, 0.1).finished(), box, 1e-6));
  REQUIRE_THROWS_AS(GoalSpec::make_box((StateVec(1) << 1.0).finished(),
                                       (StateVec(1) << 0.0).finished()),
                    ConfigError);
}

TEST_CASE("constraint residuals report state and input violations") {
  const auto inst = make_double_integrator();
  const auto ok = constraint_residuals(inst, (StateVec(2) << 0.0, 1.0).finished(),
                                       (InputVec(1) << 0.5).finished());
  REQUIRE(ok.max_violation() == 0.0);

  const auto bad_v = constraint_residuals(inst, (StateVec(2) << 0.0, 3.25).finished(),
                                          (InputVec(1) << 0.5).finished());
  REQUIRE(bad_v.max_violation() == Catch::Approx(0.25));

  const auto bad_u = constraint_residuals(inst, (StateVec(2) << 0.0, 1.0).finished(),
                                          (InputVec(1) << -1.5).finished());
  REQUIRE(bad_u.max_violation() == Catch::Approx(0.5));
}

TEST_CASE("reachability screen never overestimates the steps to reach a visited state") {
  std::mt19937_64 rng(7);
  for (const char* name : {"obstacle-dubins", "double-integrator", "racing-dubins"}) {
    const auto inst = make_benchmark(name);
    for (int trial = 0; trial < 50; ++trial) {
      StateVec x = inst.x_start;
      const int k = 1 + static_cast<int>(rng() % 8);
      StateVec z = x;
      for (int step = 0; step < k; ++step) z = inst.model.step(z, random_input(inst.model, rng));
      REQUIRE(inst.model.min_steps(x, z, z) <= k);
    }
  }
}

TEST_CASE("benchmark factory dispatches by name and rejects unknown names") {
  REQUIRE(make_benchmark("obstacle-dubins").model.n == 3);
  REQUIRE(make_benchmark("double-integrator").model.d == 1);
  REQUIRE(make_benchmark("racing-dubins").goal.kind == GoalSpec::Kind::Box);
  REQUIRE_THROWS_AS(make_benchmark("no-such-benchmark"), ConfigError);
}

TEST_CASE("benchmark start states are feasible and goals are equilibria") {
  for (const char* name : {"obstacle-dubins", "double-integrator", "racing-dubins"}) {
    const auto inst = make_benchmark(name);
    REQUIRE(constraint_residuals(inst, inst.x_start, InputVec::Zero(inst.model.d))
                .max_violation() <= 0.0);
    for (const auto& v : inst.goal.vertices())
      REQUIRE(inf_norm(inst.model.step(v, InputVec::Zero(inst.model.d)) - v) <= 1e-9);
  }
}
