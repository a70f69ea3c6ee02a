#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <random>

#include "lmpc/nlp.hpp"
#include "oracles.hpp"

using namespace lmpc;
using nlp::NlpProblem;
using nlp::NlpSolution;
using nlp::SolveStatus;
using nlp::SolverOptions;

namespace {

NlpProblem quadratic_to(const Vec& c) {
  NlpProblem p;
  p.dim = static_cast<int>(c.size());
  p.objective = [c](const Vec& z) { return 0.5 * (z - c).squaredNorm(); };
  p.gradient = [c](const Vec& z) { return Vec(z - c); };
  return p;
}

}  // namespace

TEST_CASE("unconstrained quadratic solves to its center") {
  const Vec c = (Vec(3) << 1.0, -2.0, 0.5).finished();
  const auto sol = nlp::solve(quadratic_to(c), Vec::Zero(3));
  REQUIRE(sol.status == SolveStatus::Optimal);
  REQUIRE(inf_norm(sol.z - c) < 1e-6);
}

TEST_CASE("bound-constrained quadratic clips at the active bounds") {
  const Vec c = (Vec(3) << 2.0, -3.0, 0.25).finished();
  NlpProblem p = quadratic_to(c);
  p.lower = Vec::Constant(3, -1.0);
  p.upper = Vec::Constant(3, 1.0);
  const auto sol = nlp::solve(p, Vec::Zero(3));
  REQUIRE(sol.status == SolveStatus::Optimal);
  REQUIRE(sol.z[0] == Catch::Approx(1.0).margin(1e-8));
  REQUIRE(sol.z[1] == Catch::Approx(-1.0).margin(1e-8));
  REQUIRE(sol.z[2] == Catch::Approx(0.25).margin(1e-6));
}

TEST_CASE("equality-constrained quadratic matches the closed-form KKT solution") {
  // min 0.5 z'Qz + q'z  s.t.  A z = b, with the KKT system solved directly.
  Mat Q = (Mat(3, 3) << 4, 1, 0, 1, 3, 0, 0, 0, 2).finished();
  const Vec q = (Vec(3) << -1.0, 2.0, 0.5).finished();
  Mat A = (Mat(1, 3) << 1, 1, 1).finished();
  const Vec b = (Vec(1) << 1.0).finished();

  Mat kkt = Mat::Zero(4, 4);
  kkt.topLeftCorner(3, 3) = Q;
  kkt.topRightCorner(3, 1) = A.transpose();
  kkt.bottomLeftCorner(1, 3) = A;
  const Vec rhs = (Vec(4) << 1.0, -2.0, -0.5, 1.0).finished();
  const Vec exact = kkt.fullPivLu().solve(rhs).head(3);

  NlpProblem p;
  p.dim = 3;
  p.objective = [Q, q](const Vec& z) { return 0.5 * z.dot(Q * z) + q.dot(z); };
  p.gradient = [Q, q](const Vec& z) { return Vec(Q * z + q); };
  p.m_eq = 1;
  p.eq = [A, b](const Vec& z) { return Vec(A * z - b); };
  p.eq_jac = [A](const Vec&) { return A; };
  const auto sol = nlp::solve(p, Vec::Zero(3));
  REQUIRE(sol.status == SolveStatus::Optimal);
  REQUIRE(inf_norm(sol.z - exact) < 1e-5);
  REQUIRE(sol.feasibility_residual < 1e-6);
}

TEST_CASE("active nonlinear inequality lands on the circle") {
  // min (z0-2)^2 + (z1-2)^2  s.t.  z0^2 + z1^2 <= 1: optimum on the boundary.
  NlpProblem p;
  p.dim = 2;
  p.objective = [](const Vec& z) {
    return (z[0] - 2) * (z[0] - 2) + (z[1] - 2) * (z[1] - 2);
  };
  p.gradient = [](const Vec& z) {
    return Vec((Vec(2) << 2 * (z[0] - 2), 2 * (z[1] - 2)).finished());
  };
  p.m_ineq = 1;
  p.ineq = [](const Vec& z) { return Vec((Vec(1) << z.squaredNorm() - 1.0).finished()); };
  p.ineq_jac = [](const Vec& z) { return Mat(2.0 * z.transpose()); };
  const auto sol = nlp::solve(p, Vec::Zero(2));
  REQUIRE(sol.status == SolveStatus::Optimal);
  const double r = std::sqrt(0.5);
  REQUIRE(sol.z[0] == Catch::Approx(r).margin(1e-5));
  REQUIRE(sol.z[1] == Catch::Approx(r).margin(1e-5));
}

TEST_CASE("Rosenbrock valley is minimized from the standard start") {
  NlpProblem p;
  p.dim = 2;
  p.objective = [](const Vec& z) {
    const double a = 1.0 - z[0], b = z[1] - z[0] * z[0];
    return a * a + 100.0 * b * b;
  };
  p.gradient = [](const Vec& z) {
    const double b = z[1] - z[0] * z[0];
    Vec g(2);
    g[0] = -2.0 * (1.0 - z[0]) - 400.0 * z[0] * b;
    g[1] = 200.0 * b;
    return g;
  };
  const auto sol = nlp::solve(p, (Vec(2) << -1.2, 1.0).finished());
  REQUIRE(sol.status == SolveStatus::Optimal);
  REQUIRE(inf_norm(sol.z - Vec::Ones(2)) < 1e-4);
}

TEST_CASE("mixed equality and bound: minimum of x+y on the half unit circle") {
  NlpProblem p;
  p.dim = 2;
  p.objective = [](const Vec& z) { return z[0] + z[1]; };
  p.gradient = [](const Vec&) { return Vec(Vec::Ones(2)); };
  p.m_eq = 1;
  p.eq = [](const Vec& z) { return Vec((Vec(1) << z.squaredNorm() - 1.0).finished()); };
  p.eq_jac = [](const Vec& z) { return Mat(2.0 * z.transpose()); };
  p.lower = (Vec(2) << 0.0, -10.0).finished();
  p.upper = Vec::Constant(2, 10.0);
  const auto sol = nlp::solve(p, (Vec(2) << 0.5, -0.5).finished());
  REQUIRE(sol.status == SolveStatus::Optimal);
  REQUIRE(sol.z[0] == Catch::Approx(0.0).margin(1e-6));
  REQUIRE(sol.z[1] == Catch::Approx(-1.0).margin(1e-5));
}

TEST_CASE("contradictory constraints are reported infeasible, not solved") {
  NlpProblem p;
  p.dim = 1;
  p.objective = [](const Vec&) { return 0.0; };
  p.gradient = [](const Vec&) { return Vec(Vec::Zero(1)); };
  p.m_eq = 1;
  p.eq = [](const Vec& z) { return Vec((Vec(1) << z[0]).finished()); };
  p.eq_jac = [](const Vec&) { return Mat(Mat::Ones(1, 1)); };
  p.lower = Vec::Constant(1, 1.0);  // z >= 1 contradicts z == 0
  p.upper = Vec::Constant(1, 2.0);
  const auto sol = nlp::solve(p, Vec::Constant(1, 1.5));
  REQUIRE(sol.status == SolveStatus::Infeasible);
  REQUIRE(sol.feasibility_residual > 0.1);
}

TEST_CASE("feasible stationary warm starts return without outer iterations") {
  const Vec c = (Vec(2) << 0.5, -0.5).finished();
  NlpProblem p = quadratic_to(c);
  const auto sol = nlp::solve(p, c);
  REQUIRE(sol.status == SolveStatus::Optimal);
  REQUIRE(sol.outer_iterations == 0);
  REQUIRE(sol.z == c);
}

TEST_CASE("simplex-constrained linear programs match vertex enumeration") {
  std::mt19937_64 rng(123);
  auto u01 = [&rng]() { return static_cast<double>(rng() >> 11) * 0x1.0p-53; };
  for (int trial = 0; trial < 10; ++trial) {
    const int n = 4 + static_cast<int>(rng() % 4);  // 4..7 vars
    const int m = 3;
    Vec c(n);
    for (int i = 0; i < n; ++i) c[i] = -1.0 + 2.0 * u01();
    // First row pins the weights to the simplex, keeping the program bounded,
    // which matches how the library uses these programs.
    Mat A(m, n);
    A.row(0).setOnes();
    for (int i = 1; i < m; ++i)
      for (int j = 0; j < n; ++j) A(i, j) = -1.0 + 2.0 * u01();
    // Make the system feasible by construction: b = A x for a simplex point x.
    Vec x_feas(n);
    for (int i = 0; i < n; ++i) x_feas[i] = 0.05 + u01();
    x_feas /= x_feas.sum();
    const Vec b = A * x_feas;

    const auto expected = oracles::lp_vertex_enumeration(c, A, b);
    REQUIRE(expected.has_value());
    const auto sol = nlp::solve_lp(c, A, b, /*nonneg=*/true);
    REQUIRE(sol.feasibility_residual < 1e-8);
    REQUIRE(sol.objective == Catch::Approx(expected->second).margin(1e-7));
  }
}

TEST_CASE("gradient checker flags a deliberately wrong gradient") {
  NlpProblem good = quadratic_to((Vec(2) << 1.0, 1.0).finished());
  REQUIRE(nlp::check_gradients(good, (Vec(2) << 0.3, -0.4).finished(), 1e-6).ok);

  NlpProblem bad = good;
  bad.gradient = [](const Vec& z) { return Vec(1.5 * z); };  // wrong on purpose
  const auto rep = nlp::check_gradients(bad, (Vec(2) << 0.3, -0.4).finished(), 1e-6);
  REQUIRE(!rep.ok);
  REQUIRE(rep.max_rel_error > 1e-2);
}

TEST_CASE("finite-difference fallback reaches the same optimum as analytic Jacobians") {
  NlpProblem p;
  p.dim = 2;
  p.objective = [](const Vec& z) { return (z[0] - 3) * (z[0] - 3) + z[1] * z[1]; };
  // no gradient: evaluator falls back to forward differences
  p.m_eq = 1;
  p.eq = [](const Vec& z) { return Vec((Vec(1) << z[0] + z[1] - 2.0).finished()); };
  SolverOptions opt;
  opt.jacobian_mode = SolverOptions::JacobianMode::ForwardDifference;
  const auto sol = nlp::solve(p, Vec::Zero(2), opt);
  REQUIRE(sol.status == SolveStatus::Optimal);
  // analytic optimum of (x-3)^2 + y^2 on x + y = 2 is (2.5, -0.5)
  REQUIRE(sol.z[0] == Catch::Approx(2.5).margin(1e-4));
  REQUIRE(sol.z[1] == Catch::Approx(-0.5).margin(1e-4));
}

TEST_CASE("KKT residuals vanish at a known optimum and not elsewhere") {
  // min (z0-1)^2 + (z1-1)^2 s.t. z0 + z1 <= 1: optimum (0.5, 0.5), lambda = 1.
  NlpProblem p;
  p.dim = 2;
  p.objective = [](const Vec& z) {
    return (z[0] - 1) * (z[0] - 1) + (z[1] - 1) * (z[1] - 1);
  };
  p.gradient = [](const Vec& z) {
    return Vec((Vec(2) << 2 * (z[0] - 1), 2 * (z[1] - 1)).finished());
  };
  p.m_ineq = 1;
  p.ineq = [](const Vec& z) { return Vec((Vec(1) << z[0] + z[1] - 1.0).finished()); };
  p.ineq_jac = [](const Vec&) { return Mat(Mat::Ones(1, 2)); };

  const Vec z_star = Vec::Constant(2, 0.5);
  const Vec lam = Vec::Constant(1, 1.0);
  const auto at_opt = nlp::kkt_residuals(p, z_star, Vec(0), lam, {});
  REQUIRE(at_opt.stationarity < 1e-12);
  REQUIRE(at_opt.feasibility < 1e-12);

  const auto off_opt = nlp::kkt_residuals(p, Vec::Zero(2), Vec(0), Vec::Zero(1), {});
  REQUIRE(off_opt.stationarity > 1.0);
}
