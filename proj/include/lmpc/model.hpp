#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "lmpc/types.hpp"

namespace lmpc {

// Target set for a task. Either a single state (which must be an equilibrium
// of the model it is paired with) or an axis-aligned box, possibly degenerate
// in some dimensions (e.g. a velocity pinned to zero).
struct GoalSpec {
  enum class Kind { Point, Box };
  Kind kind = Kind::Point;
  StateVec point;
  StateVec lower, upper;

  static GoalSpec make_point(const StateVec& xf) {
    GoalSpec g;
    g.kind = Kind::Point;
    g.point = xf;
    g.lower = xf;
    g.upper = xf;
    return g;
  }

  static GoalSpec make_box(const StateVec& lo, const StateVec& hi) {
    if (lo.size() != hi.size()) throw DimensionMismatch("goal box bounds differ in size");
    for (int i = 0; i < lo.size(); ++i)
      if (lo[i] > hi[i]) throw ConfigError("goal box has lower > upper");
    GoalSpec g;
    g.kind = Kind::Box;
    g.lower = lo;
    g.upper = hi;
    g.point = 0.5 * (lo + hi);
    return g;
  }

  // Vertices of the goal set. Degenerate box dimensions (width below 1e-12)
  // contribute a single coordinate, so a box flat in one dimension of a
  // 3-state model yields 4 vertices, not 8. A point goal yields itself.
  std::vector<StateVec> vertices() const {
    if (kind == Kind::Point) return {point};
    std::vector<int> free_dims;
    for (int i = 0; i < lower.size(); ++i)
      if (upper[i] - lower[i] > 1e-12) free_dims.push_back(i);
    if (free_dims.size() > 16) throw ConfigError("goal box has too many non-degenerate dims");
    std::vector<StateVec> out;
    const size_t count = size_t{1} << free_dims.size();
    for (size_t mask = 0; mask < count; ++mask) {
      StateVec v = 0.5 * (lower + upper);
      for (size_t b = 0; b < free_dims.size(); ++b)
        v[free_dims[b]] = (mask >> b & 1) ? upper[free_dims[b]] : lower[free_dims[b]];
      out.push_back(v);
    }
    return out;
  }
};

inline bool goal_reached(const StateVec& x, const GoalSpec& goal, double tol) {
  if (goal.kind == GoalSpec::Kind::Point) {
    if (x.size() != goal.point.size()) throw DimensionMismatch("goal_reached: state size");
    return inf_norm(x - goal.point) <= tol;
  }
  if (x.size() != goal.lower.size()) throw DimensionMismatch("goal_reached: state size");
  for (int i = 0; i < x.size(); ++i)
    if (x[i] < goal.lower[i] - tol || x[i] > goal.upper[i] + tol) return false;
  return true;
}

// Discrete-time system with box input constraints and smooth state
// inequalities h(x) <= 0. Jacobians are analytic; the solver can fall back to
// finite differences, but every shipped model provides exact derivatives.
struct SystemModel {
  std::string name;
  int n = 0;  // state dimension
  int d = 0;  // input dimension
  std::function<StateVec(const StateVec&, const InputVec&)> step;
  // A = d(step)/dx (n x n), B = d(step)/du (n x d)
  std::function<void(const StateVec&, const InputVec&, Mat&, Mat&)> step_jacobian;
  int num_state_ineq = 0;
  std::function<Vec(const StateVec&)> state_ineq;  // values, feasible iff all <= 0
  std::function<Mat(const StateVec&)> state_ineq_jacobian;
  InputVec input_lower, input_upper;
  // Sound lower bound on the number of steps needed to move the state into
  // the axis-aligned interval [tlo, thi] along any input-feasible trajectory.
  // Used to skip provably unreachable terminal candidates; must never
  // overestimate, returning 0 is always safe.
  std::function<int(const StateVec&, const StateVec&, const StateVec&)> min_steps;

  StateVec step_checked(const StateVec& x, const InputVec& u) const {
    if (x.size() != n) throw DimensionMismatch(name + ": state size " + std::to_string(x.size()));
    if (u.size() != d) throw DimensionMismatch(name + ": input size " + std::to_string(u.size()));
    StateVec next = step(x, u);
    if (!next.allFinite()) throw CallbackFailure(name + ": non-finite step result");
    return next;
  }
};

// A model paired with a task: start state, goal set, default horizon.
struct BenchmarkInstance {
  SystemModel model;
  StateVec x_start;
  GoalSpec goal;
  int horizon = 0;  // default prediction horizon N
  double goal_tol = 1e-6;
  std::map<std::string, double> params;
};

struct ConstraintResiduals {
  Vec state;  // h(x), feasible iff all <= 0
  Vec input;  // [u - ub; lb - u], feasible iff all <= 0
  double max_violation() const {
    double m = 0.0;
    for (int i = 0; i < state.size(); ++i) m = std::max(m, state[i]);
    for (int i = 0; i < input.size(); ++i) m = std::max(m, input[i]);
    return m;
  }
};

inline ConstraintResiduals constraint_residuals(const BenchmarkInstance& inst, const StateVec& x,
                                                const InputVec& u) {
  const SystemModel& m = inst.model;
  if (x.size() != m.n) throw DimensionMismatch("constraint_residuals: state size");
  if (u.size() != m.d) throw DimensionMismatch("constraint_residuals: input size");
  ConstraintResiduals r;
  r.state = m.num_state_ineq ? m.state_ineq(x) : Vec(0);
  r.input.resize(2 * m.d);
  r.input.head(m.d) = u - m.input_upper;
  r.input.tail(m.d) = m.input_lower - u;
  return r;
}

// ---------------------------------------------------------------------------
// Benchmark 1: planar vehicle with speed state and an elliptical keep-out
// zone. State (x, y, v), input (theta, a):
//   x+ = x + v cos(theta),  y+ = y + v sin(theta),  v+ = v + a
// Feasible iff ((x-cx)/ax)^2 + ((y-cy)/ay)^2 >= 1.
// ---------------------------------------------------------------------------

inline StateVec step_obstacle_dubins(const StateVec& x, const InputVec& u) {
  StateVec next(3);
  next[0] = x[0] + x[2] * std::cos(u[0]);
  next[1] = x[1] + x[2] * std::sin(u[0]);
  next[2] = x[2] + u[1];
  return next;
}

namespace detail {

// Smallest m with sum_{k=0}^{m-1} (v0 + k*dv) * scale >= dist, i.e. the number
// of steps needed to cover `dist` when per-step displacement grows by at most
// dv. Capped; the cap keeps screens cheap and stays a valid lower bound.
inline int min_steps_for_distance(double dist, double v0, double dv, double scale) {
  if (dist <= 1e-12) return 0;
  double covered = 0.0;
  for (int m = 1; m <= 512; ++m) {
    covered += (v0 + (m - 1) * dv) * scale;
    if (covered >= dist - 1e-9) return m;
  }
  return 512;
}

inline double interval_distance(double x, double lo, double hi) {
  if (x < lo) return lo - x;
  if (x > hi) return hi - x;
  return 0.0;
}

// Point goals must be equilibria under zero input, otherwise goal states
// padded past the end of a stored trajectory would not be replayable.
inline void check_goal_equilibrium(const BenchmarkInstance& inst) {
  if (inst.goal.kind != GoalSpec::Kind::Point) return;
  InputVec u0 = InputVec::Zero(inst.model.d);
  if (inf_norm(inst.model.step(inst.goal.point, u0) - inst.goal.point) > 1e-9)
    throw ConfigError(inst.model.name + ": point goal is not an equilibrium");
}

}  // namespace detail

inline BenchmarkInstance make_obstacle_dubins() {
  const double cx = 27.0, cy = -1.0, ax = 8.0, ay = 6.0;
  SystemModel m;
  m.name = "obstacle-dubins";
  m.n = 3;
  m.d = 2;
  m.step = [](const StateVec& x, const InputVec& u) { return step_obstacle_dubins(x, u); };
  m.step_jacobian = [](const StateVec& x, const InputVec& u, Mat& A, Mat& B) {
    const double c = std::cos(u[0]), s = std::sin(u[0]);
    A = Mat::Identity(3, 3);
    A(0, 2) = c;
    A(1, 2) = s;
    B = Mat::Zero(3, 2);
    B(0, 0) = -x[2] * s;
    B(1, 0) = x[2] * c;
    B(2, 1) = 1.0;
  };
  m.num_state_ineq = 1;
  m.state_ineq = [=](const StateVec& x) {
    Vec h(1);
    const double dx = (x[0] - cx) / ax, dy = (x[1] - cy) / ay;
    h[0] = 1.0 - dx * dx - dy * dy;
    return h;
  };
  m.state_ineq_jacobian = [=](const StateVec& x) {
    Mat J = Mat::Zero(1, 3);
    J(0, 0) = -2.0 * (x[0] - cx) / (ax * ax);
    J(0, 1) = -2.0 * (x[1] - cy) / (ay * ay);
    return J;
  };
  m.input_lower = (InputVec(2) << -M_PI / 2.0, -1.0).finished();
  m.input_upper = (InputVec(2) << M_PI / 2.0, 1.0).finished();
  m.min_steps = [](const StateVec& x, const StateVec& tlo, const StateVec& thi) {
    const double speed = std::abs(x[2]);
    int by_v = static_cast<int>(std::ceil(detail::interval_distance(x[2], tlo[2], thi[2]) - 1e-9));
    const double dx = detail::interval_distance(x[0], tlo[0], thi[0]);
    const double dy = detail::interval_distance(x[1], tlo[1], thi[1]);
    const double dist = std::hypot(dx, dy);
    int by_xy = detail::min_steps_for_distance(dist, speed, 1.0, 1.0);
    return std::max(by_v, by_xy);
  };

  BenchmarkInstance inst;
  inst.model = std::move(m);
  inst.x_start = (StateVec(3) << 0.0, 0.0, 0.0).finished();
  inst.goal = GoalSpec::make_point((StateVec(3) << 54.0, 0.0, 0.0).finished());
  inst.horizon = 6;
  inst.goal_tol = 1e-6;
  inst.params = {{"cx", cx}, {"cy", cy}, {"ax", ax}, {"ay", ay}};
  detail::check_goal_equilibrium(inst);
  return inst;
}

// ---------------------------------------------------------------------------
// Benchmark 2: double integrator whose control authority fades with speed.
// State (x, v), input a:
//   x+ = x + v dt,  v+ = v + (1 - v^2/vmax^2) a dt
// with 0 <= v <= vmax.
// ---------------------------------------------------------------------------

inline StateVec step_double_integrator(const StateVec& x, const InputVec& u, double dt,
                                       double v_max) {
  StateVec next(2);
  const double g = 1.0 - x[1] * x[1] / (v_max * v_max);
  next[0] = x[0] + x[1] * dt;
  next[1] = x[1] + g * u[0] * dt;
  return next;
}

inline BenchmarkInstance make_double_integrator(double v_max = 3.0, double dt = 0.5) {
  if (v_max <= 0.0 || dt <= 0.0) throw ConfigError("double-integrator needs v_max, dt > 0");
  SystemModel m;
  m.name = "double-integrator";
  m.n = 2;
  m.d = 1;
  m.step = [=](const StateVec& x, const InputVec& u) {
    return step_double_integrator(x, u, dt, v_max);
  };
  m.step_jacobian = [=](const StateVec& x, const InputVec& u, Mat& A, Mat& B) {
    A = Mat::Identity(2, 2);
    A(0, 1) = dt;
    A(1, 1) = 1.0 - 2.0 * x[1] * u[0] * dt / (v_max * v_max);
    B = Mat::Zero(2, 1);
    B(1, 0) = (1.0 - x[1] * x[1] / (v_max * v_max)) * dt;
  };
  m.num_state_ineq = 2;
  m.state_ineq = [=](const StateVec& x) {
    Vec h(2);
    h[0] = x[1] - v_max;
    h[1] = -x[1];
    return h;
  };
  m.state_ineq_jacobian = [](const StateVec&) {
    Mat J = Mat::Zero(2, 2);
    J(0, 1) = 1.0;
    J(1, 1) = -1.0;
    return J;
  };
  m.input_lower = (InputVec(1) << -1.0).finished();
  m.input_upper = (InputVec(1) << 1.0).finished();
  m.min_steps = [=](const StateVec& x, const StateVec& tlo, const StateVec& thi) {
    int by_v =
        static_cast<int>(std::ceil(detail::interval_distance(x[1], tlo[1], thi[1]) / dt - 1e-9));
    const double dist = detail::interval_distance(x[0], tlo[0], thi[0]);
    // Per-step x motion is |v| dt with |v| <= v_max and |dv| <= dt.
    double covered = 0.0, v = std::abs(x[1]);
    int by_x = 512;
    if (dist <= 1e-12) {
      by_x = 0;
    } else {
      for (int k = 1; k <= 512; ++k) {
        covered += std::min(v_max, v + (k - 1) * dt) * dt;
        if (covered >= dist - 1e-9) {
          by_x = k;
          break;
        }
      }
    }
    return std::max(by_v, by_x);
  };

  BenchmarkInstance inst;
  inst.model = std::move(m);
  inst.x_start = (StateVec(2) << -10.0, 0.0).finished();
  inst.goal = GoalSpec::make_point((StateVec(2) << 0.0, 0.0).finished());
  inst.horizon = 4;
  inst.goal_tol = 1e-6;
  inst.params = {{"v_max", v_max}, {"dt", dt}};
  detail::check_goal_equilibrium(inst);
  return inst;
}

// ---------------------------------------------------------------------------
// Benchmark 3: vehicle in curvilinear track coordinates on a circular
// centerline of radius R. State (s, e, v) = (progress, lateral error, speed),
// input (theta, a); gamma(s) = s/R is the centerline heading:
//   s+ = s + v cos(theta - gamma(s)) / (1 - e/R) dt
//   e+ = e + v sin(theta - gamma(s)) dt
//   v+ = v + a dt
// with |e| <= e_bound.
// ---------------------------------------------------------------------------

inline StateVec step_racing_dubins(const StateVec& x, const InputVec& u, double dt, double R) {
  const double denom = 1.0 - x[1] / R;
  if (std::abs(denom) < 1e-9) throw SingularGeometry("racing step at lateral error e == R");
  const double rel = u[0] - x[0] / R;
  StateVec next(3);
  next[0] = x[0] + x[2] * std::cos(rel) / denom * dt;
  next[1] = x[1] + x[2] * std::sin(rel) * dt;
  next[2] = x[2] + u[1] * dt;
  return next;
}

inline BenchmarkInstance make_racing_dubins(double dt = 0.5, double R = 10.0) {
  if (dt <= 0.0 || R <= 0.0) throw ConfigError("racing-dubins needs dt, R > 0");
  const double e_bound = 2.0;
  SystemModel m;
  m.name = "racing-dubins";
  m.n = 3;
  m.d = 2;
  m.step = [=](const StateVec& x, const InputVec& u) { return step_racing_dubins(x, u, dt, R); };
  m.step_jacobian = [=](const StateVec& x, const InputVec& u, Mat& A, Mat& B) {
    const double denom = 1.0 - x[1] / R;
    if (std::abs(denom) < 1e-9) throw SingularGeometry("racing jacobian at e == R");
    const double rel = u[0] - x[0] / R;
    const double c = std::cos(rel), s = std::sin(rel), v = x[2];
    A = Mat::Identity(3, 3);
    A(0, 0) = 1.0 + dt * v * s / (R * denom);
    A(0, 1) = dt * v * c / (R * denom * denom);
    A(0, 2) = dt * c / denom;
    A(1, 0) = -dt * v * c / R;
    A(1, 2) = dt * s;
    B = Mat::Zero(3, 2);
    B(0, 0) = -dt * v * s / denom;
    B(1, 0) = dt * v * c;
    B(2, 1) = dt;
  };
  m.num_state_ineq = 2;
  m.state_ineq = [=](const StateVec& x) {
    Vec h(2);
    h[0] = x[1] - e_bound;
    h[1] = -e_bound - x[1];
    return h;
  };
  m.state_ineq_jacobian = [](const StateVec&) {
    Mat J = Mat::Zero(2, 3);
    J(0, 1) = 1.0;
    J(1, 1) = -1.0;
    return J;
  };
  m.input_lower = (InputVec(2) << -2.0, -1.0).finished();
  m.input_upper = (InputVec(2) << 2.0, 1.0).finished();
  m.min_steps = [=](const StateVec& x, const StateVec& tlo, const StateVec& thi) {
    int by_v =
        static_cast<int>(std::ceil(detail::interval_distance(x[2], tlo[2], thi[2]) / dt - 1e-9));
    // |ds| per step <= 1.25 |v| dt on the feasible strip |e| <= 2 with R = 10,
    // and |de| per step <= |v| dt; |v| grows by at most dt per step.
    const double stretch = 1.0 / (1.0 - e_bound / R);
    const double ds = detail::interval_distance(x[0], tlo[0], thi[0]);
    const double de = detail::interval_distance(x[1], tlo[1], thi[1]);
    int by_s = detail::min_steps_for_distance(ds, std::abs(x[2]), dt, stretch * dt);
    int by_e = detail::min_steps_for_distance(de, std::abs(x[2]), dt, dt);
    return std::max({by_v, by_s, by_e});
  };

  BenchmarkInstance inst;
  inst.model = std::move(m);
  inst.x_start = (StateVec(3) << 0.0, 0.0, 0.0).finished();
  inst.goal = GoalSpec::make_box((StateVec(3) << 18.19, -e_bound, 0.0).finished(),
                                 (StateVec(3) << 18.69, e_bound, 0.0).finished());
  inst.horizon = 4;
  inst.goal_tol = 1e-6;
  inst.params = {{"dt", dt}, {"R", R}, {"e_bound", e_bound}};
  detail::check_goal_equilibrium(inst);
  return inst;
}

inline BenchmarkInstance make_benchmark(const std::string& name) {
  if (name == "obstacle-dubins") return make_obstacle_dubins();
  if (name == "double-integrator") return make_double_integrator();
  if (name == "racing-dubins") return make_racing_dubins();
  throw ConfigError("unknown benchmark '" + name + "'");
}

}  // namespace lmpc
