#pragma once

#include <algorithm>
#include <limits>
#include <nlohmann/json.hpp>
#include <string>
#include <utility>
#include <vector>

#include "lmpc/model.hpp"
#include "lmpc/nlp.hpp"
#include "lmpc/types.hpp"

namespace lmpc::memory {

using json = nlohmann::ordered_json;

// One completed task execution. states = x_0..x_T, inputs = u_0..u_T where
// u_T is a zero pad so goal states keep a replayable successor.
struct Trajectory {
  std::vector<StateVec> states;
  std::vector<InputVec> inputs;

  int duration() const { return static_cast<int>(states.size()) - 1; }
};

// A stored state offered as a terminal candidate: iteration i, time index k,
// the state itself and its recorded steps-to-goal. Entries synthesized past
// the stored end of a trajectory (goal padding) carry padded = true.
struct CandidatePoint {
  int iteration = 0;
  int time_index = 0;
  StateVec state;
  double cost_to_go = 0.0;
  bool padded = false;
};

// Which slice of the stored history a query uses: iterations from
// first_iteration on, at most points_per_iteration entries each (negative:
// no per-iteration cap). The default is the full history.
struct SubsetSpec {
  int first_iteration = 0;
  long points_per_iteration = -1;

  bool capped() const { return points_per_iteration >= 0; }
};

struct QueryResult {
  double value = 0.0;
  int iteration = 0;
  int time_index = 0;
};

struct ConvexQueryResult {
  double value = 0.0;
  Vec lambda;
  std::vector<CandidatePoint> basis;
};

class SafeSetStore {
 public:
  explicit SafeSetStore(BenchmarkInstance inst) : inst_(std::move(inst)) {}

  const BenchmarkInstance& instance() const { return inst_; }
  int num_iterations() const { return static_cast<int>(trajs_.size()); }
  bool empty() const { return trajs_.empty(); }
  const Trajectory& trajectory(int i) const { return trajs_.at(i); }

  // Duration of the best stored execution.
  int best_duration() const {
    if (trajs_.empty()) throw EmptyStore("best_duration on empty store");
    return t_star_;
  }

  // Validates and appends one execution. Replay mismatches and a final state
  // off the goal always throw; with strict=false, state/input constraint
  // violations are tolerated (useful for ingesting externally produced runs).
  int add_trajectory(Trajectory traj, bool strict = true) {
    const SystemModel& m = inst_.model;
    const int T = traj.duration();
    if (T < 1) throw DimensionMismatch("trajectory needs at least two states");
    if (traj.inputs.size() == traj.states.size() - 1)
      traj.inputs.push_back(InputVec::Zero(m.d));  // accept the unpadded form
    if (traj.inputs.size() != traj.states.size())
      throw DimensionMismatch("trajectory inputs/states size mismatch");
    for (const auto& x : traj.states)
      if (x.size() != m.n) throw DimensionMismatch("trajectory state size");
    for (const auto& u : traj.inputs)
      if (u.size() != m.d) throw DimensionMismatch("trajectory input size");

    for (int t = 0; t < T; ++t) {
      const StateVec replay = m.step(traj.states[t], traj.inputs[t]);
      const double err = inf_norm(replay - traj.states[t + 1]);
      if (err > 1e-9)
        throw ReplayMismatch("step " + std::to_string(t) + " off by " + std::to_string(err));
    }
    if (!goal_reached(traj.states[T], inst_.goal, inst_.goal_tol))
      throw GoalNotReached("final state misses the goal set");
    if (strict) {
      for (int t = 0; t <= T; ++t) {
        ConstraintResiduals r = constraint_residuals(inst_, traj.states[t], traj.inputs[t]);
        if (r.max_violation() > 1e-9)
          throw AuditFailure("constraint violation " + std::to_string(r.max_violation()) +
                             " at step " + std::to_string(t));
      }
    }

    t_star_ = trajs_.empty() ? T : std::min(t_star_, T);
    trajs_.push_back(std::move(traj));
    return num_iterations() - 1;
  }

  // Steps-to-goal of stored state (i, k): the number of time indices in
  // {k, .., T_i} whose state is outside the goal set.
  double cost_to_go(int i, int k) const {
    check_index(i, k);
    const Trajectory& tr = trajs_[i];
    double c = 0.0;
    for (int t = k; t <= tr.duration(); ++t)
      if (!goal_reached(tr.states[t], inst_.goal, inst_.goal_tol)) c += 1.0;
    return c;
  }

  // First usable time index of iteration i when queried at time t: stored
  // tails are aligned so that remaining-time budgets agree with the best
  // stored execution.
  int delta_index(int t, int i) const {
    if (t < 0) throw ConfigError("delta_index: negative time");
    if (i < 0 || i >= num_iterations()) throw DimensionMismatch("delta_index: iteration");
    const int Ti = trajs_[i].duration();
    return std::min(t + Ti - best_duration(), Ti);
  }

  // Terminal candidates available at time t under the given slice. Entries
  // are goal-padded past each trajectory's end (box goals contribute the goal
  // vertices instead of the stored terminal point). Exact duplicates (inf
  // norm below 1e-12) are merged keeping the lowest cost, ties resolved
  // toward the lowest (iteration, time index).
  std::vector<CandidatePoint> safe_set(int t, const SubsetSpec& spec = {}) const {
    if (trajs_.empty()) throw EmptyStore("safe_set on empty store");
    if (t < 0) throw ConfigError("safe_set: negative time");
    const int first = std::max(spec.first_iteration, 0);
    if (first >= num_iterations()) throw ConfigError("safe_set: first_iteration beyond store");

    std::vector<CandidatePoint> out;
    const auto goal_vertices = inst_.goal.vertices();
    for (int i = first; i < num_iterations(); ++i) {
      const Trajectory& tr = trajs_[i];
      const int Ti = tr.duration();
      const int delta = delta_index(t, i);
      const long span = spec.capped() ? spec.points_per_iteration : (Ti - delta + 1);
      for (long idx = 0; idx < span; ++idx) {
        const int k = delta + static_cast<int>(idx);
        const bool terminal_slot = k >= Ti;
        if (!spec.capped() && k > Ti) break;
        if (terminal_slot && inst_.goal.kind == GoalSpec::Kind::Box) {
          for (const auto& v : goal_vertices) out.push_back({i, k, v, 0.0, true});
        } else if (k > Ti) {
          out.push_back({i, k, inst_.goal.point, 0.0, true});
        } else {
          out.push_back({i, k, tr.states[k], cost_to_go(i, k), false});
        }
      }
    }
    return dedup(std::move(out));
  }

  // Minimum stored steps-to-goal over candidates matching x (inf norm within
  // 1e-9), with the matching (iteration, time index) reported. Lexicographic
  // tie-break toward the earliest iteration, then time index.
  QueryResult q_value(int t, const StateVec& x, const SubsetSpec& spec = {}) const {
    const auto cands = safe_set(t, spec);
    bool found = false;
    QueryResult best;
    for (const auto& c : cands) {
      if (inf_norm(c.state - x) > 1e-9) continue;
      if (!found || c.cost_to_go < best.value ||
          (c.cost_to_go == best.value &&
           std::pair(c.iteration, c.time_index) < std::pair(best.iteration, best.time_index))) {
        best = {c.cost_to_go, c.iteration, c.time_index};
        found = true;
      }
    }
    if (!found) throw NotInSafeSet("q_value: state not stored at time " + std::to_string(t));
    return best;
  }

  // Cheapest convex combination of candidates reproducing x: an LP over the
  // hull of the candidate states with stored costs as weights.
  ConvexQueryResult convex_q(int t, const StateVec& x, const SubsetSpec& spec = {},
                             const nlp::SolverOptions& opts = {}) const {
    const auto cands = safe_set(t, spec);
    const int K = static_cast<int>(cands.size());
    const int n = inst_.model.n;
    if (x.size() != n) throw DimensionMismatch("convex_q: state size");
    Vec costs(K);
    Mat A(n + 1, K);
    for (int j = 0; j < K; ++j) {
      costs[j] = cands[j].cost_to_go;
      A.col(j).head(n) = cands[j].state;
      A(n, j) = 1.0;
    }
    Vec b(n + 1);
    b.head(n) = x;
    b[n] = 1.0;
    nlp::NlpSolution sol = nlp::solve_lp(costs, A, b, /*nonneg=*/true, opts);
    const double feas_tol = std::max(1e-8, opts.tol_feas);
    if (sol.status == nlp::SolveStatus::Infeasible || sol.feasibility_residual > feas_tol)
      throw OutsideHull("convex_q: state outside candidate hull at time " + std::to_string(t));
    ConvexQueryResult res;
    res.value = sol.objective;
    res.lambda = sol.z;
    res.basis = cands;
    return res;
  }

  json to_json() const {
    json j;
    j["format"] = "lmpc-store/1";
    j["benchmark"] = inst_.model.name;
    json goal;
    goal["kind"] = inst_.goal.kind == GoalSpec::Kind::Point ? "point" : "box";
    goal["lower"] = std::vector<double>(inst_.goal.lower.data(),
                                        inst_.goal.lower.data() + inst_.goal.lower.size());
    goal["upper"] = std::vector<double>(inst_.goal.upper.data(),
                                        inst_.goal.upper.data() + inst_.goal.upper.size());
    j["goal"] = goal;
    j["trajectories"] = json::array();
    for (const auto& tr : trajs_) {
      json jt;
      jt["states"] = json::array();
      for (const auto& x : tr.states)
        jt["states"].push_back(std::vector<double>(x.data(), x.data() + x.size()));
      jt["inputs"] = json::array();
      for (const auto& u : tr.inputs)
        jt["inputs"].push_back(std::vector<double>(u.data(), u.data() + u.size()));
      j["trajectories"].push_back(std::move(jt));
    }
    return j;
  }

  // Rebuilds a store against a caller-supplied instance (the JSON only names
  // the benchmark). Every trajectory is re-validated on load.
  static SafeSetStore from_json(const json& j, BenchmarkInstance inst, bool strict = true) {
    if (!j.contains("format") || j["format"] != "lmpc-store/1")
      throw ConfigError("store JSON: unknown format tag");
    if (j.at("benchmark").get<std::string>() != inst.model.name)
      throw ConfigError("store JSON: benchmark '" + j.at("benchmark").get<std::string>() +
                        "' does not match instance '" + inst.model.name + "'");
    SafeSetStore store(std::move(inst));
    for (const auto& jt : j.at("trajectories")) {
      Trajectory tr;
      for (const auto& row : jt.at("states")) {
        const auto vals = row.get<std::vector<double>>();
        tr.states.push_back(Eigen::Map<const Vec>(vals.data(), vals.size()));
      }
      for (const auto& row : jt.at("inputs")) {
        const auto vals = row.get<std::vector<double>>();
        tr.inputs.push_back(Eigen::Map<const Vec>(vals.data(), vals.size()));
      }
      store.add_trajectory(std::move(tr), strict);
    }
    return store;
  }

 private:
  void check_index(int i, int k) const {
    if (i < 0 || i >= num_iterations()) throw DimensionMismatch("iteration index out of range");
    if (k < 0 || k > trajs_[i].duration()) throw DimensionMismatch("time index out of range");
  }

  static std::vector<CandidatePoint> dedup(std::vector<CandidatePoint> in) {
    std::sort(in.begin(), in.end(), [](const CandidatePoint& a, const CandidatePoint& b) {
      return std::tuple(a.cost_to_go, a.iteration, a.time_index) <
             std::tuple(b.cost_to_go, b.iteration, b.time_index);
    });
    std::vector<CandidatePoint> out;
    for (auto& c : in) {
      bool dup = false;
      for (const auto& kept : out)
        if (inf_norm(kept.state - c.state) <= 1e-12) {
          dup = true;
          break;
        }
      if (!dup) out.push_back(std::move(c));
    }
    std::sort(out.begin(), out.end(), [](const CandidatePoint& a, const CandidatePoint& b) {
      return std::tuple(a.iteration, a.time_index, a.cost_to_go) <
             std::tuple(b.iteration, b.time_index, b.cost_to_go);
    });
    return out;
  }

  BenchmarkInstance inst_;
  std::vector<Trajectory> trajs_;
  int t_star_ = 0;
};

}  // namespace lmpc::memory
