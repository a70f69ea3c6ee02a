#pragma once

#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "lmpc/controller.hpp"
#include "lmpc/initializers.hpp"
#include "lmpc/memory.hpp"
#include "lmpc/model.hpp"
#include "lmpc/verify.hpp"

namespace lmpc::campaign {

using json = memory::json;
namespace fs = std::filesystem;

// Exit codes shared by the command entry points.
enum ExitCode : int { ExitOk = 0, ExitVerifyFailed = 1, ExitBadConfig = 2, ExitRunFailure = 3 };

struct CellSpec {
  long P = -1;  // window length per stored iteration (negative: full windows)
  int i = 0;    // use the last i stored iterations (0: all)
};

struct CampaignConfig {
  std::string benchmark;
  controller::Mode mode = controller::Mode::Enumeration;
  int horizon = 0;
  std::vector<CellSpec> cells;
  int num_iterations = 1;
  std::vector<Vec> initial_conditions;
  nlp::SolverOptions solver;
  std::uint64_t seed = 1;
  std::string output_dir = "out";
  bool zero_timing = false;  // zero every reported duration: byte-stable outputs
  int step_cap = 0;
};

inline controller::Mode mode_from_string(const std::string& s) {
  if (s == "enumeration") return controller::Mode::Enumeration;
  if (s == "relaxed") return controller::Mode::Relaxed;
  if (s == "robust") return controller::Mode::Robust;
  throw ConfigError("unknown mode '" + s + "'");
}

inline CampaignConfig parse_campaign(const json& j) {
  CampaignConfig cfg;
  try {
    cfg.benchmark = j.at("benchmark").get<std::string>();
    cfg.mode = mode_from_string(j.at("mode").get<std::string>());
    cfg.horizon = j.value("horizon", 0);
    cfg.num_iterations = j.at("num_iterations").get<int>();
    for (const auto& c : j.at("subsets")) {
      CellSpec cell;
      cell.P = c.at("P").get<long>();
      cell.i = c.at("i").get<int>();
      cfg.cells.push_back(cell);
    }
    if (j.contains("initial_conditions"))
      for (const auto& row : j["initial_conditions"]) {
        Vec x(row.size());
        for (size_t k = 0; k < row.size(); ++k) x[static_cast<int>(k)] = row[k].get<double>();
        cfg.initial_conditions.push_back(std::move(x));
      }
    if (j.contains("solver")) {
      const auto& s = j["solver"];
      cfg.solver.tol_feas = s.value("tol_feas", cfg.solver.tol_feas);
      cfg.solver.tol_opt = s.value("tol_opt", cfg.solver.tol_opt);
      cfg.solver.max_outer = s.value("max_outer", cfg.solver.max_outer);
      cfg.solver.max_inner = s.value("max_inner", cfg.solver.max_inner);
    }
    cfg.seed = j.value("seed", std::uint64_t{1});
    cfg.output_dir = j.value("output_dir", std::string("out"));
    cfg.zero_timing = j.value("zero_timing", false);
    cfg.step_cap = j.value("step_cap", 0);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("campaign config: ") + e.what());
  }
  if (cfg.benchmark.empty() || cfg.cells.empty() || cfg.num_iterations < 1)
    throw ConfigError("campaign config: benchmark, subsets, num_iterations are required");
  return cfg;
}

namespace detail {

inline std::string fmt_seconds(double s) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", s);
  return buf;
}

inline std::string timestamp_utc() {
  const std::time_t now = std::time(nullptr);
  char buf[64];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  return buf;
}

inline std::string cell_name(const CampaignConfig& cfg, const CellSpec& cell, int N) {
  std::ostringstream os;
  os << cfg.benchmark << "_" << controller::to_string(cfg.mode) << "_N" << N << "_P"
     << (cell.P < 0 ? std::string("all") : std::to_string(cell.P)) << "_i"
     << (cell.i <= 0 ? std::string("all") : std::to_string(cell.i));
  return os.str();
}

inline json vec_to_json(const Vec& v) {
  json a = json::array();
  for (int k = 0; k < v.size(); ++k) a.push_back(v[k]);
  return a;
}

inline json trajectory_to_json(const memory::Trajectory& traj) {
  json states = json::array(), inputs = json::array();
  for (const auto& x : traj.states) states.push_back(vec_to_json(x));
  for (const auto& u : traj.inputs) inputs.push_back(vec_to_json(u));
  return json{{"states", std::move(states)}, {"inputs", std::move(inputs)}};
}

inline memory::Trajectory trajectory_from_json(const json& j) {
  memory::Trajectory traj;
  for (const auto& row : j.at("states")) {
    Vec x(row.size());
    for (size_t k = 0; k < row.size(); ++k) x[static_cast<int>(k)] = row[k].get<double>();
    traj.states.push_back(std::move(x));
  }
  for (const auto& row : j.at("inputs")) {
    Vec u(row.size());
    for (size_t k = 0; k < row.size(); ++k) u[static_cast<int>(k)] = row[k].get<double>();
    traj.inputs.push_back(std::move(u));
  }
  return traj;
}

inline void write_trajectory_file(const fs::path& path, const CampaignConfig& cfg,
                                  const CellSpec& cell, int N, const std::string& label,
                                  const memory::Trajectory& traj) {
  json j;
  j["format"] = "lmpc-trajectory/1";
  j["benchmark"] = cfg.benchmark;
  j["mode"] = controller::to_string(cfg.mode);
  j["N"] = N;
  j["P"] = cell.P;
  j["i"] = cell.i;
  j["label"] = label;
  j["T"] = traj.duration();
  j.update(trajectory_to_json(traj));
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write " + path.string());
  f << j.dump(1) << "\n";
}

inline json lambda_support_json(const controller::StepResult& step) {
  json a = json::array();
  if (step.lambda.size()) {
    for (int k = 0; k < step.lambda.size(); ++k)
      if (step.lambda[k] > 1e-12)
        a.push_back(json::array({step.candidates[k].iteration, step.candidates[k].time_index,
                                 step.lambda[k]}));
  } else if (!step.probe && step.terminal_iteration >= 0) {
    a.push_back(json::array({step.terminal_iteration, step.terminal_time_index, 1.0}));
  }
  return a;
}

inline void write_steps_file(const fs::path& path, const CampaignConfig& cfg,
                             const std::vector<controller::StepResult>& steps) {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write " + path.string());
  for (size_t t = 0; t < steps.size(); ++t) {
    const auto& s = steps[t];
    json j;
    j["t"] = t;
    j["cost"] = s.cost;
    j["solve_time"] = cfg.zero_timing ? 0.0 : s.solve_time;
    j["candidates_evaluated"] = s.candidates_evaluated;
    j["nlp_solves"] = s.nlp_solves;
    j["probe"] = s.probe;
    j["probe_steps"] = s.probe_steps;
    j["terminal_iteration"] = s.terminal_iteration;
    j["terminal_time_index"] = s.terminal_time_index;
    j["terminal_padded"] = s.terminal_padded;
    j["goal_weight"] = s.goal_weight;
    j["input"] = vec_to_json(s.input);
    j["lambda_support"] = lambda_support_json(s);
    f << j.dump() << "\n";
  }
}

inline std::vector<double> costs_from_steps_file(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read " + path.string());
  std::vector<double> costs;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    costs.push_back(json::parse(line).at("cost").get<double>());
  }
  return costs;
}

inline double iteration_solver_time(const controller::IterationRecord& rec) {
  double total = 0.0;
  for (const auto& s : rec.steps) total += s.solve_time;
  return total;
}

}  // namespace detail

// Runs every (P, i) cell of the campaign, writing tj.csv, one trajectory
// JSON and one steps JSONL per iteration, and re-auditing each trajectory
// from the files it just wrote. The LMPC_OUTPUT_DIR environment variable
// overrides the configured output directory.
inline int cmd_run(const CampaignConfig& cfg, std::ostream& out, std::ostream& err) {
  fs::path dir = cfg.output_dir;
  if (const char* env = std::getenv("LMPC_OUTPUT_DIR"); env && *env) dir = env;

  BenchmarkInstance inst;
  try {
    inst = make_benchmark(cfg.benchmark);
    fs::create_directories(dir);
  } catch (const std::exception& e) {
    err << "config error: " << e.what() << "\n";
    return ExitBadConfig;
  }
  if (cfg.mode == controller::Mode::Robust) {
    err << "config error: robust campaigns use the library API, not cmd_run\n";
    return ExitBadConfig;
  }
  const int N = cfg.horizon > 0 ? cfg.horizon : inst.horizon;

  std::ofstream tj(dir / "tj.csv");
  if (!tj) {
    err << "config error: cannot write " << (dir / "tj.csv").string() << "\n";
    return ExitBadConfig;
  }
  tj << "# generated " << detail::timestamp_utc() << "\n";
  tj << "benchmark,mode,N,P,i,j,T_j,wall_time_s\n";

  std::ofstream ics;
  if (!cfg.initial_conditions.empty()) {
    ics.open(dir / "ic_runs.csv");
    ics << "# generated " << detail::timestamp_utc() << "\n";
    ics << "benchmark,mode,N,P,i,ic_index,accepted,T,wall_time_s\n";
  }

  {
    std::ofstream echo(dir / "run_config.json");
    json j;
    j["benchmark"] = cfg.benchmark;
    j["mode"] = controller::to_string(cfg.mode);
    j["horizon"] = N;
    j["num_iterations"] = cfg.num_iterations;
    j["seed"] = cfg.seed;
    j["zero_timing"] = cfg.zero_timing;
    json cells = json::array();
    for (const auto& c : cfg.cells) cells.push_back(json{{"P", c.P}, {"i", c.i}});
    j["subsets"] = std::move(cells);
    echo << j.dump(1) << "\n";
  }

  for (const auto& cell : cfg.cells) {
    const std::string name = detail::cell_name(cfg, cell, N);
    controller::LmpcConfig lc;
    lc.mode = cfg.mode;
    lc.horizon = N;
    lc.use_last_iterations = cell.i;
    lc.points_per_iteration = cell.P;
    lc.solver = cfg.solver;
    lc.step_cap = cfg.step_cap;

    std::vector<controller::IterationRecord> records;
    memory::SafeSetStore store(inst);
    try {
      records = controller::run_task(inst, lc, cfg.num_iterations, &store);
    } catch (const LmpcError& e) {
      err << "cell " << name << " failed: " << e.what() << "\n";
      return ExitRunFailure;
    }

    for (const auto& rec : records) {
      const std::string label = std::to_string(rec.iteration);
      const fs::path traj_path = dir / ("trajectory_" + name + "_" + label + ".json");
      const fs::path steps_path = dir / ("steps_" + name + "_" + label + ".jsonl");
      detail::write_trajectory_file(traj_path, cfg, cell, N, label, rec.trajectory);
      detail::write_steps_file(steps_path, cfg, rec.steps);
      const double wall = cfg.zero_timing ? 0.0 : detail::iteration_solver_time(rec);
      tj << cfg.benchmark << "," << controller::to_string(cfg.mode) << "," << N << "," << cell.P
         << "," << cell.i << "," << rec.iteration << "," << rec.T_j << ","
         << detail::fmt_seconds(wall) << "\n";

      // Re-audit from the files just written, not the in-memory record.
      try {
        std::ifstream tf(traj_path);
        const json tj_json = json::parse(tf);
        const memory::Trajectory reloaded = detail::trajectory_from_json(tj_json);
        const auto costs = detail::costs_from_steps_file(steps_path);
        const auto report = verify::audit_run(inst, reloaded, costs);
        if (!report.ok()) {
          err << "cell " << name << " iteration " << label << " failed the reload audit\n";
          verify::audit_run(inst, reloaded, costs, &err);
          return ExitRunFailure;
        }
      } catch (const std::exception& e) {
        err << "cell " << name << " iteration " << label << " audit error: " << e.what() << "\n";
        return ExitRunFailure;
      }
    }

    // Perturbed starts are checked and run against the first stored
    // trajectory alone. Faster laps shift the safe-set windows toward their
    // own pace, which shrinks the short-horizon controllable set; the
    // gentle-launch seed keeps it wide enough to cover off-line starts.
    if (!cfg.initial_conditions.empty()) {
      memory::SafeSetStore ic_store(inst);
      ic_store.add_trajectory(store.trajectory(0));
      for (size_t k = 0; k < cfg.initial_conditions.size(); ++k) {
        const StateVec& x0 = cfg.initial_conditions[k];
        bool accepted = false;
        int T = -1;
        double wall = 0.0;
        try {
          accepted = controller::check_initial_condition(inst, ic_store, lc, x0);
          if (accepted) {
            const auto rec = controller::run_iteration(inst, ic_store, lc, x0);
            T = rec.T_j;
            wall = cfg.zero_timing ? 0.0 : detail::iteration_solver_time(rec);
            const std::string label = "ic" + std::to_string(k);
            detail::write_trajectory_file(dir / ("trajectory_" + name + "_" + label + ".json"),
                                          cfg, cell, N, label, rec.trajectory);
            detail::write_steps_file(dir / ("steps_" + name + "_" + label + ".jsonl"), cfg,
                                     rec.steps);
          }
        } catch (const LmpcError& e) {
          err << "cell " << name << " initial condition " << k << " failed: " << e.what() << "\n";
          return ExitRunFailure;
        }
        ics << cfg.benchmark << "," << controller::to_string(cfg.mode) << "," << N << "," << cell.P
            << "," << cell.i << "," << k << "," << (accepted ? 1 : 0) << "," << T << ","
            << detail::fmt_seconds(wall) << "\n";
      }
    }

    {
      std::ofstream sf(dir / ("store_" + name + ".json"));
      sf << store.to_json().dump(1) << "\n";
    }
    out << "cell " << name << ": T0=" << records.front().T_j
        << " final=" << records.back().T_j << " iterations=" << records.size() << "\n";
  }
  return ExitOk;
}

inline int cmd_run(const std::string& config_path, std::ostream& out, std::ostream& err) {
  CampaignConfig cfg;
  try {
    std::ifstream f(config_path);
    if (!f) throw ConfigError("cannot read " + config_path);
    cfg = parse_campaign(json::parse(f));
  } catch (const std::exception& e) {
    err << "config error: " << e.what() << "\n";
    return ExitBadConfig;
  }
  return cmd_run(cfg, out, err);
}

// Loads a stored safe set and runs the sampled hull-invariance check against
// it; exits 0 only on a clean sweep.
inline int cmd_verify(const std::string& store_path, const std::string& benchmark, long samples,
                      double beta, std::uint64_t seed, const std::string& certificate_path,
                      std::ostream& out, std::ostream& err) {
  if (samples <= 0) {
    err << "config error: sample count must be positive\n";
    return ExitBadConfig;
  }
  verify::SampleCertificate cert;
  try {
    BenchmarkInstance inst = make_benchmark(benchmark);
    std::ifstream f(store_path);
    if (!f) throw ConfigError("cannot read " + store_path);
    const memory::SafeSetStore store = memory::SafeSetStore::from_json(json::parse(f), inst);
    cert = verify::sample_check_assumption4(store, samples, beta, seed);
  } catch (const std::exception& e) {
    err << "verify error: " << e.what() << "\n";
    return ExitBadConfig;
  }
  if (!certificate_path.empty()) {
    std::ofstream f(certificate_path);
    if (!f) {
      err << "cannot write " << certificate_path << "\n";
      return ExitBadConfig;
    }
    f << verify::certificate_to_json(cert).dump(1) << "\n";
  }
  out << "samples " << cert.samples_passed << "/" << cert.samples_drawn
      << " passed, epsilon=" << cert.epsilon << " at beta=" << cert.beta << "\n";
  return cert.clean() ? ExitOk : ExitVerifyFailed;
}

// Summarizes a finished run directory from its artifacts.
inline int cmd_report(const std::string& run_dir, std::ostream& out, std::ostream& err) {
  const fs::path dir = run_dir;
  std::ifstream tj(dir / "tj.csv");
  if (!tj) {
    err << "missing " << (dir / "tj.csv").string() << "\n";
    return ExitBadConfig;
  }

  struct Row {
    std::string cell;
    int j;
    int T;
  };
  std::map<std::string, std::vector<Row>> cells;
  std::string line;
  while (std::getline(tj, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("benchmark,", 0) == 0) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string tok; std::getline(ss, tok, ',');) f.push_back(tok);
    if (f.size() != 8) {
      err << "malformed tj.csv row: " << line << "\n";
      return ExitBadConfig;
    }
    const std::string cell = f[0] + "_" + f[1] + "_N" + f[2] + "_P" +
                             (std::stol(f[3]) < 0 ? std::string("all") : f[3]) + "_i" +
                             (std::stoi(f[4]) <= 0 ? std::string("all") : f[4]);
    cells[cell].push_back({cell, std::stoi(f[5]), std::stoi(f[6])});
  }
  if (cells.empty()) {
    err << "tj.csv has no data rows\n";
    return ExitBadConfig;
  }

  int rc = ExitOk;
  for (auto& [cell, rows] : cells) {
    std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.j < b.j; });
    const int T0 = rows.front().T, T_final = rows.back().T;
    bool monotone = true;
    for (size_t k = 1; k < rows.size(); ++k)
      if (rows[k].T > rows[k - 1].T) monotone = false;
    int steady = rows.back().j;
    for (int k = static_cast<int>(rows.size()) - 1; k >= 0 && rows[k].T == T_final; --k)
      steady = rows[k].j;

    double step_time_total = 0.0;
    long step_count = 0;
    for (const auto& row : rows) {
      if (row.j == 0) continue;  // seed iteration has no controller steps
      const fs::path steps_path = dir / ("steps_" + cell + "_" + std::to_string(row.j) + ".jsonl");
      std::ifstream sf(steps_path);
      if (!sf) {
        err << "missing " << steps_path.string() << "\n";
        return ExitBadConfig;
      }
      std::string sline;
      while (std::getline(sf, sline)) {
        if (sline.empty()) continue;
        step_time_total += json::parse(sline).at("solve_time").get<double>();
        ++step_count;
      }
    }

    out << cell << ": T0=" << T0 << " final=" << T_final << " steady_at_j=" << steady
        << " mean_step_time_s="
        << detail::fmt_seconds(step_count ? step_time_total / step_count : 0.0);
    if (!monotone) {
      out << " NON-MONOTONE";
      rc = ExitVerifyFailed;
    }
    out << "\n";
  }
  return rc;
}

}  // namespace lmpc::campaign
