#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "lmpc/types.hpp"

namespace lmpc::nlp {

constexpr double kInf = std::numeric_limits<double>::infinity();

// min f(z)  s.t.  eq(z) = 0,  ineq(z) <= 0,  lower <= z <= upper.
// Callbacks left empty are treated as absent; missing derivative callbacks
// fall back to finite differences.
struct NlpProblem {
  int dim = 0;
  std::function<double(const Vec&)> objective;
  std::function<Vec(const Vec&)> gradient;
  int m_eq = 0;
  std::function<Vec(const Vec&)> eq;
  std::function<Mat(const Vec&)> eq_jac;
  int m_ineq = 0;
  std::function<Vec(const Vec&)> ineq;
  std::function<Mat(const Vec&)> ineq_jac;
  Vec lower, upper;  // empty means unbounded
  bool linear = false;
};

enum class SolveStatus { Optimal, Infeasible, MaxIterations };

inline const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::Optimal: return "Optimal";
    case SolveStatus::Infeasible: return "Infeasible";
    default: return "MaxIterations";
  }
}

struct NlpSolution {
  Vec z;
  SolveStatus status = SolveStatus::MaxIterations;
  double objective = 0.0;
  double stationarity_residual = kInf;
  double feasibility_residual = kInf;
  Vec eq_multipliers, ineq_multipliers;
  int inner_iterations = 0;
  int outer_iterations = 0;

  bool feasible(double tol) const { return feasibility_residual <= tol; }
};

struct SolverOptions {
  double tol_feas = 1e-6;
  double tol_opt = 1e-5;
  int max_outer = 60;
  int max_inner = 2000;
  enum class JacobianMode { Analytic, ForwardDifference };
  JacobianMode jacobian_mode = JacobianMode::Analytic;
  double fd_step = 1e-7;
  double rho_init = 10.0;
  double rho_growth = 10.0;
  std::string trace_csv;  // when non-empty, append one row per outer iteration
};

namespace detail {

inline void ensure_finite(const Vec& v, const char* what) {
  if (!v.allFinite()) throw CallbackFailure(std::string("non-finite ") + what);
}

// Uniform access to problem data with finite-difference fallbacks.
class Evaluator {
 public:
  Evaluator(const NlpProblem& p, const SolverOptions& opt) : p_(p), opt_(opt) {
    if (p.dim <= 0) throw DimensionMismatch("NlpProblem.dim must be positive");
    if (!p.objective) throw CallbackFailure("NlpProblem.objective missing");
    if (p.m_eq > 0 && !p.eq) throw CallbackFailure("NlpProblem.eq missing");
    if (p.m_ineq > 0 && !p.ineq) throw CallbackFailure("NlpProblem.ineq missing");
    fd_ = opt.jacobian_mode == SolverOptions::JacobianMode::ForwardDifference;
  }

  double f(const Vec& z) const {
    double v = p_.objective(z);
    if (!std::isfinite(v)) throw CallbackFailure("non-finite objective");
    return v;
  }

  Vec grad(const Vec& z) const {
    if (p_.gradient && !fd_) {
      Vec g = p_.gradient(z);
      ensure_finite(g, "objective gradient");
      return g;
    }
    Vec g(p_.dim);
    const double f0 = f(z);
    Vec zp = z;
    for (int i = 0; i < p_.dim; ++i) {
      const double h = opt_.fd_step * (1.0 + std::abs(z[i]));
      zp[i] = z[i] + h;
      g[i] = (f(zp) - f0) / h;
      zp[i] = z[i];
    }
    return g;
  }

  Vec eq(const Vec& z) const {
    if (p_.m_eq == 0) return Vec(0);
    Vec c = p_.eq(z);
    if (c.size() != p_.m_eq) throw DimensionMismatch("eq callback size");
    ensure_finite(c, "equality constraint");
    return c;
  }

  Vec ineq(const Vec& z) const {
    if (p_.m_ineq == 0) return Vec(0);
    Vec c = p_.ineq(z);
    if (c.size() != p_.m_ineq) throw DimensionMismatch("ineq callback size");
    ensure_finite(c, "inequality constraint");
    return c;
  }

  Mat eq_jac(const Vec& z) const {
    if (p_.m_eq == 0) return Mat(0, p_.dim);
    if (p_.eq_jac && !fd_) return checked(p_.eq_jac(z), p_.m_eq, "eq jacobian");
    return fd_jac([this](const Vec& w) { return eq(w); }, z, p_.m_eq);
  }

  Mat ineq_jac(const Vec& z) const {
    if (p_.m_ineq == 0) return Mat(0, p_.dim);
    if (p_.ineq_jac && !fd_) return checked(p_.ineq_jac(z), p_.m_ineq, "ineq jacobian");
    return fd_jac([this](const Vec& w) { return ineq(w); }, z, p_.m_ineq);
  }

 private:
  Mat checked(Mat J, int rows, const char* what) const {
    if (J.rows() != rows || J.cols() != p_.dim)
      throw DimensionMismatch(std::string(what) + " shape");
    if (!J.allFinite()) throw CallbackFailure(std::string("non-finite ") + what);
    return J;
  }

  Mat fd_jac(const std::function<Vec(const Vec&)>& fn, const Vec& z, int rows) const {
    Mat J(rows, p_.dim);
    const Vec c0 = fn(z);
    Vec zp = z;
    for (int i = 0; i < p_.dim; ++i) {
      const double h = opt_.fd_step * (1.0 + std::abs(z[i]));
      zp[i] = z[i] + h;
      J.col(i) = (fn(zp) - c0) / h;
      zp[i] = z[i];
    }
    return J;
  }

  const NlpProblem& p_;
  const SolverOptions& opt_;
  bool fd_ = false;
};

inline Vec clamp(const Vec& w, const Vec& lo, const Vec& hi) {
  return w.cwiseMax(lo).cwiseMin(hi);
}

}  // namespace detail

// Independent KKT residual computation. Returns {stationarity, feasibility}.
// Stationarity folds in bound-multiplier complementarity: components pinned at
// a bound only count when the reduced gradient points the wrong way.
struct KktResiduals {
  double stationarity = kInf;
  double feasibility = kInf;
};

inline KktResiduals kkt_residuals(const NlpProblem& p, const Vec& z, const Vec& lam_eq,
                                  const Vec& lam_ineq, const SolverOptions& opt = {}) {
  detail::Evaluator ev(p, opt);
  KktResiduals r;
  const Vec ce = ev.eq(z);
  const Vec hi = ev.ineq(z);
  double feas = 0.0;
  for (int i = 0; i < ce.size(); ++i) feas = std::max(feas, std::abs(ce[i]));
  for (int i = 0; i < hi.size(); ++i) feas = std::max(feas, hi[i]);
  if (p.lower.size())
    for (int i = 0; i < p.dim; ++i) {
      feas = std::max(feas, p.lower[i] - z[i]);
      feas = std::max(feas, z[i] - p.upper[i]);
    }
  r.feasibility = std::max(feas, 0.0);

  Vec g = ev.grad(z);
  if (p.m_eq) g += ev.eq_jac(z).transpose() * lam_eq;
  if (p.m_ineq) g += ev.ineq_jac(z).transpose() * lam_ineq;
  double stat = 0.0;
  for (int i = 0; i < p.dim; ++i) {
    const double lo = p.lower.size() ? p.lower[i] : -kInf;
    const double hi_b = p.upper.size() ? p.upper[i] : kInf;
    const double tol_a = 1e-8 * (1.0 + std::abs(z[i]));
    const bool at_lo = z[i] <= lo + tol_a;
    const bool at_hi = z[i] >= hi_b - tol_a;
    double v = std::abs(g[i]);
    if (at_lo && g[i] > 0.0) v = 0.0;  // absorbed by lower-bound multiplier
    if (at_hi && g[i] < 0.0) v = 0.0;  // absorbed by upper-bound multiplier
    stat = std::max(stat, v);
  }
  // Complementarity: a strictly positive multiplier on a strictly inactive
  // inequality is an optimality violation.
  for (int i = 0; i < hi.size(); ++i)
    stat = std::max(stat, std::max(0.0, std::min(lam_ineq[i], -hi[i])));
  r.stationarity = stat;
  return r;
}

namespace detail {

// Bound-constrained inner minimization of the augmented Lagrangian by a
// two-metric projection method: a model-based step on the free variables,
// steepest descent on the epsilon-active ones, Armijo search along the
// projected arc. When the caller supplies a curvature model (Gauss-Newton
// rho J'J for the augmented Lagrangian) the free-variable step is a damped
// Newton solve against it, which stays effective at large penalties where
// a quasi-Newton metric falls apart; otherwise BFGS (inverse form).
struct InnerResult {
  Vec w;
  double value = 0.0;
  Vec grad;
  double pg_norm = kInf;
  int iterations = 0;
};

template <typename ValueFn, typename GradFn>
InnerResult minimize_bound_constrained(Vec w, const Vec& lo, const Vec& hi, ValueFn&& value_fn,
                                       GradFn&& grad_fn, double tol_pg, int max_iter,
                                       const std::function<Mat(const Vec&)>& curvature = {}) {
  const int n = static_cast<int>(w.size());
  const bool newton = static_cast<bool>(curvature);
  InnerResult res;
  w = clamp(w, lo, hi);
  double fw = value_fn(w);
  Vec g = grad_fn(w);
  Mat H;
  if (!newton) H = Mat::Identity(n, n);
  bool h_scaled = false;
  double mu = 1e-6;  // Levenberg damping for the Newton model

  auto pg_norm = [&](const Vec& wv, const Vec& gv) {
    double m = 0.0;
    for (int i = 0; i < n; ++i) {
      const double step = std::clamp(wv[i] - gv[i], lo[i], hi[i]) - wv[i];
      m = std::max(m, std::abs(step));
    }
    return m;
  };

  int it = 0;
  for (; it < max_iter; ++it) {
    const double pg = pg_norm(w, g);
    if (pg <= tol_pg) break;

    // Two-metric split: model step on free coordinates, gradient on the
    // epsilon-active set so the projection cannot fight the metric.
    Vec g_free = g;
    std::vector<char> active(n, 0);
    for (int i = 0; i < n; ++i) {
      const double tol_a = 1e-9 * (1.0 + std::abs(w[i]));
      if ((w[i] <= lo[i] + tol_a && g[i] > 0.0) || (w[i] >= hi[i] - tol_a && g[i] < 0.0)) {
        active[i] = 1;
        g_free[i] = 0.0;
      }
    }

    Vec d;
    double slope = 0.0;
    if (newton) {
      std::vector<int> free_idx;
      free_idx.reserve(n);
      for (int i = 0; i < n; ++i)
        if (!active[i]) free_idx.push_back(i);
      d = Vec::Zero(n);
      if (!free_idx.empty()) {
        const Mat C = curvature(w);
        const int nf = static_cast<int>(free_idx.size());
        Mat A(nf, nf);
        Vec gf(nf);
        for (int r = 0; r < nf; ++r) {
          gf[r] = g[free_idx[r]];
          for (int cc = 0; cc < nf; ++cc) A(r, cc) = C(free_idx[r], free_idx[cc]);
        }
        const double scale = 1.0 + A.diagonal().cwiseAbs().maxCoeff();
        A.diagonal().array() += mu * scale;
        const Vec df = A.ldlt().solve(-gf);
        for (int r = 0; r < nf; ++r) d[free_idx[r]] = df[r];
      }
      for (int i = 0; i < n; ++i)
        if (active[i]) d[i] = -g[i];
      slope = g.dot(d);
      if (!(slope < -1e-14)) {  // model step unusable: projected steepest descent
        d = -g_free;
        for (int i = 0; i < n; ++i)
          if (active[i]) d[i] = -g[i];
        slope = g.dot(d);
        if (!(slope < -1e-14)) break;
      }
    } else {
      d = -(H * g_free);
      for (int i = 0; i < n; ++i)
        if (active[i]) d[i] = -g[i];
      slope = g.dot(d);
      if (!(slope < -1e-14)) {  // not a descent direction: reset the metric
        H.setIdentity();
        h_scaled = false;
        d = -g_free;
        for (int i = 0; i < n; ++i)
          if (active[i]) d[i] = -g[i];
        slope = g.dot(d);
        if (!(slope < -1e-14)) break;
      }
    }

    double alpha = 1.0;
    Vec w_new;
    double f_new = 0.0;
    bool ok = false;
    for (int ls = 0; ls < 60; ++ls) {
      w_new = clamp(w + alpha * d, lo, hi);
      const double pred = g.dot(w_new - w);
      if (pred >= -1e-18) {
        alpha *= 0.5;
        continue;
      }
      f_new = value_fn(w_new);
      if (f_new <= fw + 1e-4 * pred) {
        ok = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!ok) {
      if (newton && mu < 1e10) {  // stiffen the model and retry
        mu *= 10.0;
        continue;
      }
      break;  // stalled: report the current iterate
    }

    if (newton) {
      if (alpha >= 1.0)
        mu = std::max(1e-12, mu / 3.0);
      else if (alpha < 0.25)
        mu = std::min(1e10, mu * 4.0);
    } else {
      Vec g_new = grad_fn(w_new);
      const Vec s = w_new - w;
      const Vec y = g_new - g;
      const double sy = s.dot(y);
      if (sy > 1e-12 * s.norm() * y.norm() && sy > 0.0) {
        if (!h_scaled) {
          const double yy = y.squaredNorm();
          if (yy > 0.0) H *= sy / yy;
          h_scaled = true;
        }
        const Vec Hy = H * y;
        const double yHy = y.dot(Hy);
        const double c1 = (1.0 + yHy / sy) / sy;
        H.noalias() += c1 * (s * s.transpose());
        H.noalias() -= (Hy * s.transpose() + s * Hy.transpose()) / sy;
      }
      w = std::move(w_new);
      fw = f_new;
      g = std::move(g_new);
      continue;
    }
    w = std::move(w_new);
    fw = f_new;
    g = grad_fn(w);
  }

  res.w = std::move(w);
  res.value = fw;
  res.grad = std::move(g);
  res.pg_norm = pg_norm(res.w, res.grad);
  res.iterations = it;
  return res;
}

}  // namespace detail

// Augmented Lagrangian method. Inequalities are converted to equalities with
// nonnegative slacks, bounds are kept explicit and handled by projection in
// the inner solver. Deterministic: no randomization anywhere.
inline NlpSolution solve(const NlpProblem& p, const Vec& z0, const SolverOptions& opt = {}) {
  detail::Evaluator ev(p, opt);
  const int nz = p.dim, mi = p.m_ineq, me = p.m_eq, nw = nz + mi, mc = me + mi;
  if (z0.size() != nz) throw DimensionMismatch("solve: z0 size");

  Vec lo(nw), hi(nw);
  lo.head(nz) = p.lower.size() ? p.lower : Vec::Constant(nz, -kInf);
  hi.head(nz) = p.upper.size() ? p.upper : Vec::Constant(nz, kInf);
  if (mi) {
    lo.tail(mi).setZero();
    hi.tail(mi).setConstant(kInf);
  }

  Vec w(nw);
  w.head(nz) = detail::clamp(z0, lo.head(nz), hi.head(nz));
  if (mi) w.tail(mi) = (-ev.ineq(w.head(nz))).cwiseMax(0.0);

  auto constraints = [&](const Vec& wv) {
    Vec c(mc);
    if (me) c.head(me) = ev.eq(wv.head(nz));
    if (mi) c.tail(mi) = ev.ineq(wv.head(nz)) + wv.tail(mi);
    return c;
  };

  Vec lambda = Vec::Zero(mc);
  double rho = opt.rho_init;

  std::ofstream trace;
  if (!opt.trace_csv.empty()) {
    trace.open(opt.trace_csv, std::ios::app);
    trace << "outer,inner_total,objective,violation,pg_norm,rho\n";
  }

  auto al_value = [&](const Vec& wv) {
    const Vec c = constraints(wv);
    return ev.f(wv.head(nz)) + lambda.dot(c) + 0.5 * rho * c.squaredNorm();
  };
  auto al_grad = [&](const Vec& wv) {
    const Vec c = constraints(wv);
    const Vec y = lambda + rho * c;
    Vec g(nw);
    g.head(nz) = ev.grad(wv.head(nz));
    if (me) g.head(nz) += ev.eq_jac(wv.head(nz)).transpose() * y.head(me);
    if (mi) {
      g.head(nz) += ev.ineq_jac(wv.head(nz)).transpose() * y.tail(mi);
      g.tail(mi) = y.tail(mi);
    }
    return g;
  };
  // Gauss-Newton curvature of the augmented Lagrangian. Keeps the inner
  // minimizer effective at large rho, where the penalty dominates and a
  // quasi-Newton metric degrades into tiny steps.
  const std::function<Mat(const Vec&)> al_curv =
      mc > 0 ? std::function<Mat(const Vec&)>([&](const Vec& wv) {
        Mat J(mc, nw);
        J.setZero();
        if (me) J.topLeftCorner(me, nz) = ev.eq_jac(wv.head(nz));
        if (mi) {
          J.bottomLeftCorner(mi, nz) = ev.ineq_jac(wv.head(nz));
          J.bottomRightCorner(mi, mi).setIdentity();
        }
        return Mat(rho * (J.transpose() * J));
      })
             : std::function<Mat(const Vec&)>{};

  NlpSolution sol;
  sol.z = w.head(nz);
  auto extract_multipliers = [&](const Vec& lam) {
    sol.eq_multipliers = me ? Vec(lam.head(me)) : Vec(0);
    sol.ineq_multipliers = mi ? Vec(lam.tail(mi).cwiseMax(0.0)) : Vec(0);
  };

  auto finish = [&](SolveStatus status) {
    sol.status = status;
    sol.objective = ev.f(sol.z);
    const KktResiduals r = kkt_residuals(p, sol.z, sol.eq_multipliers, sol.ineq_multipliers, opt);
    sol.stationarity_residual = r.stationarity;
    sol.feasibility_residual = r.feasibility;
    return sol;
  };

  // Fast path: a start that is already feasible and stationary (common for
  // feasibility problems warmed from a shifted previous solution).
  {
    const double viol = inf_norm(constraints(w));
    if (viol <= opt.tol_feas) {
      extract_multipliers(lambda);
      sol.z = w.head(nz);
      const KktResiduals r =
          kkt_residuals(p, sol.z, sol.eq_multipliers, sol.ineq_multipliers, opt);
      if (r.stationarity <= opt.tol_opt) {
        sol.status = SolveStatus::Optimal;
        sol.objective = ev.f(sol.z);
        sol.stationarity_residual = r.stationarity;
        sol.feasibility_residual = r.feasibility;
        return sol;
      }
    }
  }

  const double tol_inner_final = 0.5 * opt.tol_opt;
  double omega = std::max(1e-2, tol_inner_final);
  double eta = 0.1;
  std::vector<double> viol_history;
  // Track the best iterate seen, seeded with the start point so a capped or
  // stalled solve never returns anything worse than the warm start it was
  // handed. Until some iterate meets the feasibility tolerance "best" means
  // least infeasible; afterwards it means lowest objective among the
  // tolerance-feasible ones.
  double best_viol = inf_norm(constraints(w));
  double best_f = ev.f(w.head(nz));
  Vec best_w = w, best_lambda = lambda;
  std::vector<double> best_f_history;
  SolveStatus final_status = SolveStatus::Optimal;

  for (int outer = 0; outer < opt.max_outer; ++outer) {
    detail::InnerResult inner = detail::minimize_bound_constrained(
        w, lo, hi, al_value, al_grad, omega, opt.max_inner, al_curv);
    w = inner.w;
    sol.inner_iterations += inner.iterations;
    sol.outer_iterations = outer + 1;

    const Vec c = constraints(w);
    const double viol = inf_norm(c);
    const double fval = ev.f(w.head(nz));
    viol_history.push_back(viol);
    const bool iter_ok = viol <= opt.tol_feas;
    const bool best_ok = best_viol <= opt.tol_feas;
    if (iter_ok ? (!best_ok || fval < best_f) : (!best_ok && viol < best_viol)) {
      best_viol = viol;
      best_f = fval;
      best_w = w;
      best_lambda = lambda + rho * c;
    }
    best_f_history.push_back(best_viol <= opt.tol_feas ? best_f : kInf);
    if (trace.is_open())
      trace << outer << ',' << sol.inner_iterations << ',' << ev.f(w.head(nz)) << ',' << viol
            << ',' << inner.pg_norm << ',' << rho << '\n';

    if (viol <= opt.tol_feas && inner.pg_norm <= tol_inner_final) {
      lambda += rho * c;
      extract_multipliers(lambda);
      sol.z = w.head(nz);
      break;
    }

    if (viol <= std::max(eta, opt.tol_feas)) {
      lambda += rho * c;
      eta = std::max(opt.tol_feas, 0.2 * eta);
      omega = std::max(tol_inner_final, 0.2 * omega);
    } else {
      rho *= opt.rho_growth;
      if (rho > 1e14) rho = 1e14;
    }

    // Stall: the violation is essentially flat across a window of three outer
    // iterations while the penalty is already large. A feasible problem keeps
    // shrinking the violation as rho grows, so any steady progress blocks the
    // verdict. With a tolerance-feasible iterate already in hand the problem
    // is proven feasible; stop only once the recorded best objective has also
    // gone flat over the same window, otherwise keep grinding it down.
    const size_t k = viol_history.size();
    if (viol > opt.tol_feas && k >= 5 && rho >= 1e8 &&
        viol_history[k - 1] > 0.9 * viol_history[k - 4]) {
      if (best_viol > opt.tol_feas) {
        sol.z = best_w.head(nz);
        extract_multipliers(best_lambda);
        return finish(SolveStatus::Infeasible);
      }
      const double f_ref = best_f_history[k - 4];
      if (!(best_f < f_ref - 1e-7 * (1.0 + std::abs(best_f)))) {
        w = best_w;
        lambda = best_lambda;
        extract_multipliers(lambda);
        sol.z = w.head(nz);
        final_status = SolveStatus::MaxIterations;
        break;
      }
    }

    if (outer + 1 == opt.max_outer) {
      // Capped: fall through to the polish phases on the best iterate so the
      // caller still gets the tightest point this budget could produce.
      w = best_w;
      lambda = best_lambda;
      extract_multipliers(lambda);
      sol.z = w.head(nz);
      final_status = SolveStatus::MaxIterations;
      break;
    }
  }

  // Polish phase 1: Gauss-Newton feasibility refinement on the free
  // variables. Tightens equality residuals (terminal reach targets) from
  // solver tolerance to near machine precision.
  if (mc > 0) {
    for (int pass = 0; pass < 3; ++pass) {
      const Vec c = constraints(w);
      const double viol = inf_norm(c);
      if (viol <= 1e-13) break;
      Mat J(mc, nw);
      J.setZero();
      if (me) J.topLeftCorner(me, nz) = ev.eq_jac(w.head(nz));
      if (mi) {
        J.bottomLeftCorner(mi, nz) = ev.ineq_jac(w.head(nz));
        J.bottomRightCorner(mi, mi).setIdentity();
      }
      std::vector<int> free_idx;
      for (int i = 0; i < nw; ++i) {
        const double tol_a = 1e-9 * (1.0 + std::abs(w[i]));
        if (w[i] > lo[i] + tol_a && w[i] < hi[i] - tol_a) free_idx.push_back(i);
      }
      if (free_idx.empty()) break;
      Mat Jf(mc, static_cast<int>(free_idx.size()));
      for (size_t i = 0; i < free_idx.size(); ++i) Jf.col(i) = J.col(free_idx[i]);
      Eigen::CompleteOrthogonalDecomposition<Mat> cod(Jf);
      const Vec dz = cod.solve(-c);
      Vec w_try = w;
      for (size_t i = 0; i < free_idx.size(); ++i) w_try[free_idx[i]] += dz[i];
      w_try = detail::clamp(w_try, lo, hi);
      if (inf_norm(constraints(w_try)) < viol)
        w = w_try;
      else
        break;
    }
    sol.z = w.head(nz);
  }

  // Polish phase 2: least-squares multipliers on the free subspace.
  {
    const Vec z = sol.z;
    Vec g = ev.grad(z);
    Mat Jt(nz, mc);
    if (me) Jt.leftCols(me) = ev.eq_jac(z).transpose();
    if (mi) Jt.rightCols(mi) = ev.ineq_jac(z).transpose();
    std::vector<int> free_rows;
    for (int i = 0; i < nz; ++i) {
      const double lo_i = p.lower.size() ? p.lower[i] : -kInf;
      const double hi_i = p.upper.size() ? p.upper[i] : kInf;
      const double tol_a = 1e-8 * (1.0 + std::abs(z[i]));
      if (z[i] > lo_i + tol_a && z[i] < hi_i - tol_a) free_rows.push_back(i);
    }
    if (!free_rows.empty() && mc > 0) {
      Mat A(static_cast<int>(free_rows.size()), mc);
      Vec b(static_cast<int>(free_rows.size()));
      for (size_t i = 0; i < free_rows.size(); ++i) {
        A.row(i) = Jt.row(free_rows[i]);
        b[i] = -g[free_rows[i]];
      }
      Eigen::CompleteOrthogonalDecomposition<Mat> cod(A);
      Vec lam_ls = cod.solve(b);
      // Inequality multipliers must stay nonnegative and vanish on strictly
      // inactive rows; keep the refit only if it improves the KKT residuals.
      const Vec hi_v = ev.ineq(z);
      for (int i = 0; i < mi; ++i) {
        if (hi_v[i] < -1e-8) lam_ls[me + i] = 0.0;
        lam_ls[me + i] = std::max(lam_ls[me + i], 0.0);
      }
      const Vec le = me ? Vec(lam_ls.head(me)) : Vec(0);
      const Vec li = mi ? Vec(lam_ls.tail(mi)) : Vec(0);
      const KktResiduals r_new = kkt_residuals(p, z, le, li, opt);
      const KktResiduals r_old =
          kkt_residuals(p, z, sol.eq_multipliers, sol.ineq_multipliers, opt);
      if (r_new.stationarity < r_old.stationarity) {
        sol.eq_multipliers = le;
        sol.ineq_multipliers = li;
      }
    }
  }

  return finish(final_status);
}

// Linear program  min c'x  s.t.  A x = b  (, x >= 0).  Reuses the augmented
// Lagrangian machinery; the polish phases make the result exact to rounding.
inline NlpSolution solve_lp(const Vec& costs, const Mat& eq_matrix, const Vec& eq_rhs,
                            bool nonneg, const SolverOptions& opt = {}) {
  const int n = static_cast<int>(costs.size());
  if (eq_matrix.cols() != n) throw DimensionMismatch("solve_lp: matrix columns");
  if (eq_matrix.rows() != eq_rhs.size()) throw DimensionMismatch("solve_lp: rhs size");
  NlpProblem p;
  p.dim = n;
  p.linear = true;
  p.objective = [costs](const Vec& x) { return costs.dot(x); };
  p.gradient = [costs](const Vec&) { return costs; };
  p.m_eq = static_cast<int>(eq_matrix.rows());
  p.eq = [&eq_matrix, &eq_rhs](const Vec& x) { return Vec(eq_matrix * x - eq_rhs); };
  p.eq_jac = [&eq_matrix](const Vec&) { return eq_matrix; };
  if (nonneg) {
    p.lower = Vec::Zero(n);
    p.upper = Vec::Constant(n, kInf);
  }
  const Vec x0 = nonneg ? Vec::Constant(n, 1.0 / n) : Vec::Zero(n);
  return solve(p, x0, opt);
}

// Derivative audit: analytic gradient and Jacobians against central
// differences. rel = |a - fd| / max(1, |a|, |fd|).
struct GradientIssue {
  std::string block;  // "objective", "eq", "ineq"
  int row = 0, col = 0;
  double analytic = 0.0, fd = 0.0, rel_error = 0.0;
};

struct GradientReport {
  double max_rel_error = 0.0;
  double objective_max = 0.0, eq_max = 0.0, ineq_max = 0.0;
  std::vector<GradientIssue> issues;  // entries above the tolerance
  bool ok = true;
};

inline GradientReport check_gradients(const NlpProblem& p, const Vec& z, double tol) {
  SolverOptions opt;  // analytic mode: we want the provided callbacks
  detail::Evaluator ev(p, opt);
  GradientReport rep;
  auto rel = [](double a, double b) {
    return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
  };
  auto record = [&](const std::string& block, int r, int c, double a, double fd, double& blk_max) {
    const double e = rel(a, fd);
    blk_max = std::max(blk_max, e);
    rep.max_rel_error = std::max(rep.max_rel_error, e);
    if (e > tol) rep.issues.push_back({block, r, c, a, fd, e});
  };

  Vec zp = z;
  if (p.gradient) {
    const Vec g = ev.grad(z);
    for (int i = 0; i < p.dim; ++i) {
      const double h = 6e-6 * (1.0 + std::abs(z[i]));
      zp[i] = z[i] + h;
      const double fp = ev.f(zp);
      zp[i] = z[i] - h;
      const double fm = ev.f(zp);
      zp[i] = z[i];
      record("objective", 0, i, g[i], (fp - fm) / (2.0 * h), rep.objective_max);
    }
  }
  if (p.m_eq && p.eq_jac) {
    const Mat J = ev.eq_jac(z);
    for (int i = 0; i < p.dim; ++i) {
      const double h = 6e-6 * (1.0 + std::abs(z[i]));
      zp[i] = z[i] + h;
      const Vec cp = ev.eq(zp);
      zp[i] = z[i] - h;
      const Vec cm = ev.eq(zp);
      zp[i] = z[i];
      for (int r = 0; r < p.m_eq; ++r)
        record("eq", r, i, J(r, i), (cp[r] - cm[r]) / (2.0 * h), rep.eq_max);
    }
  }
  if (p.m_ineq && p.ineq_jac) {
    const Mat J = ev.ineq_jac(z);
    for (int i = 0; i < p.dim; ++i) {
      const double h = 6e-6 * (1.0 + std::abs(z[i]));
      zp[i] = z[i] + h;
      const Vec cp = ev.ineq(zp);
      zp[i] = z[i] - h;
      const Vec cm = ev.ineq(zp);
      zp[i] = z[i];
      for (int r = 0; r < p.m_ineq; ++r)
        record("ineq", r, i, J(r, i), (cp[r] - cm[r]) / (2.0 * h), rep.ineq_max);
    }
  }
  rep.ok = rep.max_rel_error <= tol;
  return rep;
}

}  // namespace lmpc::nlp
