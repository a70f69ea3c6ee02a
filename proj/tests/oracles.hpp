// Independent reference implementations used only by the test suite. They
// deliberately avoid the library's own algorithms so that agreement between
// the two is meaningful.
#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

namespace oracles {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Brute-force LP solver for min c'x s.t. A x = b, x >= 0: enumerate every
// basic solution (square subsystem), keep the feasible one with least cost.
inline std::optional<std::pair<Vec, double>> lp_vertex_enumeration(const Vec& c, const Mat& A,
                                                                   const Vec& b) {
  const int n = static_cast<int>(c.size()), m = static_cast<int>(A.rows());
  std::optional<std::pair<Vec, double>> best;
  std::vector<int> idx(m);
  // iterate over all m-subsets of {0..n-1}
  std::vector<int> comb(m);
  for (int i = 0; i < m; ++i) comb[i] = i;
  auto advance = [&]() {
    int i = m - 1;
    while (i >= 0 && comb[i] == n - m + i) --i;
    if (i < 0) return false;
    ++comb[i];
    for (int j = i + 1; j < m; ++j) comb[j] = comb[j - 1] + 1;
    return true;
  };
  if (m == 0 || m > n) return best;
  do {
    Mat Ab(m, m);
    for (int j = 0; j < m; ++j) Ab.col(j) = A.col(comb[j]);
    const Eigen::FullPivLU<Mat> lu(Ab);
    if (!lu.isInvertible()) continue;
    const Vec xb = lu.solve(b);
    if ((Ab * xb - b).cwiseAbs().maxCoeff() > 1e-9) continue;
    if (xb.minCoeff() < -1e-9) continue;
    Vec x = Vec::Zero(n);
    for (int j = 0; j < m; ++j) x[comb[j]] = std::max(0.0, xb[j]);
    const double cost = c.dot(x);
    if (!best || cost < best->second - 1e-12) best = {x, cost};
  } while (advance());
  return best;
}

// Minimum number of steps for the drag-limited double integrator to cover
// `dist` starting and ending at rest, by dynamic programming over the speed
// alone: F[k][v] = max distance coverable in k steps ending at speed v.
// The answer is the smallest T with F[T][0] >= dist. The half-cell slack on
// the speed transition makes the oracle optimistic by at most one step.
inline int di_min_time_dp(double dist, double v_max, double dt, int t_cap = 64) {
  const double h = 1e-3;
  const int nv = static_cast<int>(std::round(v_max / h)) + 1;
  const double neg = -1e18;
  std::vector<double> F(nv, neg), G(nv, neg);
  F[0] = 0.0;
  for (int T = 1; T <= t_cap; ++T) {
    std::fill(G.begin(), G.end(), neg);
    for (int iv = 0; iv < nv; ++iv) {
      if (F[iv] <= neg / 2) continue;
      const double v = iv * h;
      const double reach = (1.0 - v * v / (v_max * v_max)) * dt + 0.5 * h;
      const int lo = std::max(0, static_cast<int>(std::floor((v - reach) / h)));
      const int hi = std::min(nv - 1, static_cast<int>(std::ceil((v + reach) / h)));
      const double gain = F[iv] + v * dt;
      for (int jv = lo; jv <= hi; ++jv) G[jv] = std::max(G[jv], gain);
    }
    std::swap(F, G);
    if (F[0] >= dist - 1e-9) return T;
  }
  return t_cap;
}

}  // namespace oracles
