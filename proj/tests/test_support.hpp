#pragma once

// Test-side oracles: independent of the library's closed forms.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <random>
#include <string>

#include "hpgee2.hpp"

namespace oracle {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

inline double logistic(double t) { return 1.0 / (1.0 + std::exp(-t)); }

// Joint success probability by plain bisection on the table's odds ratio.
inline double bisect_nu(double mj, double mk, double phi) {
  double lo = std::max(0.0, mj + mk - 1.0);
  double hi = std::min(mj, mk);
  for (int it = 0; it < 2000; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double odds = mid * (1.0 - mj - mk + mid) / ((mj - mid) * (mk - mid));
    if (odds < phi) lo = mid;
    else hi = mid;
  }
  return 0.5 * (lo + hi);
}

inline double odds_ratio(double nu, double mj, double mk) {
  return nu * (1.0 - mj - mk + nu) / ((mj - nu) * (mk - nu));
}

// Central difference Jacobian of f at x.
inline MatrixXd jacobian(const std::function<VectorXd(const VectorXd&)>& f, const VectorXd& x,
                         double h) {
  const VectorXd f0 = f(x);
  MatrixXd j(f0.size(), x.size());
  for (Index l = 0; l < x.size(); ++l) {
    VectorXd xp = x, xm = x;
    xp(l) += h;
    xm(l) -= h;
    j.col(l) = (f(xp) - f(xm)) / (2.0 * h);
  }
  return j;
}

inline double lasso_wls_objective(const VectorXd& th, const VectorXd& b, const MatrixXd& d,
                                  const VectorXd& t) {
  return 0.5 * th.dot(d * th) - th.dot(b) + (t.array() * th.array().abs()).sum();
}

// Dense grid search on [-r, r]^k followed by successive zoom around the best point.
inline VectorXd brute_minimize(const VectorXd& b, const MatrixXd& d, const VectorXd& t, double r) {
  const Index k = b.size();
  VectorXd center = VectorXd::Zero(k);
  double half = r;
  const int pts = k == 1 ? 2001 : k == 2 ? 201 : 41;
  VectorXd best = center;
  double best_val = lasso_wls_objective(best, b, d, t);
  for (int level = 0; level < 8; ++level) {
    const VectorXd base = best;
    std::vector<int> idx(static_cast<std::size_t>(k), 0);
    while (true) {
      VectorXd th(k);
      for (Index l = 0; l < k; ++l)
        th(l) = base(l) - half + 2.0 * half * idx[static_cast<std::size_t>(l)] / (pts - 1);
      const double v = lasso_wls_objective(th, b, d, t);
      if (v < best_val) {
        best_val = v;
        best = th;
      }
      Index l = 0;
      while (l < k && ++idx[static_cast<std::size_t>(l)] == pts) idx[static_cast<std::size_t>(l++)] = 0;
      if (l == k) break;
    }
    // Keep exact zeros reachable: the grid may miss them.
    for (Index l = 0; l < k; ++l) {
      VectorXd th = best;
      th(l) = 0.0;
      const double v = lasso_wls_objective(th, b, d, t);
      if (v < best_val) {
        best_val = v;
        best = th;
      }
    }
    half *= 4.0 / (pts - 1);
  }
  return best;
}

// Small random dataset with dense covariates; every cluster size in [lo, hi].
inline hpgee2::Dataset random_dataset(std::mt19937_64& rng, int n_clusters, int lo, int hi,
                                      int p, int q, double scale = 0.5) {
  std::normal_distribution<double> nrm(0.0, scale);
  std::uniform_int_distribution<int> size(lo, hi);
  std::bernoulli_distribution coin(0.5);
  hpgee2::Dataset d;
  for (int l = 0; l < p; ++l) d.mean_names.push_back("x" + std::to_string(l));
  for (int l = 0; l < q; ++l) d.assoc_names.push_back("z" + std::to_string(l));
  for (int i = 0; i < n_clusters; ++i) {
    hpgee2::ClusterData c;
    c.id = std::to_string(i + 1);
    const int n = size(rng);
    c.y.resize(n);
    c.x.resize(n, p);
    for (int j = 0; j < n; ++j) {
      c.y(j) = coin(rng) ? 1.0 : 0.0;
      for (int l = 0; l < p; ++l) c.x(j, l) = nrm(rng);
    }
    c.pairs = hpgee2::lexicographic_pairs(n);
    c.z.resize(static_cast<Index>(c.pairs.size()), q);
    for (Index r = 0; r < c.z.rows(); ++r)
      for (int l = 0; l < q; ++l) c.z(r, l) = nrm(rng);
    d.clusters.push_back(std::move(c));
  }
  return d;
}

inline VectorXd random_vector(std::mt19937_64& rng, Index n, double scale) {
  std::normal_distribution<double> nrm(0.0, scale);
  VectorXd v(n);
  for (Index l = 0; l < n; ++l) v(l) = nrm(rng);
  return v;
}

// One cluster with a single pair and scalar designs.
inline hpgee2::ClusterData pair_cluster(double y0, double y1, double x0 = 1.0, double x1 = 1.0,
                                        double z = 1.0) {
  hpgee2::ClusterData c;
  c.id = "a";
  c.y = VectorXd(2);
  c.y << y0, y1;
  c.x = MatrixXd(2, 1);
  c.x << x0, x1;
  c.z = MatrixXd::Constant(1, 1, z);
  c.pairs = hpgee2::lexicographic_pairs(2);
  return c;
}

inline hpgee2::Dataset wrap(std::vector<hpgee2::ClusterData> cs, Index p, Index q) {
  hpgee2::Dataset d;
  for (Index l = 0; l < p; ++l) d.mean_names.push_back("x" + std::to_string(l));
  for (Index l = 0; l < q; ++l) d.assoc_names.push_back("z" + std::to_string(l));
  d.clusters = std::move(cs);
  return d;
}

inline double rel_err(const MatrixXd& a, const MatrixXd& b) {
  const double scale = std::max(1.0, b.cwiseAbs().maxCoeff());
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

}  // namespace oracle
