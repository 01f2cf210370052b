#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hpgee2/error.hpp"

namespace hpgee2 {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr double kProbabilityClamp = 1e-12;
inline constexpr double kLogOddsRatioClamp = 700.0;
inline constexpr double kIndependenceTolerance = 1e-10;

// Zero-based unit positions (first < second) inside a cluster.
struct UnitPair {
  Index first = 0;
  Index second = 0;
  friend bool operator==(const UnitPair&, const UnitPair&) = default;
};

inline std::vector<UnitPair> lexicographic_pairs(Index n) {
  std::vector<UnitPair> pairs;
  if (n > 1) pairs.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
  for (Index j = 0; j < n; ++j)
    for (Index k = j + 1; k < n; ++k) pairs.push_back({j, k});
  return pairs;
}

// One cluster: binary responses, unit-level mean design (n_i x p) and
// pair-level association design (m_i x q), rows of `z` matching `pairs`.
struct ClusterData {
  std::string id;
  VectorXd y;
  MatrixXd x;
  MatrixXd z;
  std::vector<UnitPair> pairs;

  Index size() const { return y.size(); }
  Index num_pairs() const { return static_cast<Index>(pairs.size()); }
};

struct Dataset {
  std::vector<ClusterData> clusters;
  std::vector<std::string> mean_names;
  std::vector<std::string> assoc_names;
  bool mean_intercept = false;
  bool assoc_intercept = false;

  Index p() const { return static_cast<Index>(mean_names.size()); }
  Index q() const { return static_cast<Index>(assoc_names.size()); }
  Index num_clusters() const { return static_cast<Index>(clusters.size()); }

  Index total_pairs() const {
    Index m = 0;
    for (const auto& c : clusters) m += c.num_pairs();
    return m;
  }

  friend bool operator==(const Dataset& a, const Dataset& b) {
    if (a.mean_names != b.mean_names || a.assoc_names != b.assoc_names ||
        a.mean_intercept != b.mean_intercept || a.assoc_intercept != b.assoc_intercept ||
        a.clusters.size() != b.clusters.size())
      return false;
    for (std::size_t i = 0; i < a.clusters.size(); ++i) {
      const auto& ca = a.clusters[i];
      const auto& cb = b.clusters[i];
      if (ca.id != cb.id || ca.pairs != cb.pairs) return false;
      if (ca.y.size() != cb.y.size() || ca.x.rows() != cb.x.rows() ||
          ca.x.cols() != cb.x.cols() || ca.z.rows() != cb.z.rows() ||
          ca.z.cols() != cb.z.cols())
        return false;
      if (ca.y != cb.y || ca.x != cb.x || ca.z != cb.z) return false;
    }
    return true;
  }
};

inline void validate_cluster(const ClusterData& c, Index p, Index q) {
  auto fail = [&](const std::string& what) {
    throw StructuralError("model-core", "validate", "cluster '" + c.id + "': " + what);
  };
  const Index n = c.size();
  if (n < 1) fail("cluster has no units");
  for (Index j = 0; j < n; ++j)
    if (c.y(j) != 0.0 && c.y(j) != 1.0) fail("response of unit " + std::to_string(j) + " is not 0/1");
  if (c.x.rows() != n || c.x.cols() != p) fail("mean design has wrong shape");
  const Index m = n * (n - 1) / 2;
  if (c.num_pairs() != m) fail("expected " + std::to_string(m) + " pairs");
  if (c.z.rows() != m || c.z.cols() != q) fail("association design has wrong shape");
  if (c.pairs != lexicographic_pairs(n)) fail("pairs are not in lexicographic order");
  if (!c.x.allFinite() || !c.z.allFinite()) fail("non-finite covariate");
}

inline void validate_dataset(const Dataset& d) {
  if (d.clusters.empty())
    throw StructuralError("model-core", "validate", "dataset has no clusters");
  for (const auto& c : d.clusters) validate_cluster(c, d.p(), d.q());
}

struct Params {
  VectorXd beta;
  VectorXd alpha;
};

// Per-cluster moments at one parameter value.
struct MomentBundle {
  VectorXd mu;          // marginal means
  VectorXd phi;         // pairwise odds ratios
  VectorXd nu;          // P(Y_j = 1, Y_k = 1)
  VectorXd zeta;        // P(Y_j = 1 | Y_k = y_k)
  VectorXd resid_mean;  // A = y - mu
  VectorXd resid_pair;  // R = y_j - zeta
  MatrixXd cov;         // B, working covariance of y
  VectorXd s_diag;      // zeta (1 - zeta)
  MatrixXd dmu;         // C = d mu / d beta^T
  MatrixXd dzeta;       // T = d zeta / d alpha^T, offset held fixed
  MatrixXd dzeta_exact; // d zeta / d alpha^T including the offset's dependence on nu(alpha)
  std::size_t clamp_events = 0;
};

// Which derivative of zeta with respect to alpha weights the association
// estimating equations (and their information matrix).
enum class AssocDerivative { exact, offset_fixed };

inline const MatrixXd& assoc_jacobian(const MomentBundle& mb, AssocDerivative form) {
  return form == AssocDerivative::exact ? mb.dzeta_exact : mb.dzeta;
}

namespace detail {

inline double clamp_probability(double p, std::size_t* clamps) {
  if (p < kProbabilityClamp) {
    if (clamps) ++*clamps;
    return kProbabilityClamp;
  }
  if (p > 1.0 - kProbabilityClamp) {
    if (clamps) ++*clamps;
    return 1.0 - kProbabilityClamp;
  }
  return p;
}

// Overflow-safe logistic function.
inline double logistic(double eta) {
  if (eta >= 0.0) return 1.0 / (1.0 + std::exp(-eta));
  const double e = std::exp(eta);
  return e / (1.0 + e);
}

inline double odds_ratio_of(double nu, double mu_j, double mu_k) {
  return nu * (1.0 - mu_j - mu_k + nu) / ((mu_j - nu) * (mu_k - nu));
}

inline std::string describe(double mu_j, double mu_k, double phi) {
  std::ostringstream os;
  os.precision(17);
  os << "(mu_j=" << mu_j << ", mu_k=" << mu_k << ", phi=" << phi << ")";
  return os.str();
}

}  // namespace detail

inline double marginal_mean_from_eta(double eta, std::size_t* clamps = nullptr) {
  return detail::clamp_probability(detail::logistic(eta), clamps);
}

inline double marginal_mean(const VectorXd& x_row, const VectorXd& beta,
                            std::size_t* clamps = nullptr) {
  return marginal_mean_from_eta(x_row.dot(beta), clamps);
}

inline double odds_ratio_from_eta(double eta, std::size_t* clamps = nullptr) {
  if (eta > kLogOddsRatioClamp || eta < -kLogOddsRatioClamp) {
    if (clamps) ++*clamps;
    eta = std::clamp(eta, -kLogOddsRatioClamp, kLogOddsRatioClamp);
  }
  return std::exp(eta);
}

inline double pairwise_odds_ratio(const VectorXd& z_row, const VectorXd& alpha,
                                  std::size_t* clamps = nullptr) {
  return odds_ratio_from_eta(z_row.dot(alpha), clamps);
}

// The joint success probability nu of a 2x2 table with margins (mu_j, mu_k)
// and odds ratio phi. Closed-form root of
//   (phi - 1) nu^2 - [1 + (mu_j + mu_k)(phi - 1)] nu + phi mu_j mu_k = 0
// inside the Frechet bracket, with a bisection fallback.
inline double solve_pair_prob(double mu_j, double mu_k, double phi) {
  if (!(mu_j > 0.0 && mu_j < 1.0 && mu_k > 0.0 && mu_k < 1.0) || !(phi > 0.0) ||
      !std::isfinite(phi))
    throw DomainError("model-core", "solve_pair_prob",
                      "inputs outside domain " + detail::describe(mu_j, mu_k, phi));

  if (std::abs(phi - 1.0) <= kIndependenceTolerance) return mu_j * mu_k;

  const double lo = std::max(0.0, mu_j + mu_k - 1.0);
  const double hi = std::min(mu_j, mu_k);

  const double a = 1.0 + (mu_j + mu_k) * (phi - 1.0);
  const double disc = a * a - 4.0 * phi * (phi - 1.0) * mu_j * mu_k;
  if (disc >= 0.0) {
    const double denom = a + std::sqrt(disc);
    if (denom > 0.0) {
      // Cancellation-free form of (a - sqrt(disc)) / (2 (phi - 1)).
      const double nu = 2.0 * phi * mu_j * mu_k / denom;
      if (nu > lo && nu < hi) {
        const double rebuilt = detail::odds_ratio_of(nu, mu_j, mu_k);
        if (std::abs(rebuilt - phi) <= 1e-8 * phi) return nu;
      }
    }
  }

  // Odds ratio is strictly increasing in nu over the open bracket.
  const double log_phi = std::log(phi);
  double left = lo;
  double right = hi;
  for (int it = 0; it < 400 && right - left > 0.0; ++it) {
    const double mid = 0.5 * (left + right);
    if (mid <= left || mid >= right) break;
    const double v = std::log(mid) + std::log(1.0 - mu_j - mu_k + mid) -
                     std::log(mu_j - mid) - std::log(mu_k - mid);
    if (v < log_phi)
      left = mid;
    else
      right = mid;
  }
  const double nu = 0.5 * (left + right);
  if (!(nu > lo && nu < hi))
    throw DomainError("model-core", "solve_pair_prob",
                      "no feasible root in bracket for " + detail::describe(mu_j, mu_k, phi));
  return nu;
}

// P(Y_j = 1 | Y_k = y_k) under the odds-ratio model with the pair's offset.
inline double conditional_mean_from_eta(double mu_j, double mu_k, double nu,
                                        double log_odds_ratio, double y_k,
                                        std::size_t* clamps = nullptr) {
  const double num = mu_j - nu;
  const double den = 1.0 - mu_j - mu_k + nu;
  if (!(num > 0.0) || !(den > 0.0))
    throw DomainError("model-core", "conditional_mean_zeta",
                      "non-positive offset cell for nu=" + std::to_string(nu) + " " +
                          detail::describe(mu_j, mu_k, std::exp(log_odds_ratio)));
  const double eta = log_odds_ratio * y_k + std::log(num / den);
  return detail::clamp_probability(detail::logistic(eta), clamps);
}

inline double conditional_mean_zeta(double mu_j, double mu_k, double nu, const VectorXd& z_row,
                                    const VectorXd& alpha, double y_k,
                                    std::size_t* clamps = nullptr) {
  double eta = z_row.dot(alpha);
  eta = std::clamp(eta, -kLogOddsRatioClamp, kLogOddsRatioClamp);
  return conditional_mean_from_eta(mu_j, mu_k, nu, eta, y_k, clamps);
}

// d nu / d log(phi) at fixed margins, by implicit differentiation of the
// log odds ratio of the 2x2 table.
inline double pair_prob_log_or_derivative(double mu_j, double mu_k, double nu) {
  const double d00 = 1.0 - mu_j - mu_k + nu;
  return 1.0 / (1.0 / nu + 1.0 / d00 + 1.0 / (mu_j - nu) + 1.0 / (mu_k - nu));
}

inline MomentBundle compute_moments(const ClusterData& cluster, const Params& params) {
  const Index n = cluster.size();
  const Index m = cluster.num_pairs();
  MomentBundle mb;
  std::size_t clamps = 0;

  const VectorXd eta = cluster.x * params.beta;
  mb.mu.resize(n);
  for (Index j = 0; j < n; ++j) mb.mu(j) = marginal_mean_from_eta(eta(j), &clamps);
  mb.resid_mean = cluster.y - mb.mu;

  const VectorXd var = mb.mu.array() * (1.0 - mb.mu.array());
  mb.dmu = var.asDiagonal() * cluster.x;
  mb.cov = var.asDiagonal();

  mb.phi.resize(m);
  mb.nu.resize(m);
  mb.zeta.resize(m);
  mb.resid_pair.resize(m);
  mb.s_diag.resize(m);
  mb.dzeta.resize(m, cluster.z.cols());
  mb.dzeta_exact.resize(m, cluster.z.cols());
  if (m > 0) {
    const VectorXd lor = cluster.z * params.alpha;
    for (Index r = 0; r < m; ++r) {
      const auto [j, k] = cluster.pairs[static_cast<std::size_t>(r)];
      const double eta_r = std::clamp(lor(r), -kLogOddsRatioClamp, kLogOddsRatioClamp);
      if (eta_r != lor(r)) ++clamps;
      const double phi = std::exp(eta_r);
      double nu;
      double zeta;
      try {
        nu = solve_pair_prob(mb.mu(j), mb.mu(k), phi);
        zeta = conditional_mean_from_eta(mb.mu(j), mb.mu(k), nu, eta_r, cluster.y(k), &clamps);
      } catch (const DomainError& e) {
        throw DomainError("model-core", "compute_moments",
                          "cluster '" + cluster.id + "' pair (" + std::to_string(j) + "," +
                              std::to_string(k) + "): " + e.what());
      }
      mb.phi(r) = phi;
      mb.nu(r) = nu;
      mb.zeta(r) = zeta;
      mb.resid_pair(r) = cluster.y(j) - zeta;
      mb.s_diag(r) = zeta * (1.0 - zeta);
      mb.dzeta.row(r) = (mb.s_diag(r) * cluster.y(k)) * cluster.z.row(r);
      const double dnu = eta_r == lor(r) ? pair_prob_log_or_derivative(mb.mu(j), mb.mu(k), nu) : 0.0;
      const double offset_slope =
          (1.0 / (mb.mu(j) - nu) + 1.0 / (1.0 - mb.mu(j) - mb.mu(k) + nu)) * dnu;
      mb.dzeta_exact.row(r) = (mb.s_diag(r) * (cluster.y(k) - offset_slope)) * cluster.z.row(r);
      const double c = nu - mb.mu(j) * mb.mu(k);
      mb.cov(j, k) = c;
      mb.cov(k, j) = c;
    }
  }
  mb.clamp_events = clamps;
  return mb;
}

}  // namespace hpgee2
