#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "hpgee2/error.hpp"
#include "hpgee2/model.hpp"

namespace hpgee2 {

inline constexpr double kMaxCondition = 1e12;
// Smallest eigenvalue allowed in the working correlation matrix.
inline constexpr double kWorkingCorrFloor = 0.1;

struct ScoreTerms {
  VectorXd total;
  std::vector<VectorXd> per_cluster;
};

struct ScorePair {
  VectorXd u_beta;
  VectorXd u_alpha;
  std::vector<VectorXd> per_cluster_beta;
  std::vector<VectorXd> per_cluster_alpha;
};

// Score plus its information matrix, summed over clusters.
struct LinearSystem {
  VectorXd u;
  MatrixXd d;
  std::size_t clamp_events = 0;
  std::size_t cov_repairs = 0;
};

struct HessianBlocks {
  MatrixXd h_bb;  // sum C' B^-1 C
  MatrixXd h_ab;  // sum T' S^-1 F
  MatrixXd h_aa;  // sum T' S^-1 T
  MatrixXd v;     // sum of stacked score outer products
};

namespace detail {

struct WorkingCovFactor {
  Eigen::LLT<MatrixXd> llt;
  bool repaired = false;
};

// Each 2x2 block of B is a valid table, but the n_i x n_i matrix can still be
// indefinite or nearly so. The eigenvalues of the working correlation
// D^-1/2 B D^-1/2 are floored at kWorkingCorrFloor; at parameters near the
// truth of typical designs this never binds.
inline WorkingCovFactor factor_working_cov(const MatrixXd& cov, const std::string& cluster_id,
                                           const char* operation) {
  WorkingCovFactor out;
  auto& llt = out.llt;
  const VectorXd var = cov.diagonal();
  if (cov.rows() > 1 && cov.allFinite() && var.minCoeff() > 0.0) {
    const VectorXd s = var.cwiseSqrt();
    const MatrixXd corr = s.cwiseInverse().asDiagonal() * cov * s.cwiseInverse().asDiagonal();
    // Gershgorin: lambda_min >= 1 - largest off-diagonal row sum.
    const double radius = (corr.cwiseAbs().rowwise().sum().array() - 1.0).maxCoeff();
    Eigen::SelfAdjointEigenSolver<MatrixXd> es;
    if (1.0 - radius < kWorkingCorrFloor) es.compute(corr);
    if (1.0 - radius < kWorkingCorrFloor && es.info() == Eigen::Success &&
        es.eigenvalues().minCoeff() < kWorkingCorrFloor) {
      const VectorXd ev = es.eigenvalues().cwiseMax(kWorkingCorrFloor);
      const MatrixXd fixed = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
      llt.compute(s.asDiagonal() * fixed * s.asDiagonal());
      out.repaired = true;
    }
  }
  if (!out.repaired) llt.compute(cov);
  if (llt.info() != Eigen::Success)
    throw LinearAlgebraError("scores", operation,
                             "working covariance of cluster '" + cluster_id +
                                 "' is not positive definite");
  const double rcond = llt.rcond();
  if (!(rcond * kMaxCondition >= 1.0))
    throw LinearAlgebraError("scores", operation,
                             "working covariance of cluster '" + cluster_id +
                                 "' has condition number above 1e12 (rcond=" +
                                 std::to_string(rcond) + ")");
  return out;
}

struct ClusterMeanTerms {
  VectorXd u;  // C' B^-1 A
  MatrixXd d;  // C' B^-1 C
  bool repaired = false;
};

inline ClusterMeanTerms mean_terms(const ClusterData& c, const MomentBundle& mb,
                                   const char* operation) {
  const auto f = factor_working_cov(mb.cov, c.id, operation);
  const MatrixXd binv_c = f.llt.solve(mb.dmu);
  return {binv_c.transpose() * mb.resid_mean, mb.dmu.transpose() * binv_c, f.repaired};
}

// T' S^-1 R; S is diagonal.
inline VectorXd assoc_cluster_score(const MomentBundle& mb, AssocDerivative form) {
  const MatrixXd& t = assoc_jacobian(mb, form);
  if (t.rows() == 0) return VectorXd::Zero(t.cols());
  const VectorXd w = mb.resid_pair.array() / mb.s_diag.array();
  return t.transpose() * w;
}

inline MatrixXd assoc_cluster_info(const MomentBundle& mb, AssocDerivative form) {
  const MatrixXd& t = assoc_jacobian(mb, form);
  if (t.rows() == 0) return MatrixXd::Zero(t.cols(), t.cols());
  const VectorXd w = mb.s_diag.cwiseInverse();
  return t.transpose() * w.asDiagonal() * t;
}

}  // namespace detail

inline ScoreTerms mean_score(const Dataset& data, const Params& params) {
  ScoreTerms out{VectorXd::Zero(data.p()), {}};
  out.per_cluster.reserve(data.clusters.size());
  for (const auto& c : data.clusters) {
    const auto mb = compute_moments(c, params);
    auto t = detail::mean_terms(c, mb, "mean_score");
    out.total += t.u;
    out.per_cluster.push_back(std::move(t.u));
  }
  return out;
}

inline ScoreTerms assoc_score(const Dataset& data, const Params& params,
                              AssocDerivative form = AssocDerivative::exact) {
  ScoreTerms out{VectorXd::Zero(data.q()), {}};
  out.per_cluster.reserve(data.clusters.size());
  for (const auto& c : data.clusters) {
    const auto mb = compute_moments(c, params);
    VectorXd u = detail::assoc_cluster_score(mb, form);
    out.total += u;
    out.per_cluster.push_back(std::move(u));
  }
  return out;
}

inline ScorePair score_pair(const Dataset& data, const Params& params,
                            AssocDerivative form = AssocDerivative::exact) {
  ScorePair sp{VectorXd::Zero(data.p()), VectorXd::Zero(data.q()), {}, {}};
  sp.per_cluster_beta.reserve(data.clusters.size());
  sp.per_cluster_alpha.reserve(data.clusters.size());
  for (const auto& c : data.clusters) {
    const auto mb = compute_moments(c, params);
    auto t = detail::mean_terms(c, mb, "score_pair");
    VectorXd ua = detail::assoc_cluster_score(mb, form);
    sp.u_beta += t.u;
    sp.u_alpha += ua;
    sp.per_cluster_beta.push_back(std::move(t.u));
    sp.per_cluster_alpha.push_back(std::move(ua));
  }
  return sp;
}

// (u, D) = (sum C'B^-1 A, sum C'B^-1 C).
inline LinearSystem mean_system(const Dataset& data, const Params& params) {
  LinearSystem s{VectorXd::Zero(data.p()), MatrixXd::Zero(data.p(), data.p()), 0};
  for (const auto& c : data.clusters) {
    const auto mb = compute_moments(c, params);
    const auto t = detail::mean_terms(c, mb, "mean_system");
    s.u += t.u;
    s.d += t.d;
    s.clamp_events += mb.clamp_events;
    s.cov_repairs += t.repaired ? 1 : 0;
  }
  return s;
}

// (u*, D*) = (sum T'S^-1 R, sum T'S^-1 T).
inline LinearSystem assoc_system(const Dataset& data, const Params& params,
                                 AssocDerivative form = AssocDerivative::exact) {
  LinearSystem s{VectorXd::Zero(data.q()), MatrixXd::Zero(data.q(), data.q()), 0};
  for (const auto& c : data.clusters) {
    if (c.num_pairs() == 0) continue;
    const auto mb = compute_moments(c, params);
    s.u += detail::assoc_cluster_score(mb, form);
    s.d += detail::assoc_cluster_info(mb, form);
    s.clamp_events += mb.clamp_events;
  }
  return s;
}

// Central finite-difference d zeta / d beta^T (m_i x p); nu is recomputed
// at every perturbed point so the derivative flows through mu and nu.
inline MatrixXd cross_jacobian_F(const ClusterData& c, const Params& params,
                                 double step_scale = 1.0) {
  const Index m = c.num_pairs();
  const Index p = params.beta.size();
  MatrixXd f(m, p);
  if (m == 0) return f;
  for (Index l = 0; l < p; ++l) {
    double h = std::max(1e-6, 1e-6 * std::abs(params.beta(l))) * step_scale;
    for (int attempt = 0;; ++attempt) {
      try {
        Params plus = params;
        Params minus = params;
        plus.beta(l) += h;
        minus.beta(l) -= h;
        const VectorXd zp = compute_moments(c, plus).zeta;
        const VectorXd zm = compute_moments(c, minus).zeta;
        f.col(l) = (zp - zm) / (2.0 * h);
        break;
      } catch (const DomainError& e) {
        if (attempt > 0)
          throw DomainError("scores", "cross_jacobian_F",
                            "cluster '" + c.id + "' coordinate " + std::to_string(l) +
                                ": perturbation left the feasible region: " + e.what());
        h /= 10.0;
      }
    }
  }
  return f;
}

inline HessianBlocks hessian_blocks(const Dataset& data, const Params& params,
                                    double fd_step_scale = 1.0,
                                    AssocDerivative form = AssocDerivative::exact) {
  const Index p = data.p();
  const Index q = data.q();
  HessianBlocks hb{MatrixXd::Zero(p, p), MatrixXd::Zero(q, p), MatrixXd::Zero(q, q),
                   MatrixXd::Zero(p + q, p + q)};
  VectorXd stacked(p + q);
  for (const auto& c : data.clusters) {
    const auto mb = compute_moments(c, params);
    const auto t = detail::mean_terms(c, mb, "hessian_blocks");
    hb.h_bb += t.d;
    stacked.head(p) = t.u;
    stacked.tail(q) = detail::assoc_cluster_score(mb, form);
    if (c.num_pairs() > 0) {
      const MatrixXd f = cross_jacobian_F(c, params, fd_step_scale);
      const VectorXd sinv = mb.s_diag.cwiseInverse();
      hb.h_ab += assoc_jacobian(mb, form).transpose() * sinv.asDiagonal() * f;
      hb.h_aa += detail::assoc_cluster_info(mb, form);
    }
    hb.v.noalias() += stacked * stacked.transpose();
  }
  return hb;
}

}  // namespace hpgee2
