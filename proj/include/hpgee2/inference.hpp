#pragma once

#include <Eigen/Dense>

#include <limits>
#include <string>
#include <vector>

#include "hpgee2/error.hpp"
#include "hpgee2/hpgee2.hpp"
#include "hpgee2/penalty.hpp"
#include "hpgee2/scores.hpp"

namespace hpgee2 {

// Covariance of the active estimates, ordered as mean_indices then assoc_indices.
struct SandwichResult {
  std::vector<Index> mean_indices;
  std::vector<Index> assoc_indices;
  MatrixXd covariance;
  double bracket_rcond = 0.0;

  // Full-length standard-error vectors; inactive coordinates are NaN.
  VectorXd se_beta(Index p) const { return expand(p, mean_indices, 0); }
  VectorXd se_alpha(Index q) const {
    return expand(q, assoc_indices, static_cast<Index>(mean_indices.size()));
  }

 private:
  VectorXd expand(Index dim, const std::vector<Index>& idx, Index offset) const {
    VectorXd se = VectorXd::Constant(dim, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const Index r = offset + static_cast<Index>(k);
      se(idx[k]) = std::sqrt(std::max(covariance(r, r), 0.0));
    }
    return se;
  }
};

namespace detail {

inline double penalty_weight(double theta, Index l, const PenaltyConfig& cfg) {
  if (!cfg.penalizes(l)) return 0.0;
  return lqa_weight(theta, cfg);
}

}  // namespace detail

// Sandwich covariance of the penalized estimator restricted to its active set.
// With per-cluster averages Hbar = H/n and Vbar = V/n, the bracket is
//   [[Hbar_ss + Sigma1, 0], [Hbar_vs, Hbar_vv + Sigma2]]
// and the returned matrix is Bhat Vbar Bhat' / n.
inline SandwichResult sandwich_covariance(const Dataset& data, const FitResult& fit,
                                          double fd_step_scale = 1.0) {
  SandwichResult out;
  out.mean_indices = nonzero_indices(fit.params.beta);
  out.assoc_indices = nonzero_indices(fit.params.alpha);
  const Index s = static_cast<Index>(out.mean_indices.size());
  const Index v = static_cast<Index>(out.assoc_indices.size());
  const Index k = s + v;
  if (k == 0)
    throw ContractError("tuning-inference", "sandwich_covariance", "empty active set");

  const double n = static_cast<double>(data.num_clusters());
  const HessianBlocks hb = hessian_blocks(data, fit.params, fd_step_scale, fit.alr.assoc_derivative);
  const Index p = data.p();

  std::vector<Index> joint(out.mean_indices);
  for (Index a : out.assoc_indices) joint.push_back(p + a);

  MatrixXd bracket = MatrixXd::Zero(k, k);
  for (Index r = 0; r < s; ++r) {
    const Index lr = out.mean_indices[static_cast<std::size_t>(r)];
    for (Index c = 0; c < s; ++c)
      bracket(r, c) = hb.h_bb(lr, out.mean_indices[static_cast<std::size_t>(c)]) / n;
    bracket(r, r) += detail::penalty_weight(fit.params.beta(lr), lr, fit.cfg_mean);
  }
  for (Index r = 0; r < v; ++r) {
    const Index ar = out.assoc_indices[static_cast<std::size_t>(r)];
    for (Index c = 0; c < s; ++c)
      bracket(s + r, c) = hb.h_ab(ar, out.mean_indices[static_cast<std::size_t>(c)]) / n;
    for (Index c = 0; c < v; ++c)
      bracket(s + r, s + c) = hb.h_aa(ar, out.assoc_indices[static_cast<std::size_t>(c)]) / n;
    bracket(s + r, s + r) += detail::penalty_weight(fit.params.alpha(ar), ar, fit.cfg_assoc);
  }

  MatrixXd vbar(k, k);
  for (Index r = 0; r < k; ++r)
    for (Index c = 0; c < k; ++c)
      vbar(r, c) = hb.v(joint[static_cast<std::size_t>(r)], joint[static_cast<std::size_t>(c)]) / n;

  Eigen::PartialPivLU<MatrixXd> lu(bracket);
  out.bracket_rcond = lu.rcond();
  if (!(out.bracket_rcond * kMaxCondition >= 1.0))
    throw LinearAlgebraError("tuning-inference", "sandwich_covariance",
                             "bracket matrix is singular (rcond=" +
                                 std::to_string(out.bracket_rcond) + ")");
  const MatrixXd binv = lu.inverse();
  const MatrixXd cov = binv * vbar * binv.transpose() / n;
  out.covariance = 0.5 * (cov + cov.transpose());
  return out;
}

}  // namespace hpgee2
