#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "hpgee2/alr.hpp"
#include "hpgee2/error.hpp"
#include "hpgee2/model.hpp"
#include "hpgee2/penalty.hpp"
#include "hpgee2/scores.hpp"

namespace hpgee2 {

// Which coefficients are selected: the mean model, the association model, or both.
enum class Analysis { mean_only, assoc_only, joint };

inline std::string_view to_string(Analysis a) {
  switch (a) {
    case Analysis::mean_only: return "mean";
    case Analysis::assoc_only: return "assoc";
    case Analysis::joint: return "joint";
  }
  return "joint";
}

inline Analysis parse_analysis(std::string_view s) {
  if (s == "mean") return Analysis::mean_only;
  if (s == "assoc") return Analysis::assoc_only;
  if (s == "joint") return Analysis::joint;
  throw ConfigError("hpgee2", "parse", "unknown analysis mode '" + std::string(s) + "'");
}

// "beta[mean_index] == 0 implies alpha[i] == 0 for every i in assoc_indices".
struct HierarchyLink {
  Index mean_index = 0;
  std::vector<Index> assoc_indices;
};

struct AnalysisMode {
  Analysis mode = Analysis::joint;
  std::vector<HierarchyLink> constraint_map;

  void validate(Index p, Index q) const {
    if (!constraint_map.empty() && mode != Analysis::joint)
      throw ConfigError("hpgee2", "validate", "hierarchy constraints require joint mode");
    for (const auto& link : constraint_map) {
      if (link.mean_index < 0 || link.mean_index >= p)
        throw ConfigError("hpgee2", "validate",
                          "constraint mean index " + std::to_string(link.mean_index) +
                              " out of range");
      for (Index a : link.assoc_indices)
        if (a < 0 || a >= q)
          throw ConfigError("hpgee2", "validate",
                            "constraint association index " + std::to_string(a) +
                                " out of range");
    }
  }
};

struct SolverOptions {
  double tol = 1e-6;
  double inner_tol = 1e-8;
  int max_outer = 100;
  int max_sweeps = 1000;
};

struct StageResult {
  VectorXd estimate;
  std::vector<Index> active_set;
  std::vector<Index> frozen;  // held at zero by hierarchy constraints
  int inner_sweeps = 0;
  int outer_iterations = 0;
  bool converged = false;
  std::vector<double> objective_trace;
};

struct ConstraintEvent {
  Index mean_index = 0;
  Index assoc_index = 0;
};

struct FitResult {
  Analysis mode = Analysis::joint;
  PenaltyConfig cfg_mean;
  PenaltyConfig cfg_assoc;
  Params params;
  AlrFit alr;
  std::optional<StageResult> mean_stage;
  std::optional<StageResult> assoc_stage;
  std::vector<Index> mean_active;
  std::vector<Index> assoc_active;
  std::vector<ConstraintEvent> constraint_log;
  Index n_clusters = 0;
  bool converged = false;
};

// Thrown when a later stage fails; carries everything computed before it.
class FitError : public Error {
 public:
  FitError(const Error& cause, FitResult partial)
      : Error("hpgee2", "fit_hpgee2", cause.what()),
        partial_(std::make_shared<FitResult>(std::move(partial))) {}
  const FitResult& partial() const { return *partial_; }

 private:
  std::shared_ptr<FitResult> partial_;
};

inline std::vector<Index> nonzero_indices(const VectorXd& v) {
  std::vector<Index> idx;
  for (Index l = 0; l < v.size(); ++l)
    if (v(l) != 0.0) idx.push_back(l);
  return idx;
}

// Stacked working regression Z = C beta_t + A with block weights B^-1.
struct WorkingResponse {
  VectorXd z;
  MatrixXd c;
  std::vector<MatrixXd> b_inv;
  VectorXd u;
  MatrixXd d;
};

inline WorkingResponse working_response(const Dataset& data, const VectorXd& beta_t,
                                        const VectorXd& alpha_fixed) {
  Index total = 0;
  for (const auto& c : data.clusters) total += c.size();
  WorkingResponse wr{VectorXd(total), MatrixXd(total, data.p()), {},
                     VectorXd::Zero(data.p()), MatrixXd::Zero(data.p(), data.p())};
  wr.b_inv.reserve(data.clusters.size());
  const Params at{beta_t, alpha_fixed};
  Index row = 0;
  for (const auto& c : data.clusters) {
    const auto mb = compute_moments(c, at);
    const auto llt = detail::factor_working_cov(mb.cov, c.id, "working_response").llt;
    const Index n = c.size();
    wr.c.middleRows(row, n) = mb.dmu;
    wr.z.segment(row, n) = mb.dmu * beta_t + mb.resid_mean;
    MatrixXd binv = llt.solve(MatrixXd::Identity(n, n));
    wr.u += mb.dmu.transpose() * binv * mb.resid_mean;
    wr.d += mb.dmu.transpose() * binv * mb.dmu;
    wr.b_inv.push_back(std::move(binv));
    row += n;
  }
  return wr;
}

struct CdSolution {
  VectorXd theta;
  int sweeps = 0;
  bool converged = false;
};

// Cyclic coordinate descent for
//   1/2 theta' D theta - theta' (u + D expansion) + sum_l thresholds_l |theta_l|,
// the weighted least-squares objective of the working regression expanded at
// `expansion`. An infinite threshold pins its coordinate at zero.
inline CdSolution cd_penalized_wls(const VectorXd& u, const MatrixXd& d, const VectorXd& expansion,
                                   const VectorXd& start, const VectorXd& thresholds, double tol,
                                   int max_sweeps) {
  const Index k = u.size();
  if (d.rows() != k || d.cols() != k || expansion.size() != k || start.size() != k ||
      thresholds.size() != k)
    throw ContractError("hpgee2", "cd_penalized_wls", "dimension mismatch");
  for (Index l = 0; l < k; ++l)
    if (!(d(l, l) > 0.0))
      throw LinearAlgebraError("hpgee2", "cd_penalized_wls",
                               "non-positive diagonal at coordinate " + std::to_string(l));

  const VectorXd b = u + d * expansion;
  CdSolution sol{start, 0, false};
  VectorXd& theta = sol.theta;
  for (Index l = 0; l < k; ++l)
    if (std::isinf(thresholds(l))) theta(l) = 0.0;
  VectorXd dtheta = d * theta;

  while (sol.sweeps < max_sweeps) {
    ++sol.sweeps;
    double max_change = 0.0;
    for (Index l = 0; l < k; ++l) {
      const double partial = b(l) - (dtheta(l) - d(l, l) * theta(l));
      const double next = soft_threshold(partial, thresholds(l)) / d(l, l);
      const double delta = next - theta(l);
      if (delta != 0.0) {
        dtheta += delta * d.col(l);
        theta(l) = next;
        max_change = std::max(max_change, std::abs(delta));
      }
    }
    if (max_change <= tol) {
      sol.converged = true;
      break;
    }
  }
  return sol;
}

namespace detail {

inline double lla_objective(const VectorXd& theta, const VectorXd& u, const MatrixXd& d,
                            const VectorXd& expansion, const VectorXd& thresholds) {
  double pen = 0.0;
  for (Index l = 0; l < theta.size(); ++l)
    if (theta(l) != 0.0) pen += thresholds(l) * std::abs(theta(l));
  return 0.5 * theta.dot(d * theta) - theta.dot(u + d * expansion) + pen;
}

// Outer penalized Fisher scoring with one-step LLA thresholds and an inner
// coordinate-descent solve; `system_at` returns (u, D) at the current iterate.
template <class SystemAt>
StageResult run_penalized_stage(const VectorXd& init, const PenaltyConfig& cfg,
                                const std::vector<Index>& frozen, double n,
                                const SolverOptions& opts, SystemAt&& system_at) {
  cfg.validate();
  StageResult res;
  res.frozen = frozen;
  VectorXd theta = init;
  for (Index f : frozen) theta(f) = 0.0;
  Relaxation relax;

  for (int outer = 0; outer < opts.max_outer; ++outer) {
    const LinearSystem sys = system_at(theta);
    VectorXd thresholds = lla_thresholds(theta, cfg, n);
    for (Index f : frozen) thresholds(f) = std::numeric_limits<double>::infinity();
    const CdSolution cd =
        cd_penalized_wls(sys.u, sys.d, theta, theta, thresholds, opts.inner_tol, opts.max_sweeps);
    res.inner_sweeps += cd.sweeps;
    ++res.outer_iterations;
    res.objective_trace.push_back(lla_objective(cd.theta, sys.u, sys.d, theta, thresholds));
    const double change = inf_norm(cd.theta - theta);
    // Relaxed move toward the CD solution; its exact zeros are kept.
    const double w = relax.factor();
    VectorXd next = cd.theta;
    for (Index l = 0; l < theta.size(); ++l)
      if (next(l) != 0.0) next(l) = theta(l) + w * (cd.theta(l) - theta(l));
    relax.observe(next - theta);
    theta = std::move(next);
    if (change <= opts.tol) {
      res.converged = true;
      break;
    }
  }
  res.estimate = theta;
  res.active_set = nonzero_indices(theta);
  return res;
}

}  // namespace detail

// Selection of mean coefficients with alpha frozen at the initial (ALR) value.
inline StageResult penalized_mean_stage(const Dataset& data, const Params& init,
                                        const PenaltyConfig& cfg, const SolverOptions& opts = {}) {
  const double n = static_cast<double>(data.num_clusters());
  return detail::run_penalized_stage(init.beta, cfg, {}, n, opts, [&](const VectorXd& beta) {
    return mean_system(data, {beta, init.alpha});
  });
}

inline std::vector<ConstraintEvent> constrained_assoc_indices(
    const VectorXd& beta_hat, const std::vector<HierarchyLink>& constraints) {
  std::vector<ConstraintEvent> events;
  for (const auto& link : constraints) {
    if (beta_hat(link.mean_index) != 0.0) continue;
    for (Index a : link.assoc_indices) events.push_back({link.mean_index, a});
  }
  return events;
}

// Selection of association coefficients given the stage-one mean estimate;
// offsets are recomputed from (beta_hat, alpha_t) at every outer iteration.
inline StageResult penalized_assoc_stage(const Dataset& data, const VectorXd& beta_hat,
                                         const VectorXd& alpha_init, const PenaltyConfig& cfg,
                                         const std::vector<HierarchyLink>& constraints = {},
                                         const SolverOptions& opts = {},
                                         AssocDerivative form = AssocDerivative::exact) {
  if (data.total_pairs() == 0)
    throw StructuralError("hpgee2", "penalized_assoc_stage", "no pairs in dataset");
  std::set<Index> frozen_set;
  for (const auto& ev : constrained_assoc_indices(beta_hat, constraints))
    frozen_set.insert(ev.assoc_index);
  const std::vector<Index> frozen(frozen_set.begin(), frozen_set.end());
  const double n = static_cast<double>(data.num_clusters());
  return detail::run_penalized_stage(alpha_init, cfg, frozen, n, opts,
                                     [&](const VectorXd& alpha) {
                                       return assoc_system(data, {beta_hat, alpha}, form);
                                     });
}

inline FitResult fit_hpgee2(const Dataset& data, const AnalysisMode& mode,
                            const PenaltyConfig& cfg_mean, const PenaltyConfig& cfg_assoc,
                            const SolverOptions& opts = {}, const AlrFit* precomputed = nullptr,
                            const AlrOptions& alr_opts = {}) {
  mode.validate(data.p(), data.q());
  cfg_mean.validate();
  cfg_assoc.validate();
  if (mode.mode == Analysis::mean_only && cfg_assoc.kind != PenaltyKind::none)
    throw ConfigError("hpgee2", "fit_hpgee2", "mean-only analysis needs association penalty none");
  if (mode.mode == Analysis::assoc_only && cfg_mean.kind != PenaltyKind::none)
    throw ConfigError("hpgee2", "fit_hpgee2", "association-only analysis needs mean penalty none");

  FitResult fit;
  fit.mode = mode.mode;
  fit.cfg_mean = cfg_mean;
  fit.cfg_assoc = cfg_assoc;
  fit.n_clusters = data.num_clusters();
  fit.alr = precomputed ? *precomputed : fit_alr(data, alr_opts);
  fit.params = fit.alr.params;
  fit.converged = fit.alr.diagnostics.converged;

  if (mode.mode != Analysis::assoc_only) {
    try {
      fit.mean_stage = penalized_mean_stage(data, fit.alr.params, cfg_mean, opts);
    } catch (const Error& e) {
      throw FitError(e, std::move(fit));
    }
    fit.params.beta = fit.mean_stage->estimate;
    fit.converged = fit.converged && fit.mean_stage->converged;
  }

  if (mode.mode != Analysis::mean_only && data.q() > 0 && data.total_pairs() > 0) {
    fit.constraint_log = constrained_assoc_indices(fit.params.beta, mode.constraint_map);
    try {
      fit.assoc_stage = penalized_assoc_stage(data, fit.params.beta, fit.alr.params.alpha,
                                              cfg_assoc, mode.constraint_map, opts,
                                              fit.alr.assoc_derivative);
    } catch (const Error& e) {
      fit.mean_active = nonzero_indices(fit.params.beta);
      fit.assoc_active = nonzero_indices(fit.params.alpha);
      throw FitError(e, std::move(fit));
    }
    fit.params.alpha = fit.assoc_stage->estimate;
    fit.converged = fit.converged && fit.assoc_stage->converged;
  }

  fit.mean_active = nonzero_indices(fit.params.beta);
  fit.assoc_active = nonzero_indices(fit.params.alpha);
  return fit;
}

}  // namespace hpgee2
