#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "hpgee2/error.hpp"
#include "hpgee2/model.hpp"
#include "hpgee2/scores.hpp"

namespace hpgee2 {

struct FitDiagnostics {
  int outer_iterations = 0;
  bool converged = false;
  double final_update_norm = std::numeric_limits<double>::infinity();
  std::size_t clamp_events = 0;
  std::size_t condition_warnings = 0;
  std::size_t step_halvings = 0;
  std::size_t cov_repairs = 0;
};

struct AlrOptions {
  double tol = 1e-6;
  int max_outer = 100;
  int max_inner = 100;
  AssocDerivative assoc_derivative = AssocDerivative::exact;
};

struct AlrFit {
  Params params;
  FitDiagnostics diagnostics;
  AssocDerivative assoc_derivative = AssocDerivative::exact;
};

namespace detail {

inline constexpr double kMinSystemRcond = 1e-13;
inline constexpr double kWarnSystemRcond = 1e-8;

inline VectorXd solve_information(const MatrixXd& d, const VectorXd& u, const char* operation,
                                  FitDiagnostics* diag) {
  Eigen::LDLT<MatrixXd> ldlt(d);
  const double rc = ldlt.rcond();
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() || !(rc >= kMinSystemRcond) ||
      (ldlt.vectorD().array() <= 0.0).any())
    throw LinearAlgebraError("alr", operation,
                             "information matrix is singular (rcond=" + std::to_string(rc) + ")");
  if (diag && rc < kWarnSystemRcond) ++diag->condition_warnings;
  return ldlt.solve(u);
}

inline double inf_norm(const VectorXd& v) {
  return v.size() == 0 ? 0.0 : v.cwiseAbs().maxCoeff();
}

// Halve a proposed step while it inflates the score norm more than tenfold.
template <class ScoreAt>
VectorXd safeguarded(const VectorXd& current, const VectorXd& step, double score_norm,
                     ScoreAt&& score_norm_at, FitDiagnostics* diag) {
  VectorXd delta = step;
  for (int halving = 0;; ++halving) {
    double trial;
    try {
      trial = score_norm_at(VectorXd(current + delta));
    } catch (const Error&) {
      trial = std::numeric_limits<double>::infinity();
    }
    if (trial <= 10.0 * score_norm) return current + delta;
    if (halving == 10) break;
    delta *= 0.5;
    if (diag) ++diag->step_halvings;
  }
  throw LinearAlgebraError("alr", "step_halving",
                           "no acceptable step after 10 halvings");
}

// Fisher scoring drops the derivative of the working covariance, and on
// some data the iteration then settles into a two-cycle. Consecutive steps
// pointing in opposite directions halve the step factor.
class Relaxation {
 public:
  double factor() const { return omega_; }

  void observe(const VectorXd& step) {
    if (last_.size() == step.size()) {
      const double scale = step.norm() * last_.norm();
      if (scale > 0.0 && step.dot(last_) < -0.5 * scale) omega_ = std::max(omega_ / 2.0, kMin);
    }
    last_ = step;
  }

 private:
  static constexpr double kMin = 1.0 / 16.0;
  double omega_ = 1.0;
  VectorXd last_;
};

}  // namespace detail

// beta + (sum C'B^-1 C)^-1 sum C'B^-1 A at fixed alpha, the step scaled by
// `relaxation`.
inline VectorXd mean_fisher_step(const Dataset& data, const VectorXd& beta,
                                 const VectorXd& alpha, FitDiagnostics* diag = nullptr,
                                 double relaxation = 1.0) {
  const auto sys = mean_system(data, {beta, alpha});
  if (diag) {
    diag->clamp_events += sys.clamp_events;
    diag->cov_repairs += sys.cov_repairs;
  }
  const VectorXd step =
      relaxation * detail::solve_information(sys.d, sys.u, "mean_fisher_step", diag);
  const double norm0 = detail::inf_norm(sys.u);
  if (norm0 == 0.0) return beta;
  return detail::safeguarded(
      beta, step, norm0,
      [&](const VectorXd& b) { return detail::inf_norm(mean_score(data, {b, alpha}).total); },
      diag);
}

// One Fisher step of the offset logistic regression of y_j on y_k, offsets
// recomputed from (beta, alpha).
inline VectorXd assoc_offset_step(const Dataset& data, const VectorXd& beta,
                                  const VectorXd& alpha, FitDiagnostics* diag = nullptr,
                                  AssocDerivative form = AssocDerivative::exact,
                                  double relaxation = 1.0) {
  if (data.total_pairs() == 0)
    throw StructuralError("alr", "assoc_offset_step", "no pairs: every cluster has one unit");
  const auto sys = assoc_system(data, {beta, alpha}, form);
  if (diag) diag->clamp_events += sys.clamp_events;
  const VectorXd step =
      relaxation * detail::solve_information(sys.d, sys.u, "assoc_offset_step", diag);
  const double norm0 = detail::inf_norm(sys.u);
  if (norm0 == 0.0) return alpha;
  return detail::safeguarded(
      alpha, step, norm0,
      [&](const VectorXd& a) { return detail::inf_norm(assoc_system(data, {beta, a}, form).u); },
      diag);
}

inline AlrFit fit_alr(const Dataset& data, const Params& init, const AlrOptions& opts = {}) {
  if (!(opts.tol > 0.0))
    throw ContractError("alr", "fit_alr", "tolerance must be positive");
  if (init.beta.size() != data.p() || init.alpha.size() != data.q())
    throw ContractError("alr", "fit_alr", "initial parameter dimensions do not match the data");

  AlrFit fit{init, {}, opts.assoc_derivative};
  auto& diag = fit.diagnostics;
  const double inner_tol = opts.tol / 10.0;
  const bool has_assoc = data.q() > 0 && data.total_pairs() > 0;

  for (int outer = 0; outer < opts.max_outer; ++outer) {
    const Params prev = fit.params;

    detail::Relaxation mean_relax;
    for (int it = 0; it < opts.max_inner; ++it) {
      const double w = mean_relax.factor();
      VectorXd next = mean_fisher_step(data, fit.params.beta, fit.params.alpha, &diag, w);
      const VectorXd step = next - fit.params.beta;
      mean_relax.observe(step);
      fit.params.beta = std::move(next);
      if (detail::inf_norm(step) / w <= inner_tol) break;
    }
    if (has_assoc) {
      detail::Relaxation assoc_relax;
      for (int it = 0; it < opts.max_inner; ++it) {
        const double w = assoc_relax.factor();
        VectorXd next = assoc_offset_step(data, fit.params.beta, fit.params.alpha, &diag,
                                          opts.assoc_derivative, w);
        const VectorXd step = next - fit.params.alpha;
        assoc_relax.observe(step);
        fit.params.alpha = std::move(next);
        if (detail::inf_norm(step) / w <= inner_tol) break;
      }
    }

    ++diag.outer_iterations;
    diag.final_update_norm = std::max(detail::inf_norm(fit.params.beta - prev.beta),
                                      detail::inf_norm(fit.params.alpha - prev.alpha));
    if (diag.final_update_norm <= opts.tol) {
      diag.converged = true;
      break;
    }
  }
  return fit;
}

inline AlrFit fit_alr(const Dataset& data, const AlrOptions& opts = {}) {
  return fit_alr(data, {VectorXd::Zero(data.p()), VectorXd::Zero(data.q())}, opts);
}

}  // namespace hpgee2
