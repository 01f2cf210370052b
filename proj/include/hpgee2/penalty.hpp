#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <set>
#include <string>
#include <string_view>

#include "hpgee2/error.hpp"

namespace hpgee2 {

enum class PenaltyKind { none, lasso, scad };

inline std::string_view to_string(PenaltyKind k) {
  switch (k) {
    case PenaltyKind::none: return "none";
    case PenaltyKind::lasso: return "lasso";
    case PenaltyKind::scad: return "scad";
  }
  return "none";
}

inline PenaltyKind parse_penalty_kind(std::string_view s) {
  if (s == "none") return PenaltyKind::none;
  if (s == "lasso") return PenaltyKind::lasso;
  if (s == "scad") return PenaltyKind::scad;
  throw ConfigError("penalty", "parse", "unknown penalty '" + std::string(s) + "'");
}

struct PenaltyConfig {
  PenaltyKind kind = PenaltyKind::none;
  double lambda = 0.0;
  double a = 3.7;
  std::set<Eigen::Index> exclude;  // never penalized (intercepts)

  void validate() const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda))
      throw ConfigError("penalty", "validate", "lambda must be finite and nonnegative");
    if (kind == PenaltyKind::scad && !(a > 2.0))
      throw ConfigError("penalty", "validate", "SCAD requires a > 2");
  }

  bool penalizes(Eigen::Index l) const {
    return kind != PenaltyKind::none && !exclude.contains(l);
  }
};

// p'_lambda(theta) for theta >= 0.
inline double penalty_derivative(double theta, const PenaltyConfig& cfg) {
  if (theta < 0.0)
    throw ContractError("penalty", "penalty_derivative", "theta must be nonnegative");
  const double lam = cfg.lambda;
  switch (cfg.kind) {
    case PenaltyKind::none:
      return 0.0;
    case PenaltyKind::lasso:
      return lam;
    case PenaltyKind::scad: {
      if (lam == 0.0) return 0.0;
      if (theta <= lam) return lam;
      const double hinge = std::max(cfg.a * lam - theta, 0.0);
      return lam * hinge / ((cfg.a - 1.0) * lam);
    }
  }
  return 0.0;
}

// sign(z) (|z| - t)_+, with the closed dead zone |z| <= t mapped to +0.
inline double soft_threshold(double z, double t) {
  if (z > t) return z - t;
  if (z < -t) return z + t;
  return 0.0;
}

// Local quadratic approximation weight p'(|theta|) / |theta|.
inline double lqa_weight(double theta_hat, const PenaltyConfig& cfg) {
  if (theta_hat == 0.0)
    throw ContractError("penalty", "lqa_weight",
                        "weight undefined at zero; restrict to the active set");
  const double t = std::abs(theta_hat);
  return penalty_derivative(t, cfg) / t;
}

// One-step LLA thresholds n * p'(|theta_l|); excluded coordinates get 0.
inline Eigen::VectorXd lla_thresholds(const Eigen::VectorXd& theta, const PenaltyConfig& cfg,
                                      double n) {
  Eigen::VectorXd t = Eigen::VectorXd::Zero(theta.size());
  for (Eigen::Index l = 0; l < theta.size(); ++l)
    if (cfg.penalizes(l)) t(l) = n * penalty_derivative(std::abs(theta(l)), cfg);
  return t;
}

}  // namespace hpgee2
