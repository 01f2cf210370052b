#pragma once

#include <Eigen/Dense>

#include <charconv>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "hpgee2/alr.hpp"
#include "hpgee2/error.hpp"
#include "hpgee2/hpgee2.hpp"
#include "hpgee2/parallel.hpp"
#include "hpgee2/penalty.hpp"
#include "hpgee2/scores.hpp"

namespace hpgee2 {

inline constexpr double kPseudoInverseTolerance = 1e-10;
inline constexpr double kBicTieTolerance = 1e-8;

struct QuadraticForm {
  double value = 0.0;
  bool rank_deficient = false;
  bool degenerate = false;
};

// (sum U_i)' (sum U_i U_i')^+ (sum U_i), eigenvalues below
// 1e-10 * largest eigenvalue treated as zero.
inline QuadraticForm score_quadratic_form(const std::vector<VectorXd>& per_cluster, Index dim) {
  QuadraticForm qf;
  if (dim == 0) return qf;
  VectorXd total = VectorXd::Zero(dim);
  MatrixXd outer = MatrixXd::Zero(dim, dim);
  for (const auto& u : per_cluster) {
    total += u;
    outer.noalias() += u * u.transpose();
  }
  if (outer.cwiseAbs().maxCoeff() == 0.0) {
    qf.degenerate = true;
    return qf;
  }
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(outer);
  const VectorXd& ev = es.eigenvalues();
  const double cutoff = kPseudoInverseTolerance * ev.cwiseAbs().maxCoeff();
  const VectorXd proj = es.eigenvectors().transpose() * total;
  for (Index k = 0; k < dim; ++k) {
    if (ev(k) > cutoff)
      qf.value += proj(k) * proj(k) / ev(k);
    else
      qf.rank_deficient = true;
  }
  qf.value = std::max(qf.value, 0.0);
  return qf;
}

struct BicBreakdown {
  double total = 0.0;
  double mean_form = 0.0;
  double assoc_form = 0.0;
  double complexity = 0.0;
  Index nonzeros = 0;
  bool rank_deficient = false;
  bool degenerate = false;
};

namespace detail {

inline void add_form(BicBreakdown& b, const QuadraticForm& qf, double& slot) {
  slot = qf.value;
  b.rank_deficient = b.rank_deficient || qf.rank_deficient;
  b.degenerate = b.degenerate || qf.degenerate;
}

inline void finish(BicBreakdown& b, Index nonzeros, Index n) {
  b.nonzeros = nonzeros;
  b.complexity = std::log(static_cast<double>(n)) * static_cast<double>(nonzeros);
  b.total = b.mean_form + b.assoc_form + b.complexity;
}

}  // namespace detail

// Mean scores at (beta_hat, alpha_A).
inline BicBreakdown bic_mean(const Dataset& data, const FitResult& fit) {
  BicBreakdown b;
  const auto s = mean_score(data, {fit.params.beta, fit.alr.params.alpha});
  detail::add_form(b, score_quadratic_form(s.per_cluster, data.p()), b.mean_form);
  detail::finish(b, static_cast<Index>(nonzero_indices(fit.params.beta).size()),
                 data.num_clusters());
  return b;
}

// Association scores at (beta_A, alpha_hat).
inline BicBreakdown bic_assoc(const Dataset& data, const FitResult& fit) {
  BicBreakdown b;
  const auto s = assoc_score(data, {fit.alr.params.beta, fit.params.alpha},
                             fit.alr.assoc_derivative);
  detail::add_form(b, score_quadratic_form(s.per_cluster, data.q()), b.assoc_form);
  detail::finish(b, static_cast<Index>(nonzero_indices(fit.params.alpha).size()),
                 data.num_clusters());
  return b;
}

// Mean form at (beta_hat, alpha_A), association form at (beta_hat, alpha_hat).
inline BicBreakdown bic_joint(const Dataset& data, const FitResult& fit) {
  BicBreakdown b;
  const auto sm = mean_score(data, {fit.params.beta, fit.alr.params.alpha});
  const auto sa = assoc_score(data, fit.params, fit.alr.assoc_derivative);
  detail::add_form(b, score_quadratic_form(sm.per_cluster, data.p()), b.mean_form);
  detail::add_form(b, score_quadratic_form(sa.per_cluster, data.q()), b.assoc_form);
  detail::finish(b,
                 static_cast<Index>(nonzero_indices(fit.params.beta).size() +
                                    nonzero_indices(fit.params.alpha).size()),
                 data.num_clusters());
  return b;
}

inline BicBreakdown bic_for(Analysis mode, const Dataset& data, const FitResult& fit) {
  switch (mode) {
    case Analysis::mean_only: return bic_mean(data, fit);
    case Analysis::assoc_only: return bic_assoc(data, fit);
    case Analysis::joint: return bic_joint(data, fit);
  }
  return bic_joint(data, fit);
}

struct GridSpec {
  double lo = 1e-3;
  double hi = 1.0;
  int n = 30;
  std::vector<double> explicit_values;

  static GridSpec single(double lambda) { return GridSpec{lambda, lambda, 1, {lambda}}; }
  static GridSpec list(std::vector<double> v) { return GridSpec{0, 0, 0, std::move(v)}; }

  // "LO:HI:N"; log-spaced when LO > 0, linear otherwise.
  static GridSpec parse(std::string_view s) {
    GridSpec g;
    const auto c1 = s.find(':');
    const auto c2 = c1 == std::string_view::npos ? c1 : s.find(':', c1 + 1);
    auto bad = [&] {
      return ConfigError("tuning-inference", "parse_grid",
                         "expected LO:HI:N, got '" + std::string(s) + "'");
    };
    if (c2 == std::string_view::npos) throw bad();
    auto num = [&](std::string_view t, auto& out) {
      const auto r = std::from_chars(t.data(), t.data() + t.size(), out);
      if (r.ec != std::errc() || r.ptr != t.data() + t.size()) throw bad();
    };
    num(s.substr(0, c1), g.lo);
    num(s.substr(c1 + 1, c2 - c1 - 1), g.hi);
    num(s.substr(c2 + 1), g.n);
    g.validate();
    return g;
  }

  void validate() const {
    if (!explicit_values.empty()) {
      for (double v : explicit_values)
        if (!(v >= 0.0) || !std::isfinite(v))
          throw ConfigError("tuning-inference", "grid", "grid values must be finite and >= 0");
      return;
    }
    if (n < 1 || !(lo >= 0.0) || !(hi >= lo) || !std::isfinite(hi))
      throw ConfigError("tuning-inference", "grid", "grid needs 0 <= LO <= HI and N >= 1");
  }

  std::vector<double> values() const {
    validate();
    if (!explicit_values.empty()) return explicit_values;
    std::vector<double> v(static_cast<std::size_t>(n));
    if (n == 1) {
      v[0] = lo;
      return v;
    }
    for (int i = 0; i < n; ++i) {
      const double t = static_cast<double>(i) / (n - 1);
      v[static_cast<std::size_t>(i)] =
          lo > 0.0 ? std::exp(std::log(lo) + t * (std::log(hi) - std::log(lo)))
                   : lo + t * (hi - lo);
    }
    v.back() = hi;
    return v;
  }
};

struct TuningOptions {
  SolverOptions solver;
  AlrOptions alr;
  double scad_a = 3.7;
  int threads = 1;
};

// Penalty for one block with the intercept (column 0) excluded when present.
inline PenaltyConfig block_penalty(PenaltyKind kind, double lambda, double a, bool intercept) {
  PenaltyConfig cfg;
  cfg.kind = kind;
  cfg.lambda = kind == PenaltyKind::none ? 0.0 : lambda;
  cfg.a = a;
  if (intercept) cfg.exclude.insert(0);
  return cfg;
}

struct PenaltyPair {
  PenaltyConfig mean;
  PenaltyConfig assoc;
};

// Shared lambda in joint mode; the unselected block is unpenalized otherwise.
inline PenaltyPair penalties_for(const Dataset& data, Analysis mode, PenaltyKind kind,
                                 double lambda, double a = 3.7) {
  const PenaltyKind mk = mode == Analysis::assoc_only ? PenaltyKind::none : kind;
  const PenaltyKind ak = mode == Analysis::mean_only ? PenaltyKind::none : kind;
  return {block_penalty(mk, lambda, a, data.mean_intercept),
          block_penalty(ak, lambda, a, data.assoc_intercept)};
}

struct TuningReport {
  Analysis mode = Analysis::joint;
  PenaltyKind kind = PenaltyKind::none;
  std::vector<double> grid;
  std::vector<double> bic_values;  // NaN where the fit failed
  std::vector<std::optional<FitResult>> fits;
  std::vector<std::string> failures;  // empty where the fit succeeded
  Index chosen_index = -1;
  double chosen_lambda = std::numeric_limits<double>::quiet_NaN();

  const FitResult& chosen_fit() const { return *fits[static_cast<std::size_t>(chosen_index)]; }
};

inline TuningReport grid_search(const Dataset& data, const AnalysisMode& mode, PenaltyKind kind,
                                const GridSpec& grid, const TuningOptions& opts = {},
                                const AlrFit* precomputed = nullptr) {
  TuningReport rep;
  rep.mode = mode.mode;
  rep.kind = kind;
  rep.grid = grid.values();
  if (rep.grid.empty())
    throw ConfigError("tuning-inference", "grid_search", "empty lambda grid");

  const AlrFit alr = precomputed ? *precomputed : fit_alr(data, opts.alr);
  const std::size_t g = rep.grid.size();
  rep.bic_values.assign(g, std::numeric_limits<double>::quiet_NaN());
  rep.fits.assign(g, std::nullopt);
  rep.failures.assign(g, std::string());

  parallel_for(g, opts.threads, [&](std::size_t i) {
    try {
      const auto pen = penalties_for(data, mode.mode, kind, rep.grid[i], opts.scad_a);
      FitResult fit = fit_hpgee2(data, mode, pen.mean, pen.assoc, opts.solver, &alr, opts.alr);
      rep.bic_values[i] = bic_for(mode.mode, data, fit).total;
      rep.fits[i] = std::move(fit);
    } catch (const Error& e) {
      rep.failures[i] = e.what();
    }
  });

  for (std::size_t i = 0; i < g; ++i) {
    if (!rep.fits[i]) continue;
    if (rep.chosen_index < 0) {
      rep.chosen_index = static_cast<Index>(i);
      continue;
    }
    const auto c = static_cast<std::size_t>(rep.chosen_index);
    // Fits on a plateau agree only to solver tolerance, so near-equal values tie.
    const double slack = kBicTieTolerance * std::max(1.0, std::abs(rep.bic_values[c]));
    const bool tie = std::abs(rep.bic_values[i] - rep.bic_values[c]) <= slack;
    const bool better = tie ? rep.grid[i] > rep.grid[c] : rep.bic_values[i] < rep.bic_values[c];
    if (better) rep.chosen_index = static_cast<Index>(i);
  }
  if (rep.chosen_index < 0)
    throw Error("tuning-inference", "grid_search",
                "every lambda failed; first failure: " + rep.failures.front());
  rep.chosen_lambda = rep.grid[static_cast<std::size_t>(rep.chosen_index)];
  return rep;
}

}  // namespace hpgee2
