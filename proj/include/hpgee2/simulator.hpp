#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "hpgee2/alr.hpp"
#include "hpgee2/error.hpp"
#include "hpgee2/hpgee2.hpp"
#include "hpgee2/model.hpp"
#include "hpgee2/parallel.hpp"
#include "hpgee2/penalty.hpp"
#include "hpgee2/tuning.hpp"

namespace hpgee2 {

// Multivariate normal law with covariance sigma^2 rho^|i-j|.
struct BlockLaw {
  int dim = 5;
  double mean = 0.0;
  double sigma = 1.0;
  double rho = 0.5;
};

struct StudyConfig {
  int n_clusters = 200;
  int cluster_size = 5;
  VectorXd beta_true;
  VectorXd alpha_true;
  BlockLaw x{5, 0.5, 1.0, 0.5};
  BlockLaw z{5, -0.2, 1.0, 0.5};
  BlockLaw w{5, 0.5, 1.0, 0.5};
  BlockLaw v{5, -0.2, 1.0, 0.5};
  std::vector<PenaltyKind> penalties{PenaltyKind::lasso, PenaltyKind::scad};
  Analysis mode = Analysis::mean_only;
  GridSpec grid;
  int replicates = 100;
  std::uint64_t seed = 20120901;
  SolverOptions solver;
  AlrOptions alr;
  double scad_a = 3.7;
  int threads = 1;

  StudyConfig() {
    beta_true.resize(11);
    beta_true << -1.6, 3.0, 0.0, 0.0, 1.5, 0.0, 0.0, 0.0, -1.5, 0.0, 0.0;
    alpha_true.resize(11);
    alpha_true << 0.693, 0.3, -0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0;
  }

  void validate() const {
    auto fail = [](const std::string& what) {
      throw ConfigError("simulator", "validate", what);
    };
    if (n_clusters < 1) fail("n_clusters must be >= 1");
    if (cluster_size < 1 || cluster_size > 20) fail("cluster_size must lie in [1, 20]");
    if (mode != Analysis::mean_only && cluster_size < 2)
      fail("association studies need cluster_size >= 2");
    if (replicates < 1) fail("replicates must be >= 1");
    if (beta_true.size() != 1 + x.dim + z.dim) fail("beta_true must have 1 + dx + dz entries");
    if (alpha_true.size() != 1 + w.dim + v.dim) fail("alpha_true must have 1 + dw + dv entries");
    for (const BlockLaw* b : {&x, &z, &w, &v}) {
      if (b->dim < 0) fail("negative block dimension");
      if (!(b->sigma > 0.0) || !(b->rho > -1.0 && b->rho < 1.0))
        fail("block covariance must have sigma > 0 and |rho| < 1");
    }
  }
};

// Named sub-streams derived from the master seed.
enum class Stream : std::uint64_t { covariates = 1, responses = 2 };

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::mt19937_64 make_stream(std::uint64_t master, std::uint64_t replicate, Stream s) {
  const std::uint64_t seed =
      splitmix64(splitmix64(splitmix64(master) ^ replicate) ^ static_cast<std::uint64_t>(s));
  return std::mt19937_64(seed);
}

struct CovariateDraw {
  MatrixXd x;  // n_i x dx
  MatrixXd z;  // n_i x dz
  MatrixXd w;  // m_i x dw
  MatrixXd v;  // m_i x dv
};

namespace detail {

inline MatrixXd block_cholesky(const BlockLaw& law) {
  MatrixXd sigma(law.dim, law.dim);
  for (int i = 0; i < law.dim; ++i)
    for (int j = 0; j < law.dim; ++j)
      sigma(i, j) = law.sigma * law.sigma * std::pow(law.rho, std::abs(i - j));
  Eigen::LLT<MatrixXd> llt(sigma);
  if (llt.info() != Eigen::Success)
    throw ConfigError("simulator", "gen_covariates", "block covariance is not positive definite");
  return llt.matrixL();
}

inline MatrixXd draw_block(const BlockLaw& law, const MatrixXd& chol, Index rows,
                           std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  MatrixXd out(rows, law.dim);
  VectorXd e(law.dim);
  for (Index r = 0; r < rows; ++r) {
    for (int c = 0; c < law.dim; ++c) e(c) = normal(rng);
    out.row(r) = (chol * e).transpose().array() + law.mean;
  }
  return out;
}

}  // namespace detail

inline CovariateDraw gen_covariates(const StudyConfig& cfg, std::mt19937_64& rng) {
  const Index n = cfg.cluster_size;
  const Index m = n * (n - 1) / 2;
  CovariateDraw d;
  d.x = detail::draw_block(cfg.x, detail::block_cholesky(cfg.x), n, rng);
  d.z = detail::draw_block(cfg.z, detail::block_cholesky(cfg.z), n, rng);
  d.w = detail::draw_block(cfg.w, detail::block_cholesky(cfg.w), m, rng);
  d.v = detail::draw_block(cfg.v, detail::block_cholesky(cfg.v), m, rng);
  return d;
}

// Pearson correlation of a binary pair from its margins and joint success probability.
inline double rho_from_pair(double mu_j, double mu_k, double nu) {
  if (!(mu_j > 0.0 && mu_j < 1.0 && mu_k > 0.0 && mu_k < 1.0))
    throw DomainError("simulator", "rho_from_pair", "margins must lie in (0,1)");
  return (nu - mu_j * mu_k) / std::sqrt(mu_j * (1.0 - mu_j) * mu_k * (1.0 - mu_k));
}

// Probability table over 2^n outcomes; bit j of the index is y_j.
struct BahadurTable {
  VectorXd raw;
  VectorXd probs;  // raw clipped at zero and renormalized
  double raw_sum = 0.0;
  double clipped_mass = 0.0;
};

inline BahadurTable bahadur_pmf(const VectorXd& mu, const VectorXd& rho) {
  const Index n = mu.size();
  if (n < 1 || n > 20)
    throw ContractError("simulator", "bahadur_pmf", "cluster size must lie in [1, 20]");
  if (rho.size() != n * (n - 1) / 2)
    throw ContractError("simulator", "bahadur_pmf", "rho must hold one entry per pair");
  for (Index j = 0; j < n; ++j)
    if (!(mu(j) > 0.0 && mu(j) < 1.0))
      throw DomainError("simulator", "bahadur_pmf", "means must lie in (0,1)");

  const auto pairs = lexicographic_pairs(n);
  VectorXd r1(n), r0(n);
  for (Index j = 0; j < n; ++j) {
    const double sd = std::sqrt(mu(j) * (1.0 - mu(j)));
    r1(j) = (1.0 - mu(j)) / sd;
    r0(j) = -mu(j) / sd;
  }

  const Index cells = Index{1} << n;
  BahadurTable t;
  t.raw.resize(cells);
  VectorXd r(n);
  for (Index cell = 0; cell < cells; ++cell) {
    double base = 1.0;
    for (Index j = 0; j < n; ++j) {
      const bool one = (cell >> j) & 1;
      base *= one ? mu(j) : 1.0 - mu(j);
      r(j) = one ? r1(j) : r0(j);
    }
    double corr = 1.0;
    for (std::size_t k = 0; k < pairs.size(); ++k)
      corr += rho(static_cast<Index>(k)) * r(pairs[k].first) * r(pairs[k].second);
    t.raw(cell) = base * corr;
  }
  t.raw_sum = t.raw.sum();
  t.probs = t.raw.cwiseMax(0.0);
  t.clipped_mass = t.probs.sum() - t.raw_sum;
  t.probs /= t.probs.sum();
  return t;
}

struct SampledCluster {
  ClusterData cluster;
  double clipped_mass = 0.0;
};

inline std::vector<std::string> design_names(char prefix_a, int da, char prefix_b, int db) {
  std::vector<std::string> names{"(Intercept)"};
  for (int i = 1; i <= da; ++i) names.push_back(std::string(1, prefix_a) + std::to_string(i));
  for (int i = 1; i <= db; ++i) names.push_back(std::string(1, prefix_b) + std::to_string(i));
  return names;
}

// Draws one response vector from the clipped table at the given covariates.
inline SampledCluster sample_cluster(const StudyConfig& cfg, const CovariateDraw& cov,
                                     std::mt19937_64& rng, std::string id = "1") {
  const Index n = cov.x.rows();
  const Index m = n * (n - 1) / 2;
  SampledCluster out;
  ClusterData& c = out.cluster;
  c.id = std::move(id);
  c.x.resize(n, 1 + cov.x.cols() + cov.z.cols());
  c.x << VectorXd::Ones(n), cov.x, cov.z;
  c.z.resize(m, 1 + cov.w.cols() + cov.v.cols());
  c.z << VectorXd::Ones(m), cov.w, cov.v;
  c.pairs = lexicographic_pairs(n);

  VectorXd mu(n);
  for (Index j = 0; j < n; ++j) mu(j) = marginal_mean_from_eta(c.x.row(j).dot(cfg.beta_true));
  VectorXd rho(m);
  for (Index r = 0; r < m; ++r) {
    const auto [j, k] = c.pairs[static_cast<std::size_t>(r)];
    const double phi = odds_ratio_from_eta(c.z.row(r).dot(cfg.alpha_true));
    rho(r) = rho_from_pair(mu(j), mu(k), solve_pair_prob(mu(j), mu(k), phi));
  }
  const BahadurTable t = bahadur_pmf(mu, rho);
  out.clipped_mass = t.clipped_mass;

  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double u = unif(rng);
  Index cell = t.probs.size() - 1;
  double cum = 0.0;
  for (Index i = 0; i < t.probs.size(); ++i) {
    cum += t.probs(i);
    if (u < cum) {
      cell = i;
      break;
    }
  }
  while (t.probs(cell) == 0.0 && cell > 0) --cell;
  c.y.resize(n);
  for (Index j = 0; j < n; ++j) c.y(j) = ((cell >> j) & 1) ? 1.0 : 0.0;
  return out;
}

struct SimulatedData {
  Dataset data;
  double mean_clipped_mass = 0.0;
  Index heavy_clip_clusters = 0;  // clusters with clipped mass above 10%
};

inline SimulatedData simulate_dataset(const StudyConfig& cfg, std::uint64_t replicate = 0) {
  cfg.validate();
  auto cov_rng = make_stream(cfg.seed, replicate, Stream::covariates);
  auto resp_rng = make_stream(cfg.seed, replicate, Stream::responses);
  SimulatedData sim;
  sim.data.mean_names = design_names('x', cfg.x.dim, 'z', cfg.z.dim);
  sim.data.assoc_names = design_names('w', cfg.w.dim, 'v', cfg.v.dim);
  sim.data.mean_intercept = true;
  sim.data.assoc_intercept = true;
  sim.data.clusters.reserve(static_cast<std::size_t>(cfg.n_clusters));
  double clipped = 0.0;
  for (int i = 0; i < cfg.n_clusters; ++i) {
    const CovariateDraw draw = gen_covariates(cfg, cov_rng);
    SampledCluster s = sample_cluster(cfg, draw, resp_rng, std::to_string(i + 1));
    clipped += s.clipped_mass;
    if (s.clipped_mass > 0.10) ++sim.heavy_clip_clusters;
    sim.data.clusters.push_back(std::move(s.cluster));
  }
  sim.mean_clipped_mass = clipped / cfg.n_clusters;
  return sim;
}

struct ReplicateRecord {
  int replicate = 0;
  bool ok = false;
  std::string error;
  int ps = 0;
  int fd = 0;
  double lambda = 0.0;
  VectorXd beta;
  VectorXd alpha;
};

struct SelectionMetrics {
  PenaltyKind kind = PenaltyKind::none;
  Analysis mode = Analysis::mean_only;
  int n_clusters = 0;
  int failures = 0;
  double ps_mean = 0.0;
  double ps_sd = 0.0;
  double fd_mean = 0.0;
  double fd_sd = 0.0;
  double lambda_mean = 0.0;
  double lambda_sd = 0.0;
  std::vector<ReplicateRecord> records;
};

struct StudyResult {
  std::vector<SelectionMetrics> metrics;  // one per penalty kind, config order
  double mean_clipped_mass = 0.0;
  Index heavy_clip_clusters = 0;
};

// Positive selections and false discoveries against the true coefficients,
// counted over the blocks the analysis mode selects.
inline std::pair<int, int> selection_counts(Analysis mode, const StudyConfig& cfg,
                                            const VectorXd& beta, const VectorXd& alpha) {
  int ps = 0;
  int fd = 0;
  auto count = [&](const VectorXd& truth, const VectorXd& est) {
    for (Index l = 0; l < truth.size(); ++l) {
      if (est(l) == 0.0) continue;
      if (truth(l) != 0.0)
        ++ps;
      else
        ++fd;
    }
  };
  if (mode != Analysis::assoc_only) count(cfg.beta_true, beta);
  if (mode != Analysis::mean_only) count(cfg.alpha_true, alpha);
  return {ps, fd};
}

namespace detail {

inline std::pair<double, double> mean_sd(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  if (v.size() < 2) return {m, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

}  // namespace detail

inline StudyResult replicate_study(const StudyConfig& cfg) {
  cfg.validate();
  const std::size_t reps = static_cast<std::size_t>(cfg.replicates);
  const std::size_t kinds = cfg.penalties.size();
  std::vector<std::vector<ReplicateRecord>> slots(kinds, std::vector<ReplicateRecord>(reps));
  std::vector<double> clipped(reps, 0.0);
  std::vector<Index> heavy(reps, 0);

  TuningOptions topts;
  topts.solver = cfg.solver;
  topts.alr = cfg.alr;
  topts.scad_a = cfg.scad_a;
  topts.threads = 1;
  const AnalysisMode mode{cfg.mode, {}};

  parallel_for(reps, cfg.threads, [&](std::size_t r) {
    const SimulatedData sim = simulate_dataset(cfg, r);
    clipped[r] = sim.mean_clipped_mass;
    heavy[r] = sim.heavy_clip_clusters;
    std::optional<AlrFit> alr;
    std::string alr_error;
    try {
      alr = fit_alr(sim.data, cfg.alr);
    } catch (const Error& e) {
      alr_error = e.what();
    }
    for (std::size_t k = 0; k < kinds; ++k) {
      ReplicateRecord& rec = slots[k][r];
      rec.replicate = static_cast<int>(r);
      if (!alr) {
        rec.error = alr_error;
        continue;
      }
      try {
        const TuningReport rep =
            grid_search(sim.data, mode, cfg.penalties[k], cfg.grid, topts, &*alr);
        const FitResult& fit = rep.chosen_fit();
        std::tie(rec.ps, rec.fd) =
            selection_counts(cfg.mode, cfg, fit.params.beta, fit.params.alpha);
        rec.lambda = rep.chosen_lambda;
        rec.beta = fit.params.beta;
        rec.alpha = fit.params.alpha;
        rec.ok = true;
      } catch (const Error& e) {
        rec.error = e.what();
      }
    }
  });

  StudyResult res;
  for (std::size_t r = 0; r < reps; ++r) {
    res.mean_clipped_mass += clipped[r] / static_cast<double>(reps);
    res.heavy_clip_clusters += heavy[r];
  }
  for (std::size_t k = 0; k < kinds; ++k) {
    SelectionMetrics sm;
    sm.kind = cfg.penalties[k];
    sm.mode = cfg.mode;
    sm.n_clusters = cfg.n_clusters;
    std::vector<double> ps, fd, lam;
    for (const auto& rec : slots[k]) {
      if (!rec.ok) {
        ++sm.failures;
        continue;
      }
      ps.push_back(rec.ps);
      fd.push_back(rec.fd);
      lam.push_back(rec.lambda);
    }
    if (10 * sm.failures > cfg.replicates)
      throw Error("simulator", "replicate_study",
                  std::to_string(sm.failures) + " of " + std::to_string(cfg.replicates) +
                      " replicates failed for penalty " + std::string(to_string(sm.kind)));
    std::tie(sm.ps_mean, sm.ps_sd) = detail::mean_sd(ps);
    std::tie(sm.fd_mean, sm.fd_sd) = detail::mean_sd(fd);
    std::tie(sm.lambda_mean, sm.lambda_sd) = detail::mean_sd(lam);
    sm.records = std::move(slots[k]);
    res.metrics.push_back(std::move(sm));
  }
  return res;
}

}  // namespace hpgee2
