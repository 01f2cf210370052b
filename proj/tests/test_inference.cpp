#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "test_support.hpp"

using namespace hpgee2;

namespace {

// Independent units (clusters of size one), no association model.
Dataset singletons(std::mt19937_64& rng, int n, Index p) {
  std::normal_distribution<double> nrm(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<ClusterData> cs;
  for (int i = 0; i < n; ++i) {
    ClusterData c;
    c.id = std::to_string(i);
    c.x = MatrixXd::Ones(1, p);
    for (Index l = 1; l < p; ++l) c.x(0, l) = nrm(rng);
    const double eta = 0.3 + (p > 1 ? 0.8 * c.x(0, 1) : 0.0);
    c.y = VectorXd::Constant(1, unif(rng) < oracle::logistic(eta) ? 1.0 : 0.0);
    c.z = MatrixXd(0, 0);
    cs.push_back(std::move(c));
  }
  auto d = oracle::wrap(std::move(cs), p, 0);
  d.mean_intercept = true;
  return d;
}

FitResult unpenalized(const Dataset& d, Analysis mode = Analysis::mean_only) {
  const auto pen = penalties_for(d, mode, PenaltyKind::none, 0.0);
  AlrOptions ao;
  ao.tol = 1e-12;
  SolverOptions so;
  so.tol = 1e-12;
  return fit_hpgee2(d, {mode, {}}, pen.mean, pen.assoc, so, nullptr, ao);
}

// Logistic-regression sandwich with dense algebra: A^-1 M A^-1.
MatrixXd logistic_sandwich(const Dataset& d, const VectorXd& beta, const VectorXd& extra_diag) {
  const Index p = d.p();
  MatrixXd a = MatrixXd::Zero(p, p), m = MatrixXd::Zero(p, p);
  for (const auto& c : d.clusters) {
    const VectorXd x = c.x.row(0).transpose();
    const double mu = oracle::logistic(x.dot(beta));
    a += mu * (1 - mu) * x * x.transpose();
    const double r = c.y(0) - mu;
    m += r * r * x * x.transpose();
  }
  const double n = static_cast<double>(d.num_clusters());
  a += n * extra_diag.asDiagonal().toDenseMatrix();
  const MatrixXd ai = a.inverse();
  return ai * m * ai;
}

}  // namespace

TEST(Sandwich, InterceptOnlyBinomialClosedForm) {
  std::mt19937_64 rng(1);
  const auto d = singletons(rng, 80, 1);
  const auto fit = unpenalized(d);
  const double ybar = [&] {
    double s = 0;
    for (const auto& c : d.clusters) s += c.y(0);
    return s / d.num_clusters();
  }();
  EXPECT_NEAR(fit.params.beta(0), std::log(ybar / (1 - ybar)), 1e-10);
  const auto sw = sandwich_covariance(d, fit);
  const double se = 1.0 / std::sqrt(80.0 * ybar * (1 - ybar));
  EXPECT_NEAR(sw.se_beta(1)(0), se, 1e-8);
}

TEST(Sandwich, IndependentUnitsMatchDenseLogisticSandwich) {
  std::mt19937_64 rng(2);
  for (int rep = 0; rep < 5; ++rep) {
    const auto d = singletons(rng, 150, 3);
    const auto fit = unpenalized(d);
    const auto sw = sandwich_covariance(d, fit);
    const MatrixXd ref = logistic_sandwich(d, fit.params.beta, VectorXd::Zero(3));
    EXPECT_LE((sw.covariance - ref).cwiseAbs().maxCoeff(), 1e-8 * ref.cwiseAbs().maxCoeff());
  }
}

TEST(Sandwich, LassoAddsLqaDiagonal) {
  std::mt19937_64 rng(3);
  const auto d = singletons(rng, 200, 3);
  auto pen = penalties_for(d, Analysis::mean_only, PenaltyKind::lasso, 0.01);
  SolverOptions so;
  so.tol = 1e-12;
  const auto fit = fit_hpgee2(d, {Analysis::mean_only, {}}, pen.mean, pen.assoc, so);
  ASSERT_EQ(nonzero_indices(fit.params.beta).size(), 3u);
  VectorXd w(3);
  w << 0.0, 0.01 / std::abs(fit.params.beta(1)), 0.01 / std::abs(fit.params.beta(2));
  const MatrixXd ref = logistic_sandwich(d, fit.params.beta, w);
  const auto sw = sandwich_covariance(d, fit);
  EXPECT_LE((sw.covariance - ref).cwiseAbs().maxCoeff(), 1e-8 * ref.cwiseAbs().maxCoeff());
}

TEST(Sandwich, DuplicatingDataHalvesVariances) {
  StudyConfig cfg;
  cfg.n_clusters = 200;
  cfg.seed = 41;
  const auto sim = simulate_dataset(cfg);
  const auto fit = unpenalized(sim.data, Analysis::joint);
  Dataset dup = sim.data;
  for (const auto& c : sim.data.clusters) {
    ClusterData copy = c;
    copy.id += "b";
    dup.clusters.push_back(std::move(copy));
  }
  const auto a = sandwich_covariance(sim.data, fit);
  const auto b = sandwich_covariance(dup, fit);
  EXPECT_LE((b.covariance - 0.5 * a.covariance).cwiseAbs().maxCoeff(),
            1e-6 * a.covariance.cwiseAbs().maxCoeff());
}

TEST(Sandwich, SymmetricPsdOnPenalizedJointFit) {
  StudyConfig cfg;
  cfg.n_clusters = 300;
  for (std::uint64_t seed : {42u, 43u}) {
    cfg.seed = seed;
    const auto sim = simulate_dataset(cfg);
    const auto pen = penalties_for(sim.data, Analysis::joint, PenaltyKind::scad, 0.08);
    const auto fit = fit_hpgee2(sim.data, {Analysis::joint, {}}, pen.mean, pen.assoc);
    const auto sw = sandwich_covariance(sim.data, fit);
    const auto k = static_cast<Index>(sw.mean_indices.size() + sw.assoc_indices.size());
    ASSERT_EQ(sw.covariance.rows(), k);
    EXPECT_EQ(sw.covariance, sw.covariance.transpose());
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(sw.covariance);
    EXPECT_GE(es.eigenvalues().minCoeff(), -1e-12 * es.eigenvalues().maxCoeff());

    const VectorXd sb = sw.se_beta(sim.data.p());
    for (Index l = 0; l < sb.size(); ++l)
      EXPECT_EQ(std::isnan(sb(l)), fit.params.beta(l) == 0.0) << l;
    const VectorXd sa = sw.se_alpha(sim.data.q());
    for (Index l = 0; l < sa.size(); ++l)
      EXPECT_EQ(std::isnan(sa(l)), fit.params.alpha(l) == 0.0) << l;
  }
}

TEST(Sandwich, StableAcrossFiniteDifferenceSteps) {
  StudyConfig cfg;
  cfg.n_clusters = 300;
  cfg.seed = 44;
  const auto sim = simulate_dataset(cfg);
  const auto fit = unpenalized(sim.data, Analysis::joint);
  const auto a = sandwich_covariance(sim.data, fit, 1.0);
  const auto b = sandwich_covariance(sim.data, fit, 0.5);
  const VectorXd da = a.covariance.diagonal(), db = b.covariance.diagonal();
  for (Index l = 0; l < da.size(); ++l) EXPECT_LE(std::abs(da(l) - db(l)), 1e-3 * da(l)) << l;
}

TEST(Sandwich, EmptyActiveSetIsContractError) {
  std::mt19937_64 rng(5);
  const auto d = singletons(rng, 20, 2);
  FitResult fit = unpenalized(d);
  fit.params.beta.setZero();
  EXPECT_THROW(sandwich_covariance(d, fit), ContractError);
}
