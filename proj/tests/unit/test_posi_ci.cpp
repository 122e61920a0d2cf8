#include <doctest.h>

#include <boost/math/distributions/normal.hpp>
#include <cmath>

#include "../common/oracles.hpp"
#include "posicaic/posi_ci.hpp"

using namespace posicaic;

namespace {

FittedLMM sample_fit(std::uint64_t seed, int n = 25) {
  auto data = std::make_shared<const ClusteredDataset>(oracle::random_nerm(seed, n, 5, 5, 3, 1.0, 1.0));
  FitOptions o;
  o.b_method = FitOptions::BiasMethod::zero;
  return fit_model(data, ModelSpec::full(3, 1), o);
}

ConstraintSet unconstrained(const FittedLMM& f) {
  ConstraintSet r;
  r.dim = f.spec.size();
  r.model_columns = f.spec.indices();
  return r;
}

}  // namespace

TEST_CASE("empirical quantile rule") {
  CHECK(empirical_quantile({1, 2, 3, 4, 5}, 0.5) == 3.0);
  CHECK(empirical_quantile({5, 4, 3, 2, 1}, 0.2) == 1.0);
  CHECK(empirical_quantile({5, 4, 3, 2, 1}, 0.21) == 2.0);
  CHECK(empirical_quantile({2.5, 2.5, 2.5}, 0.9) == 2.5);
  CHECK_THROWS(empirical_quantile({}, 0.5));
  CHECK_THROWS(empirical_quantile({1.0}, 1.0));
}

TEST_CASE("normal multipliers") {
  CHECK(normal_critical(0.05) == doctest::Approx(1.959964).epsilon(1e-6));
  CHECK(normal_critical(0.1) == doctest::Approx(1.644854).epsilon(1e-6));
  CHECK(normal_critical(0.05) * 0.5 == doctest::Approx(0.97998).epsilon(1e-5));
}

TEST_CASE("absolute normal quantile from draws") {
  ConstraintSet r;
  r.dim = 1;
  SamplerConfig cfg;
  cfg.B = 100000;
  cfg.seed = 5;
  const SampleBatch b = sample_truncated(r, cfg);
  const double c = symmetric_critical(b.draws.col(0), 0.05);
  const oracle::NumericCdf abs_cdf([](double x) { return std::exp(-0.5 * x * x); }, 0.0, 10.0, 1000001);
  double lo = 0.0, hi = 10.0;
  for (int k = 0; k < 80; ++k) {
    const double mid = 0.5 * (lo + hi);
    (abs_cdf(mid) < 0.95 ? lo : hi) = mid;
  }
  CHECK(lo == doctest::Approx(1.959964).epsilon(1e-5));
  const double dens = 2 * std::exp(-0.5 * lo * lo) / std::sqrt(2 * M_PI);
  const double se = std::sqrt(0.95 * 0.05 / cfg.B) / dens;
  CHECK(std::abs(c - lo) < 3 * se);
  const double c975 = symmetric_critical(b.draws.col(0), 0.025);
  CHECK(std::abs(c975 - 2.2414) < 0.03);
}

TEST_CASE("critical value standard error matches the order-statistic formula") {
  ConstraintSet r;
  r.dim = 1;
  SamplerConfig cfg;
  cfg.B = 5000;
  const double z = 1.959964;
  const double want = std::sqrt(0.95 * 0.05 / cfg.B) / (2 * std::exp(-0.5 * z * z) / std::sqrt(2 * M_PI));
  const int reps = 200;
  double mean_se = 0.0, m1 = 0.0, m2 = 0.0, mean_batch = 0.0;
  for (int k = 0; k < reps; ++k) {
    cfg.seed = 1000 + k;
    const Eigen::VectorXd d = sample_truncated(r, cfg).draws.col(0);
    const double c = symmetric_critical(d, 0.05);
    mean_se += critical_standard_error(d, 0.05) / reps;
    mean_batch += critical_standard_error(d, 0.05, 20) / reps;
    m1 += c / reps;
    m2 += c * c / reps;
  }
  CHECK(mean_se == doctest::Approx(want).epsilon(0.1));
  CHECK(mean_batch == doctest::Approx(want).epsilon(0.15));
  CHECK(std::sqrt(m2 - m1 * m1) == doctest::Approx(want).epsilon(0.15));
  CHECK(std::isnan(critical_standard_error(Eigen::VectorXd::Ones(5), 0.05)));
}

TEST_CASE("unconstrained regions reduce to the naive intervals") {
  FittedLMM f = sample_fit(3);
  const KBlocks kb = build_K(*f.data, f.spec, f.theta_hat);
  f.K_matrix = kb.K;
  f.K_inverse = kb.K_inverse;
  const ConstraintSet r = unconstrained(f);
  SamplerConfig cfg;
  cfg.B = 20000;
  for (int j = 0; j < 3; ++j) {
    const IntervalResult post = posi_ci_beta(f, r, j, 0.05, cfg);
    const IntervalResult naive = naive_ci_beta(f, j, 0.05);
    CHECK(std::abs(post.critical - naive.critical) < 2 * post.critical_se + 1e-12);
    CHECK(post.point_estimate == naive.point_estimate);
    CHECK(0.5 * (post.lower + post.upper) == doctest::Approx(post.point_estimate));
  }
  const ConstraintSet rm = r.with_free_tail(f.data->n());
  for (int i = 0; i < 3; ++i) {
    MixedTarget t{f.data->X_i(i).colwise().mean().transpose(), Eigen::VectorXd::Ones(1), i};
    const IntervalResult post = posi_ci_mixed(f, rm, t, 0.05, cfg);
    const IntervalResult naive = naive_ci_mixed(f, t, 0.05, 1);
    CHECK(std::abs(post.critical - naive.critical) < 2 * post.critical_se + 1e-12);
  }
}

TEST_CASE("pushing mass outward widens the interval") {
  const FittedLMM f = sample_fit(4);
  ConstraintSet r = unconstrained(f);
  QuadraticConstraint c;
  c.Q = Eigen::Matrix3d::Zero();
  c.Q(1, 1) = 1.0;
  c.rhs = 4.0;
  c.sense = Sense::greater_equal;
  r.constraints.push_back(c);
  SamplerConfig cfg;
  cfg.B = 5000;
  const IntervalResult post = posi_ci_beta(f, r, 1, 0.05, cfg);
  CHECK(post.length() > naive_ci_beta(f, 1, 0.05).length());
}

TEST_CASE("linear combinations") {
  const FittedLMM f = sample_fit(5);
  const ConstraintSet r = unconstrained(f);
  SamplerConfig cfg;
  cfg.B = 4000;
  const IntervalResult a = posi_ci_beta(f, r, 2, 0.05, cfg);
  const IntervalResult b = posi_ci_linear_combo(f, r, Eigen::Vector3d(0, 0, 1), 0.05, cfg);
  CHECK(a.lower == doctest::Approx(b.lower).epsilon(1e-12));
  CHECK(a.upper == doctest::Approx(b.upper).epsilon(1e-12));
  CHECK_THROWS(posi_ci_linear_combo(f, r, Eigen::Vector3d::Zero(), 0.05, cfg));
}

TEST_CASE("zero random part matches the fixed combination") {
  FittedLMM f = sample_fit(6);
  const KBlocks kb = build_K(*f.data, f.spec, f.theta_hat);
  f.K_matrix = kb.K;
  f.K_inverse = kb.K_inverse;
  const ConstraintSet r = unconstrained(f);
  const Eigen::Vector3d k(1.0, 0.2, -0.4);
  SamplerConfig cfg;
  cfg.B = 20000;
  const IntervalResult mixed = posi_ci_mixed(f, r.with_free_tail(f.data->n()), {k, Eigen::VectorXd::Zero(1), 0}, 0.05, cfg);
  const IntervalResult combo = posi_ci_linear_combo(f, r, k, 0.05, cfg);
  CHECK(mixed.point_estimate == doctest::Approx(combo.point_estimate));
  CHECK(std::abs(mixed.critical - combo.critical) < 2 * (mixed.critical_se + combo.critical_se));
}

TEST_CASE("intervals are nested in alpha for the same draws") {
  const FittedLMM f = sample_fit(7);
  const ConstraintSet r = unconstrained(f);
  SamplerConfig cfg;
  cfg.B = 3000;
  cfg.seed = 21;
  const SampleBatch b = sample_truncated(r, cfg);
  const Eigen::MatrixXd d = beta_draws(f, r, b);
  double prev = 0.0;
  for (double alpha : {0.5, 0.2, 0.1, 0.05, 0.01}) {
    const IntervalResult ir = interval_from_draws("beta1", f.beta_hat(0), d.col(0), alpha, b);
    CHECK(ir.critical >= prev);
    prev = ir.critical;
  }
}

TEST_CASE("naive mixed intervals order") {
  const FittedLMM f = sample_fit(8);
  for (int i = 0; i < f.data->n(); ++i) {
    MixedTarget t{f.data->X_i(i).colwise().mean().transpose(), Eigen::VectorXd::Ones(1), i};
    CHECK(naive_ci_mixed(f, t, 0.05, 2).length() >= naive_ci_mixed(f, t, 0.05, 1).length());
  }
  CHECK_THROWS(naive_ci_mixed(f, {Eigen::Vector3d::Zero(), Eigen::VectorXd::Ones(1), 0}, 0.05, 3));
}

TEST_CASE("region for another model is rejected") {
  const FittedLMM f = sample_fit(9);
  ConstraintSet r;
  r.dim = 2;
  r.model_columns = {0, 1};
  CHECK_THROWS(posi_ci_beta(f, r, 0, 0.05, SamplerConfig{}));
  CHECK_THROWS(naive_ci_beta(sample_fit(9), 5, 0.05));
}

TEST_CASE("csv row") {
  IntervalResult r;
  r.target_id = "beta5";
  r.point_estimate = 0.5;
  r.lower = 0.25;
  r.upper = 0.75;
  r.B = 10;
  r.seed = 3;
  CHECK(interval_csv_header() == "target_id,method,estimate,lower,upper,alpha,B,seed");
  CHECK(interval_csv_row(r) == "beta5,post-caic,0.5,0.25,0.75,0.05,10,3");
}
