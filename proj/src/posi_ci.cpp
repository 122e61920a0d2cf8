#include "posicaic/posi_ci.hpp"

#include <algorithm>
#include <boost/math/distributions/normal.hpp>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "posicaic/errors.hpp"
#include "posicaic/linalg.hpp"

namespace posicaic {

namespace {

void check_alpha(double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must lie in (0, 1)");
}

int model_position(const FittedLMM& fit, int j) {
  const auto cols = fit.spec.indices();
  const auto it = std::find(cols.begin(), cols.end(), j);
  if (it == cols.end()) throw std::invalid_argument("coordinate " + std::to_string(j) + " is not in the selected model");
  return static_cast<int>(it - cols.begin());
}

Eigen::VectorXd restrict_k(const FittedLMM& fit, const Eigen::VectorXd& k) {
  if (k.size() != fit.spec.total()) throw std::invalid_argument("k must have length a+K");
  const auto cols = fit.spec.indices();
  Eigen::VectorXd ks(cols.size());
  for (std::size_t c = 0; c < cols.size(); ++c) ks(c) = k(cols[c]);
  return ks;
}

void check_region(const FittedLMM& fit, const ConstraintSet& region) {
  if (region.model_columns != fit.spec.indices())
    throw std::invalid_argument("region was built for a different selected model");
}

}  // namespace

const char* method_tag(IntervalMethod m) {
  switch (m) {
    case IntervalMethod::post_caic:
      return "post-caic";
    case IntervalMethod::naive_1:
      return "naive-1";
    case IntervalMethod::naive_2:
      return "naive-2";
  }
  return "?";
}

double empirical_quantile(std::vector<double> samples, double p) {
  if (samples.empty()) throw std::invalid_argument("empirical_quantile of an empty sample");
  if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("p must lie in (0, 1)");
  const auto n = samples.size();
  auto k = static_cast<std::size_t>(std::ceil(p * static_cast<double>(n)));
  k = std::clamp<std::size_t>(k, 1, n);
  std::nth_element(samples.begin(), samples.begin() + static_cast<long>(k - 1), samples.end());
  return samples[k - 1];
}

double symmetric_critical(const Eigen::Ref<const Eigen::VectorXd>& samples, double alpha) {
  check_alpha(alpha);
  std::vector<double> a(samples.size());
  for (Eigen::Index i = 0; i < samples.size(); ++i) a[i] = std::abs(samples(i));
  return empirical_quantile(std::move(a), 1.0 - alpha);
}

double critical_standard_error(const Eigen::Ref<const Eigen::VectorXd>& samples, double alpha, int batches) {
  const Eigen::Index n = samples.size();
  if (batches == 0) {
    if (n < 20) return std::numeric_limits<double>::quiet_NaN();
    const double p = 1.0 - alpha;
    const boost::math::normal nd(0.0, 1.0);
    const double z = boost::math::quantile(nd, p), phi = boost::math::pdf(nd, z);
    // Hall-Sheather bandwidth
    double h = std::pow(static_cast<double>(n), -1.0 / 3.0) * std::pow(z, 2.0 / 3.0) *
               std::pow(1.5 * phi * phi / (2 * z * z + 1), 1.0 / 3.0);
    h = std::min({h, p - 1.0 / n, 1.0 - 1.0 / n - p});
    if (!(h > 0.0)) return std::numeric_limits<double>::quiet_NaN();
    std::vector<double> a(samples.data(), samples.data() + n);
    for (double& v : a) v = std::abs(v);
    const double slope = (empirical_quantile(a, p + h) - empirical_quantile(a, p - h)) / (2 * h);
    return std::sqrt(p * (1 - p) / n) * slope;
  }
  if (batches < 2 || n < 2 * batches) return std::numeric_limits<double>::quiet_NaN();
  std::vector<double> c(batches);
  for (int b = 0; b < batches; ++b) {
    const Eigen::Index lo = b * n / batches, hi = (b + 1) * n / batches;
    c[b] = symmetric_critical(samples.segment(lo, hi - lo), alpha);
  }
  double mean = 0.0;
  for (double v : c) mean += v;
  mean /= batches;
  double ss = 0.0;
  for (double v : c) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / (batches - 1)) / std::sqrt(static_cast<double>(batches));
}

double normal_critical(double alpha) {
  check_alpha(alpha);
  return boost::math::quantile(boost::math::complement(boost::math::normal(0.0, 1.0), alpha / 2.0));
}

Eigen::MatrixXd beta_draws(const FittedLMM& fit, const ConstraintSet& region, const SampleBatch& batch) {
  check_region(fit, region);
  const Eigen::MatrixXd h = sym_inv_sqrt(fit.info_marginal, "X_M^t V^{-1} X_M");
  const Eigen::MatrixXd map = h * region.readout_matrix();
  return batch.draws.leftCols(region.constrained_dim()) * map.transpose();
}

MixedReadout mixed_readout(const FittedLMM& fit) {
  if (fit.K_inverse.size() == 0) throw std::invalid_argument("fit has no K matrix; enable compute_K");
  MixedReadout mr;
  mr.K_inv_half = sym_sqrt(fit.K_inverse);
  mr.p = fit.spec.size();
  mr.r = static_cast<int>(fit.data->r());
  return mr;
}

Eigen::VectorXd target_vector(const FittedLMM& fit, const MixedTarget& target) {
  const auto& data = *fit.data;
  if (target.m.size() != data.q()) throw std::invalid_argument("m must have length q");
  if (target.cluster < 0 || target.cluster >= data.n()) throw std::invalid_argument("cluster index out of range");
  const int p = fit.spec.size();
  Eigen::VectorXd c = Eigen::VectorXd::Zero(p + data.r());
  c.head(p) = restrict_k(fit, target.k);
  c.segment(p + static_cast<Eigen::Index>(target.cluster) * data.q(), data.q()) = target.m;
  return c;
}

Eigen::VectorXd mixed_draws(const FittedLMM& fit, const MixedReadout& mr, const ConstraintSet& region_mu,
                            const SampleBatch& batch, const MixedTarget& target) {
  check_region(fit, region_mu);
  if (region_mu.r != mr.r) throw std::invalid_argument("mixed region needs a free tail of length r");
  const Eigen::VectorXd g = mr.K_inv_half * target_vector(fit, target);
  const int dc = region_mu.constrained_dim();
  const Eigen::VectorXd g_fixed = region_mu.readout_matrix().transpose() * g.head(mr.p);
  return batch.draws.leftCols(dc) * g_fixed + batch.draws.rightCols(mr.r) * g.tail(mr.r);
}

IntervalResult interval_from_draws(const std::string& id, double estimate,
                                   const Eigen::Ref<const Eigen::VectorXd>& draws, double alpha,
                                   const SampleBatch& batch) {
  IntervalResult out;
  out.target_id = id;
  out.method = IntervalMethod::post_caic;
  out.point_estimate = estimate;
  out.alpha = alpha;
  out.critical = symmetric_critical(draws, alpha);
  out.critical_se = critical_standard_error(draws, alpha, batch.method == SamplerMethod::chain ? 20 : 0);
  out.lower = estimate - out.critical;
  out.upper = estimate + out.critical;
  out.B = static_cast<int>(draws.size());
  out.seed = batch.seed;
  out.acceptance = batch.acceptance_rate;
  return out;
}

IntervalResult posi_ci_beta(const FittedLMM& fit, const ConstraintSet& region, int j, double alpha,
                            const SamplerConfig& cfg) {
  check_alpha(alpha);
  const int pos = model_position(fit, j);
  const SampleBatch batch = sample_truncated(region, cfg);
  const Eigen::MatrixXd d = beta_draws(fit, region, batch);
  return interval_from_draws("beta" + std::to_string(j + 1), fit.beta_hat(j), d.col(pos), alpha, batch);
}

IntervalResult posi_ci_linear_combo(const FittedLMM& fit, const ConstraintSet& region, const Eigen::VectorXd& k,
                                    double alpha, const SamplerConfig& cfg) {
  check_alpha(alpha);
  const Eigen::VectorXd ks = restrict_k(fit, k);
  if (ks.isZero(0.0)) throw std::invalid_argument("k is zero on the selected model");
  const SampleBatch batch = sample_truncated(region, cfg);
  const Eigen::VectorXd d = beta_draws(fit, region, batch) * ks;
  return interval_from_draws("combo", k.dot(fit.beta_hat), d, alpha, batch);
}

IntervalResult posi_ci_mixed(const FittedLMM& fit, const ConstraintSet& region_mu, const MixedTarget& target,
                             double alpha, const SamplerConfig& cfg) {
  check_alpha(alpha);
  const MixedReadout mr = mixed_readout(fit);
  const SampleBatch batch = sample_truncated(region_mu, cfg);
  const Eigen::VectorXd d = mixed_draws(fit, mr, region_mu, batch, target);
  return interval_from_draws("mu" + std::to_string(target.cluster + 1), predict_mixed(fit, target), d, alpha, batch);
}

IntervalResult naive_ci_beta(const FittedLMM& fit, int j, double alpha) {
  const int pos = model_position(fit, j);
  const Eigen::MatrixXd a_inv = spd_inverse(fit.info_marginal, "X_M^t V^{-1} X_M");
  IntervalResult out;
  out.target_id = "beta" + std::to_string(j + 1);
  out.method = IntervalMethod::naive_1;
  out.point_estimate = fit.beta_hat(j);
  out.alpha = alpha;
  out.critical = normal_critical(alpha) * std::sqrt(a_inv(pos, pos));
  out.lower = out.point_estimate - out.critical;
  out.upper = out.point_estimate + out.critical;
  return out;
}

IntervalResult naive_ci_linear_combo(const FittedLMM& fit, const Eigen::VectorXd& k, double alpha) {
  const Eigen::VectorXd ks = restrict_k(fit, k);
  const Eigen::MatrixXd a_inv = spd_inverse(fit.info_marginal, "X_M^t V^{-1} X_M");
  IntervalResult out;
  out.target_id = "combo";
  out.method = IntervalMethod::naive_1;
  out.point_estimate = k.dot(fit.beta_hat);
  out.alpha = alpha;
  out.critical = normal_critical(alpha) * std::sqrt(ks.dot(a_inv * ks));
  out.lower = out.point_estimate - out.critical;
  out.upper = out.point_estimate + out.critical;
  return out;
}

IntervalResult naive_ci_mixed(const FittedLMM& fit, const MixedTarget& target, double alpha, int order) {
  if (order != 1 && order != 2) throw std::invalid_argument("order must be 1 or 2");
  IntervalResult out;
  out.target_id = "mu" + std::to_string(target.cluster + 1);
  out.method = order == 1 ? IntervalMethod::naive_1 : IntervalMethod::naive_2;
  out.point_estimate = predict_mixed(fit, target);
  out.alpha = alpha;
  const MseTerms t = order == 1 ? [&] {
    const auto g = mse_first_order(fit, target);
    MseTerms m;
    m.g1 = g.first;
    m.g2 = g.second;
    return m;
  }()
                                : mse_terms(fit, target);
  out.critical = normal_critical(alpha) * std::sqrt(order == 1 ? t.mse1() : t.mse2());
  out.lower = out.point_estimate - out.critical;
  out.upper = out.point_estimate + out.critical;
  return out;
}

std::string interval_csv_header() { return "target_id,method,estimate,lower,upper,alpha,B,seed"; }

std::string interval_csv_row(const IntervalResult& r) {
  std::ostringstream os;
  os.precision(15);
  os << r.target_id << ',' << method_tag(r.method) << ',' << r.point_estimate << ',' << r.lower << ',' << r.upper << ','
     << r.alpha << ',' << r.B << ',' << r.seed;
  return os.str();
}

}  // namespace posicaic
