#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "posicaic/lmm.hpp"
#include "posicaic/region.hpp"
#include "posicaic/sampler.hpp"

namespace posicaic {

enum class IntervalMethod { post_caic, naive_1, naive_2 };

struct IntervalResult {
  std::string target_id;
  IntervalMethod method = IntervalMethod::post_caic;
  double point_estimate = 0.0;
  double lower = 0.0, upper = 0.0;
  double alpha = 0.05;
  double critical = 0.0;     // half-width
  double critical_se = std::numeric_limits<double>::quiet_NaN();
  int B = 0;
  std::uint64_t seed = 0;
  double acceptance = std::numeric_limits<double>::quiet_NaN();

  double length() const { return upper - lower; }
  bool covers(double value) const { return lower <= value && value <= upper; }
};

const char* method_tag(IntervalMethod m);

// ceil(p B)-th order statistic (1-based) of the samples.
double empirical_quantile(std::vector<double> samples, double p);
// Same rule on |samples|: the symmetric critical value.
double symmetric_critical(const Eigen::Ref<const Eigen::VectorXd>& samples, double alpha);
// Standard error of symmetric_critical. batches = 0: order-statistic density estimate for independent
// draws; otherwise batch means over contiguous sub-batches.
double critical_standard_error(const Eigen::Ref<const Eigen::VectorXd>& samples, double alpha, int batches = 0);

double normal_critical(double alpha);

// Maps constrained-block draws to draws of (X_M^t V^{-1} X_M)^{-1/2} W^s(M): B x |M|.
Eigen::MatrixXd beta_draws(const FittedLMM& fit, const ConstraintSet& region, const SampleBatch& batch);

// Precomputed K(M)^{-1/2} for mixed-parameter draws.
struct MixedReadout {
  Eigen::MatrixXd K_inv_half;
  int p = 0;  // |M|
  int r = 0;
};
MixedReadout mixed_readout(const FittedLMM& fit);
// c_i^s of a target in K coordinates.
Eigen::VectorXd target_vector(const FittedLMM& fit, const MixedTarget& target);
// Draws of c^t K^{-1/2} (readout w, tail) for one target.
Eigen::VectorXd mixed_draws(const FittedLMM& fit, const MixedReadout& mr, const ConstraintSet& region_mu,
                            const SampleBatch& batch, const MixedTarget& target);

IntervalResult interval_from_draws(const std::string& id, double estimate,
                                   const Eigen::Ref<const Eigen::VectorXd>& draws, double alpha,
                                   const SampleBatch& batch);

IntervalResult posi_ci_beta(const FittedLMM& fit, const ConstraintSet& region, int j, double alpha,
                            const SamplerConfig& cfg);
IntervalResult posi_ci_linear_combo(const FittedLMM& fit, const ConstraintSet& region, const Eigen::VectorXd& k,
                                    double alpha, const SamplerConfig& cfg);
IntervalResult posi_ci_mixed(const FittedLMM& fit, const ConstraintSet& region_mu, const MixedTarget& target,
                             double alpha, const SamplerConfig& cfg);

// j indexes the full a+K coordinates.
IntervalResult naive_ci_beta(const FittedLMM& fit, int j, double alpha);
IntervalResult naive_ci_linear_combo(const FittedLMM& fit, const Eigen::VectorXd& k, double alpha);
IntervalResult naive_ci_mixed(const FittedLMM& fit, const MixedTarget& target, double alpha, int order);

// target-id, method, estimate, lower, upper, alpha, B, seed
std::string interval_csv_header();
std::string interval_csv_row(const IntervalResult& r);

}  // namespace posicaic
