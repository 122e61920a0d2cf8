#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "posicaic/region.hpp"

namespace posicaic {

enum class SamplerMethod { automatic, rejection, chain };

struct SamplerConfig {
  int B = 10000;
  std::uint64_t seed = 1;
  SamplerMethod method = SamplerMethod::automatic;
  int burn_in = 1000;
  int thinning = 5;
  long long max_proposals = 50'000'000;
  // Draws are split into this many independent substreams; results do not depend on thread count.
  int streams = 16;
  int stuck_limit = 1000;
  long long probe_budget = 100'000;
  int auto_probes = 4000;
  double auto_threshold = 1e-3;

  void validate() const;
};

struct SampleBatch {
  Eigen::MatrixXd draws;  // B x dim
  SamplerMethod method = SamplerMethod::rejection;
  std::uint64_t seed = 0;
  double acceptance_rate = std::numeric_limits<double>::quiet_NaN();
  long long proposals = 0;
  double mean_step = std::numeric_limits<double>::quiet_NaN();  // chain: average |t| per move
};

// Fraction of N(0, I) probes inside the region.
double acceptance_estimate(const ConstraintSet& region, int n_probe, std::uint64_t seed);

// Rows follow N(0, I_dim) restricted to the region; free-tail columns are plain N(0, 1).
SampleBatch sample_truncated(const ConstraintSet& region, const SamplerConfig& cfg);
// Same substreams and result, one thread.
SampleBatch sample_truncated_serial(const ConstraintSet& region, const SamplerConfig& cfg);

// Truncated block from region_fixed followed by r independent N(0, 1) columns.
SampleBatch sample_posi_joint(const ConstraintSet& region_fixed, int r, const SamplerConfig& cfg);

// Feasible set of t for w + t u, as sorted disjoint intervals (possibly infinite ends).
std::vector<std::pair<double, double>> line_feasible_set(const ConstraintSet& region,
                                                         const Eigen::Ref<const Eigen::VectorXd>& w,
                                                         const Eigen::Ref<const Eigen::VectorXd>& u);

void write_batch_csv(const SampleBatch& batch, const std::string& path);

const char* method_name(SamplerMethod m);

}  // namespace posicaic
