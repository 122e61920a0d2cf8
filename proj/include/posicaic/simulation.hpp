#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "posicaic/caic.hpp"
#include "posicaic/posi_ci.hpp"
#include "posicaic/region.hpp"

namespace posicaic {

struct SimScenario {
  std::string setting = "S1";
  Eigen::VectorXd beta_true;
  double sigma2_e = 1.0;  // stored in the declared (sigma2_e, sigma2_u) order
  double sigma2_u = 1.0;
  int n = 30;
  int mi = 5;
  double omega_offdiag = 0.25;
  std::string sel_tag = "v2";
  std::vector<bool> true_model;  // smallest correct model
  std::vector<bool> target;      // conditioning model; empty means all covariates
  int I = 500;
  int B = 5000;
  double alpha = 0.05;
  std::uint64_t seed = 42;
  FitMethod method = FitMethod::reml;
  int b_reps = 200;
  bool orthogonal_regions = true;
  int max_attempt_factor = 100;
  int wave = 64;

  // S1: (sigma2_e, sigma2_u) = (1, 1); S2: (1, 0.5). beta = (2.25, -1.1, 2.43, 0, 0).
  static SimScenario paper(const std::string& setting, int n, int mi, const std::string& tag = "v2");
  void validate() const;
};

struct NermDraw {
  ClusteredDataset data;
  Eigen::VectorXd u;  // realized random effects
};

ClusteredDataset generate_nerm(const SimScenario& scenario, std::uint64_t rep_seed);
NermDraw generate_nerm_draw(const SimScenario& scenario, std::uint64_t rep_seed);

struct CandidateFamily {
  CandidateSet candidates;
  ExtendedSelectionMatrix upsilon;
};
// v2, v3, v4: the first 2, 3 or 4 of p covariates are forced; all subsets of the rest,
// ordered by size then lexicographically.
CandidateFamily candidate_set_for(const std::string& tag, int p = 5);

struct CoverageRow {
  std::string setting, method, target;
  double coverage = 0.0;  // percent
  double length = 0.0;
  double mc_se = 0.0;     // percent
  int replications = 0;
};

struct CoverageTable {
  std::vector<CoverageRow> rows;
  long attempts = 0;
  int conditioned = 0;
  std::vector<long> selection_counts;
  long underselected = 0;
  double mean_acceptance = 0.0;
  int chain_batches = 0;

  const CoverageRow& find(const std::string& method, const std::string& target) const;
};

// Repeats generate -> select until the target model has been selected I times, computing
// post-cAIC and naive intervals on each conditioned replication. Deterministic in the seed.
CoverageTable run_until_selected(const SimScenario& scenario);
void write_coverage_csv(const CoverageTable& table, const std::string& path);

// Fraction of attempts selecting a model that misses a covariate of the true model.
struct UnderselectionStats {
  double rate = 0.0;
  double se = 0.0;
  long count = 0;
  int reps = 0;
};
UnderselectionStats underselection_stats(const SimScenario& scenario, const CandidateSet& candidates, int reps,
                                         std::uint64_t seed);

struct RegionDemo {
  std::vector<std::string> labels;
  std::vector<ConstraintSet> regions;
  std::vector<double> caic;
  std::vector<double> rho_b;
  Eigen::MatrixXd sigma;
  int draws = 0;
  double exactly_one = 0.0;  // fraction of N(0, I) draws inside exactly one region
  double none = 0.0;
  double several = 0.0;
  std::string report() const;
};
// Regions for every possible selected model (nested or general builder by the set's tag)
// plus the partition check over `draws` standard-normal vectors.
RegionDemo region_demo(const ClusteredDataset& data, const CandidateSet& candidates, const FitOptions& opts,
                       int draws = 100000, std::uint64_t seed = 7);

}  // namespace posicaic
