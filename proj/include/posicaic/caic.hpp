#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "posicaic/lmm.hpp"

namespace posicaic {

struct CandidateSet {
  enum class Structure { nested, general };
  std::vector<ModelSpec> specs;
  Structure structure = Structure::general;
  int a = 0;

  // nested: each spec adds exactly one covariate to the previous one; labels unique.
  void validate() const;
  int size() const { return static_cast<int>(specs.size()); }
};

struct SelectionResult {
  int selected = 0;
  std::vector<double> caic, rho_hat, b_hat;
  Eigen::MatrixXd trace;  // trace(i, j) = caic[i] - caic[j]
  std::vector<FittedLMM> fits;
};

// b(theta_hat) by parametric bootstrap; zero method returns 0.
double bias_correction_b(const ClusteredDataset& data, const ModelSpec& spec, const VarianceParams& theta_hat,
                         FitOptions::BiasMethod method, int reps, std::uint64_t seed,
                         FitMethod fit_method = FitMethod::reml);

// Dense per-cluster version for linear-in-theta structures. draws are the same standard normals
// as the random-intercept fast path uses, mapped through V_i^{1/2}.
BiasCorrection bias_correction_general(const ClusteredDataset& data, const std::vector<int>& cols,
                                       const VarianceParams& theta_hat, FitMethod method, int reps,
                                       std::uint64_t seed, const OptimOptions& opt);

double caic_value(double loglik_conditional, double rho, double b);
double caic(const ClusteredDataset& data, const ModelSpec& spec, const FittedLMM& fit);

// Smallest index attaining the minimum.
int argmin_caic(const std::vector<double>& values);

// Fits every candidate (shared bootstrap draws) and picks the cAIC minimizer.
SelectionResult select_model(const ClusteredDataset& data, const CandidateSet& candidates, const FitOptions& opts);
SelectionResult select_model(std::shared_ptr<const ClusteredDataset> data, const CandidateSet& candidates,
                             const FitOptions& opts);

struct SimScenario;
// Fraction of replications selecting a model that misses a covariate of scenario.true_model.
double underselection_rate(const SimScenario& scenario, const CandidateSet& candidates, int reps, std::uint64_t seed);

}  // namespace posicaic
