#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <memory>
#include <utility>
#include <vector>

#include "posicaic/model.hpp"
#include "posicaic/nerm_kernel.hpp"

namespace posicaic {

struct FitOptions {
  FitMethod method = FitMethod::reml;
  OptimOptions optim;
  enum class BiasMethod { monte_carlo, zero };
  BiasMethod b_method = BiasMethod::monte_carlo;
  int b_reps = 200;
  std::uint64_t b_seed = 20240601;
  bool compute_K = true;
  VarianceStructure structure = VarianceStructure::nerm();
  bool force_general = false;  // dense per-cluster path even for random-intercept data
};

struct FittedLMM {
  std::shared_ptr<const ClusteredDataset> data;
  ModelSpec spec;
  FitMethod method = FitMethod::reml;
  Eigen::VectorXd beta_hat;  // length a+K, zero outside spec
  VarianceParams theta_hat;
  Eigen::VectorXd u_tilde;   // length r
  double loglik_marginal = 0.0;     // at (beta_hat, theta_hat)
  double loglik_conditional = 0.0;  // f(y|u) part at (beta_hat, u_tilde)
  double objective = 0.0;           // minimized -2 (restricted) log-likelihood
  double rho_hat = 0.0, b_hat = 0.0, caic = 0.0;
  Eigen::MatrixXd info_marginal;        // X_M^t V^{-1} X_M; I^m(M) is this over n
  Eigen::MatrixXd hessian_conditional;  // X_M^t R^{-1} X_M; J^c(M) is this over n
  Eigen::MatrixXd K_matrix, K_inverse;  // (|M| + r) square, empty unless requested
  int iterations = 0;
  double grad_norm = 0.0;
  bool converged = false;
  std::vector<double> objective_trace;
  int b_failures = 0;

  int n() const { return data->n(); }
  Eigen::VectorXd beta_model() const;
};

// Per-cluster V_i^{-1} and log|V| for the given theta.
struct ClusterCache {
  std::vector<Eigen::MatrixXd> v_inv;
  double logdet_v = 0.0;
};
ClusterCache cluster_cache(const ClusteredDataset& data, const VarianceParams& theta);
Eigen::MatrixXd cluster_V(const ClusteredDataset& data, const VarianceParams& theta, int i);
Eigen::MatrixXd cluster_V_slope(const ClusteredDataset& data, const VarianceParams& theta, int i, int k);

Eigen::MatrixXd model_columns(const ClusteredDataset& data, const ModelSpec& spec);

double marginal_loglik(const ClusteredDataset& data, const ModelSpec& spec, const VarianceParams& theta,
                       const Eigen::VectorXd& beta);
// The f(y|u) part of the extended log-likelihood.
double conditional_loglik(const ClusteredDataset& data, const ModelSpec& spec, const VarianceParams& theta,
                          const Eigen::VectorXd& beta, const Eigen::VectorXd& u);
// The f(u) part: -1/2 [r log 2pi + n log|G| + sum u_i^t G^{-1} u_i].
double random_effects_loglik(const ClusteredDataset& data, const VarianceParams& theta, const Eigen::VectorXd& u);

struct HendersonSolution {
  Eigen::VectorXd beta;  // padded to a+K
  Eigen::VectorXd u;
};
HendersonSolution solve_henderson(const ClusteredDataset& data, const ModelSpec& spec, const VarianceParams& theta);

double effective_dof(const ClusteredDataset& data, const ModelSpec& spec, const VarianceParams& theta);

// Dense per-cluster (restricted) likelihood optimizer over log theta with boundary restarts.
struct GeneralOptimum {
  Eigen::VectorXd theta;
  std::vector<bool> at_boundary;
  double objective = 0.0;
  double grad_norm = 0.0;
  int iterations = 0;
  std::vector<double> trace;
};
double general_objective(const ClusteredDataset& data, const std::vector<int>& cols, const VarianceParams& theta,
                         FitMethod method, Eigen::VectorXd* grad = nullptr);
GeneralOptimum general_optimize(const ClusteredDataset& data, const std::vector<int>& cols,
                                const VarianceStructure& structure, FitMethod method, const OptimOptions& opt,
                                const Eigen::VectorXd* start = nullptr);

FittedLMM fit_model(const ClusteredDataset& data, const ModelSpec& spec, const FitOptions& opts = {});
// Shared-data form. draws/full_stats let several candidate fits reuse one bootstrap set.
FittedLMM fit_model(std::shared_ptr<const ClusteredDataset> data, const ModelSpec& spec, const FitOptions& opts,
                    const NermBootstrap* draws = nullptr, const NermStats* full_stats = nullptr);

struct KBlocks {
  Eigen::MatrixXd K;          // C^t R^{-1} C + G^+
  Eigen::MatrixXd K_inverse;  // assembled from the block formulas
  int p = 0;                  // leading fixed-effect block size
};
KBlocks build_K(const ClusteredDataset& data, const ModelSpec& spec, const VarianceParams& theta);

double predict_mixed(const FittedLMM& fit, const MixedTarget& target);

struct MseTerms {
  double g1 = 0.0, g2 = 0.0, g3 = 0.0;
  double mse1() const { return g1 + g2; }
  double mse2() const { return g1 + g2 + 2.0 * g3; }
};
std::pair<double, double> mse_first_order(const FittedLMM& fit, const MixedTarget& target);
double mse_second_order(const FittedLMM& fit, const MixedTarget& target);
MseTerms mse_terms(const FittedLMM& fit, const MixedTarget& target);

// Inverse expected information of the (restricted) likelihood in theta.
Eigen::MatrixXd theta_covariance(const ClusteredDataset& data, const ModelSpec& spec, const VarianceParams& theta,
                                 FitMethod method);
// d a_i / d theta_k as rows (h x m_i), a_i^t = m^t G Z_i^t V_i^{-1}.
Eigen::MatrixXd a_derivative(const ClusteredDataset& data, const VarianceParams& theta, const MixedTarget& target);
Eigen::RowVectorXd a_vector(const ClusteredDataset& data, const VarianceParams& theta, const MixedTarget& target);

}  // namespace posicaic
