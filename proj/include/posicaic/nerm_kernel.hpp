#pragma once

// Random-intercept (NERM) fast path. With H_i = I + lambda J, lambda = sigma2_u / sigma2_e,
// everything reduces to cluster sums grouped by cluster size, so one profiled objective
// evaluation costs O(groups * p^2 + p^3).

#include <Eigen/Dense>
#include <cstdint>
#include <limits>
#include <vector>

#include "posicaic/model.hpp"

namespace posicaic {

struct NermStats {
  int p = 0;
  int n = 0;
  Eigen::Index m = 0;
  Eigen::MatrixXd Sxx;
  Eigen::VectorXd Sxy;
  double Syy = 0.0;
  Eigen::MatrixXd sx;  // p x n cluster sums of x
  Eigen::VectorXd sy;  // cluster sums of y
  Eigen::VectorXd sizes;
  std::vector<int> group_of;
  std::vector<double> gsize;
  std::vector<int> gcount;
  std::vector<Eigen::MatrixXd> Txx;  // sum over group of sx sx^t
  std::vector<Eigen::VectorXd> Txy;
  std::vector<double> Tyy;

  void set_response(const Eigen::VectorXd& sxy, double syy, const Eigen::VectorXd& sy_new);
};

NermStats nerm_stats(const ClusteredDataset& data, const std::vector<int>& cols);
NermStats nerm_subset(const NermStats& full, const std::vector<int>& cols);

struct NermEval {
  double f = 0.0;       // profiled objective (see nerm_objective)
  double df = 0.0;      // d f / d lambda
  double Q = 0.0;       // y^t H^{-1} y - b^t A^{-1} b
  double logdet_h = 0.0;
  double logdet_a = 0.0;
  Eigen::VectorXd beta;
  Eigen::MatrixXd A;    // X^t H^{-1} X
};

// REML: (m - p) log Q + log|H| + log|A|.  ML: m log Q + log|H|.
NermEval nerm_objective(const NermStats& s, FitMethod method, double lambda, bool want_grad = true);

// Twice negative (restricted) log-likelihood with sigma2_e profiled out.
double nerm_neg2_loglik(const NermStats& s, FitMethod method, const NermEval& e);

struct OptimOptions {
  int max_iter = 200;
  double tol_obj = 1e-10;
  double tol_grad = 1e-6;
};

struct NermOptimum {
  double lambda = 0.0;
  double sigma2_e = 0.0;
  double sigma2_u = 0.0;
  double objective = 0.0;
  double grad = 0.0;  // d f / d log lambda, or d f / d lambda at the boundary
  bool boundary = false;
  bool converged = false;
  int iterations = 0;
  std::vector<double> trace;
  NermEval eval;
};

// warm_log_lambda skips the coarse grid when finite.
NermOptimum nerm_optimize(const NermStats& s, FitMethod method, const OptimOptions& opt,
                          double warm_log_lambda = std::numeric_limits<double>::quiet_NaN());

// Bootstrap summaries of standard normal draws z, one column per draw: X^t z, cluster sums, cluster sums of squares.
struct NermBootstrap {
  Eigen::MatrixXd xz;
  Eigen::MatrixXd zsum;
  Eigen::MatrixXd zsq;
  int reps() const { return static_cast<int>(xz.cols()); }
};

// Draw b uses the substream (seed, b) and fills clusters in order.
Eigen::VectorXd bootstrap_normals(const ClusteredDataset& data, std::uint64_t seed, int b);
NermBootstrap nerm_bootstrap(const ClusteredDataset& data, int reps, std::uint64_t seed);

struct BiasCorrection {
  double b = 0.0;
  int failures = 0;
  double term_hessian = 0.0, term_bias = 0.0, term_cov = 0.0;
};

// Variance-estimation penalty b(theta) for a random-intercept model on columns cols.
BiasCorrection nerm_bias_correction(const NermStats& full, const std::vector<int>& cols, double sigma2_u,
                                    double sigma2_e, FitMethod method, const NermBootstrap& draws,
                                    const OptimOptions& opt);

// Coefficient of a_i^t = sigma2_u 1^t V_i^{-1} and its derivatives in (sigma2_u, sigma2_e).
double nerm_a_coef(double sigma2_u, double sigma2_e, double mi);
Eigen::Vector2d nerm_a_coef_grad(double sigma2_u, double sigma2_e, double mi);

}  // namespace posicaic
