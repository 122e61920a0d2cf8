#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

namespace posicaic {

// Clustered data y_i = X_i beta + Z_i u_i + e_i, stored stacked by cluster.
class ClusteredDataset {
 public:
  // a: count of always-included leading covariates. Validates the invariants.
  ClusteredDataset(const std::vector<Eigen::VectorXd>& y, const std::vector<Eigen::MatrixXd>& x,
                   const std::vector<Eigen::MatrixXd>& z, int a, bool has_intercept = true);

  // Random-intercept design: Z_i is a column of ones.
  static ClusteredDataset random_intercept(const std::vector<Eigen::VectorXd>& y,
                                           const std::vector<Eigen::MatrixXd>& x, int a,
                                           bool has_intercept = true);

  int n() const { return static_cast<int>(sizes_.size()); }
  Eigen::Index m() const { return y_.size(); }
  int p() const { return static_cast<int>(x_.cols()); }
  int a() const { return a_; }
  int K() const { return p() - a_; }
  int q() const { return q_; }
  Eigen::Index r() const { return static_cast<Eigen::Index>(n()) * q_; }
  bool has_intercept() const { return has_intercept_; }
  bool is_random_intercept() const { return random_intercept_; }

  const Eigen::VectorXd& y() const { return y_; }
  const Eigen::MatrixXd& X() const { return x_; }
  Eigen::Index offset(int i) const { return offsets_[i]; }
  Eigen::Index size(int i) const { return sizes_[i]; }
  const std::vector<Eigen::Index>& sizes() const { return sizes_; }

  auto y_i(int i) const { return y_.segment(offsets_[i], sizes_[i]); }
  auto X_i(int i) const { return x_.middleRows(offsets_[i], sizes_[i]); }
  const Eigen::MatrixXd& Z_i(int i) const { return z_[i]; }

  Eigen::MatrixXd dense_Z() const;

  // Same design with a different stacked response; no revalidation.
  ClusteredDataset with_response(const Eigen::VectorXd& y) const;

 private:
  ClusteredDataset() = default;
  Eigen::VectorXd y_;
  Eigen::MatrixXd x_;
  std::vector<Eigen::MatrixXd> z_;
  std::vector<Eigen::Index> offsets_, sizes_;
  int a_ = 0, q_ = 0;
  bool has_intercept_ = true, random_intercept_ = false;
};

struct ModelSpec {
  std::vector<bool> included;
  std::string label;

  ModelSpec() = default;
  ModelSpec(std::vector<bool> mask, std::string name, int a);
  static ModelSpec full(int p, int a, std::string name = "full");
  static ModelSpec from_indices(const std::vector<int>& idx, int p, int a, std::string name = {});

  std::vector<int> indices() const;
  int size() const;
  int total() const { return static_cast<int>(included.size()); }
  bool contains(int j) const { return included.at(j); }
  // true when every covariate of this model is in other
  bool subset_of(const ModelSpec& other) const;
};

// G(theta) = sum_k theta_k G_k (q x q) and R_i(theta) = (sum_k theta_k r_k) I.
// The random-intercept model is theta = (sigma2_u, sigma2_e), G_1 = [1], r = (0, 1).
struct VarianceStructure {
  enum class Kind { nerm, general_linear };
  Kind kind = Kind::nerm;
  std::vector<Eigen::MatrixXd> g_slopes;
  std::vector<double> r_slopes;

  static VarianceStructure nerm();
  static VarianceStructure general(std::vector<Eigen::MatrixXd> g_slopes, std::vector<double> r_slopes);
  int h() const { return static_cast<int>(r_slopes.size()); }
  int q() const { return g_slopes.empty() ? 0 : static_cast<int>(g_slopes.front().rows()); }
};

struct VarianceParams {
  Eigen::VectorXd theta;
  VarianceStructure structure;
  bool boundary = false;

  VarianceParams() = default;
  VarianceParams(Eigen::VectorXd th, VarianceStructure s, bool at_boundary = false);
  static VarianceParams nerm(double sigma2_u, double sigma2_e);

  Eigen::MatrixXd G() const;
  double r_scale() const;
  const Eigen::MatrixXd& G_slope(int k) const { return structure.g_slopes[k]; }
  double r_slope(int k) const { return structure.r_slopes[k]; }
  int h() const { return structure.h(); }
  bool is_nerm() const { return structure.kind == VarianceStructure::Kind::nerm; }
  double sigma2_u() const { return theta(0); }
  double sigma2_e() const { return theta(1); }
  void validate() const;
};

struct MixedTarget {
  Eigen::VectorXd k;  // length p, zero outside the model
  Eigen::VectorXd m;  // length q
  int cluster = 0;
};

enum class FitMethod { ml, reml };

}  // namespace posicaic
