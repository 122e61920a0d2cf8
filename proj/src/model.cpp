#include "posicaic/model.hpp"

#include <cmath>
#include <stdexcept>

#include "posicaic/errors.hpp"

namespace posicaic {

ClusteredDataset::ClusteredDataset(const std::vector<Eigen::VectorXd>& y, const std::vector<Eigen::MatrixXd>& x,
                                   const std::vector<Eigen::MatrixXd>& z, int a, bool has_intercept)
    : a_(a), has_intercept_(has_intercept) {
  const std::size_t n = y.size();
  if (n == 0) throw DataError("dataset has no clusters");
  if (x.size() != n || z.size() != n) throw std::invalid_argument("y, X, Z cluster counts differ");
  const Eigen::Index p = x.front().cols();
  q_ = static_cast<int>(z.front().cols());
  if (a < 0 || a > p) throw std::invalid_argument("a outside [0, p]");
  Eigen::Index m = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (y[i].size() < 1) throw DataError("empty cluster " + std::to_string(i));
    if (x[i].rows() != y[i].size() || x[i].cols() != p) throw std::invalid_argument("X_i shape mismatch");
    if (z[i].rows() != y[i].size() || z[i].cols() != q_) throw std::invalid_argument("Z_i shape mismatch");
    offsets_.push_back(m);
    sizes_.push_back(y[i].size());
    m += y[i].size();
  }
  y_.resize(m);
  x_.resize(m, p);
  random_intercept_ = q_ == 1;
  for (std::size_t i = 0; i < n; ++i) {
    y_.segment(offsets_[i], sizes_[i]) = y[i];
    x_.middleRows(offsets_[i], sizes_[i]) = x[i];
    if (random_intercept_ && (z[i].array() != 1.0).any()) random_intercept_ = false;
  }
  z_ = z;
  if (has_intercept && p > 0 && (x_.col(0).array() != 1.0).any())
    throw DataError("column 1 of X declared as intercept but is not constant 1");
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x_);
  if (qr.rank() < p) throw DataError("design matrix X is rank deficient");
}

ClusteredDataset ClusteredDataset::random_intercept(const std::vector<Eigen::VectorXd>& y,
                                                    const std::vector<Eigen::MatrixXd>& x, int a,
                                                    bool has_intercept) {
  std::vector<Eigen::MatrixXd> z;
  z.reserve(y.size());
  for (const auto& yi : y) z.push_back(Eigen::MatrixXd::Ones(yi.size(), 1));
  return ClusteredDataset(y, x, z, a, has_intercept);
}

Eigen::MatrixXd ClusteredDataset::dense_Z() const {
  Eigen::MatrixXd z = Eigen::MatrixXd::Zero(m(), r());
  for (int i = 0; i < n(); ++i) z.block(offsets_[i], static_cast<Eigen::Index>(i) * q_, sizes_[i], q_) = z_[i];
  return z;
}

ClusteredDataset ClusteredDataset::with_response(const Eigen::VectorXd& y) const {
  if (y.size() != m()) throw std::invalid_argument("response length mismatch");
  ClusteredDataset d = *this;
  d.y_ = y;
  return d;
}

ModelSpec::ModelSpec(std::vector<bool> mask, std::string name, int a) : included(std::move(mask)), label(std::move(name)) {
  if (a > static_cast<int>(included.size())) throw std::invalid_argument("forced count exceeds mask length");
  for (int j = 0; j < a; ++j)
    if (!included[j]) throw std::invalid_argument("forced covariates must be included");
  if (size() == 0) throw std::invalid_argument("model must include at least one covariate");
}

ModelSpec ModelSpec::full(int p, int a, std::string name) { return ModelSpec(std::vector<bool>(p, true), std::move(name), a); }

ModelSpec ModelSpec::from_indices(const std::vector<int>& idx, int p, int a, std::string name) {
  std::vector<bool> mask(p, false);
  for (int j : idx) mask.at(j) = true;
  if (name.empty()) {
    name = "M{";
    for (std::size_t t = 0; t < idx.size(); ++t) name += (t ? "," : "") + std::to_string(idx[t] + 1);
    name += "}";
  }
  return ModelSpec(std::move(mask), std::move(name), a);
}

std::vector<int> ModelSpec::indices() const {
  std::vector<int> out;
  for (int j = 0; j < total(); ++j)
    if (included[j]) out.push_back(j);
  return out;
}

int ModelSpec::size() const {
  int s = 0;
  for (bool b : included) s += b;
  return s;
}

bool ModelSpec::subset_of(const ModelSpec& other) const {
  if (other.total() != total()) return false;
  for (int j = 0; j < total(); ++j)
    if (included[j] && !other.included[j]) return false;
  return true;
}

VarianceStructure VarianceStructure::nerm() {
  VarianceStructure s;
  s.kind = Kind::nerm;
  s.g_slopes = {Eigen::MatrixXd::Ones(1, 1), Eigen::MatrixXd::Zero(1, 1)};
  s.r_slopes = {0.0, 1.0};
  return s;
}

VarianceStructure VarianceStructure::general(std::vector<Eigen::MatrixXd> g, std::vector<double> r) {
  if (g.size() != r.size() || g.empty()) throw std::invalid_argument("slope lists must have equal nonzero length");
  for (const auto& gk : g)
    if (gk.rows() != gk.cols() || gk.rows() != g.front().rows()) throw std::invalid_argument("G slopes must be q x q");
  VarianceStructure s;
  s.kind = Kind::general_linear;
  s.g_slopes = std::move(g);
  s.r_slopes = std::move(r);
  return s;
}

VarianceParams::VarianceParams(Eigen::VectorXd th, VarianceStructure s, bool at_boundary)
    : theta(std::move(th)), structure(std::move(s)), boundary(at_boundary) {
  if (theta.size() != structure.h()) throw std::invalid_argument("theta length does not match structure");
}

VarianceParams VarianceParams::nerm(double sigma2_u, double sigma2_e) {
  return VarianceParams(Eigen::Vector2d(sigma2_u, sigma2_e), VarianceStructure::nerm(), sigma2_u == 0.0);
}

Eigen::MatrixXd VarianceParams::G() const {
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(structure.q(), structure.q());
  for (int k = 0; k < h(); ++k) g += theta(k) * structure.g_slopes[k];
  return g;
}

double VarianceParams::r_scale() const {
  double s = 0.0;
  for (int k = 0; k < h(); ++k) s += theta(k) * structure.r_slopes[k];
  return s;
}

void VarianceParams::validate() const {
  if (!(r_scale() > 0.0)) throw std::invalid_argument("R(theta) must be positive definite");
  if (is_nerm() && theta(0) < 0.0) throw std::invalid_argument("sigma2_u must be nonnegative");
}

}  // namespace posicaic
