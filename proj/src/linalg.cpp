#include "posicaic/linalg.hpp"

#include <cmath>
#include <iostream>
#include <mutex>

#include "posicaic/errors.hpp"

namespace posicaic {

namespace {
std::mutex g_warn_mutex;
WarningHandler g_warn_handler = [](const std::string& m) { std::cerr << "warning: " << m << '\n'; };
}  // namespace

void set_warning_handler(WarningHandler handler) {
  std::lock_guard<std::mutex> lock(g_warn_mutex);
  g_warn_handler = std::move(handler);
}

void warn(const std::string& message) {
  std::lock_guard<std::mutex> lock(g_warn_mutex);
  if (g_warn_handler) g_warn_handler(message);
}

Eigen::LLT<Eigen::MatrixXd> guarded_llt(const Eigen::MatrixXd& a, const char* what, int cluster) {
  Eigen::LLT<Eigen::MatrixXd> llt(a);
  if (llt.info() != Eigen::Success) throw NumericalError(std::string(what) + ": matrix not positive definite", cluster);
  // squared ratio of Cholesky diagonals bounds the condition number from below
  const auto d = llt.matrixLLT().diagonal().cwiseAbs();
  const double lo = d.minCoeff();
  const double hi = d.maxCoeff();
  if (!(lo > 0.0)) throw NumericalError(std::string(what) + ": singular matrix", cluster);
  const double cond = (hi / lo) * (hi / lo);
  if (!std::isfinite(cond) || cond > kCondError)
    throw NumericalError(std::string(what) + ": condition number above 1e14", cluster);
  if (cond > kCondWarn) warn(std::string(what) + ": condition number above 1e10");
  return llt;
}

Eigen::MatrixXd spd_inverse(const Eigen::MatrixXd& a, const char* what, int cluster) {
  auto llt = guarded_llt(a, what, cluster);
  Eigen::MatrixXd inv = llt.solve(Eigen::MatrixXd::Identity(a.rows(), a.cols()));
  return symmetrize(inv);
}

double spd_logdet(const Eigen::MatrixXd& a, const char* what, int cluster) {
  auto llt = guarded_llt(a, what, cluster);
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

Eigen::MatrixXd sym_sqrt(const Eigen::MatrixXd& a) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(symmetrize(a));
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

Eigen::MatrixXd sym_inv_sqrt(const Eigen::MatrixXd& a, const char* what) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(symmetrize(a));
  const Eigen::VectorXd& ev = es.eigenvalues();
  if (ev.size() == 0) return a;
  if (!(ev.minCoeff() > 0.0)) throw NumericalError(std::string(what) + ": matrix not positive definite");
  if (ev.maxCoeff() / ev.minCoeff() > kCondError) throw NumericalError(std::string(what) + ": condition number above 1e14");
  Eigen::VectorXd s = ev.cwiseSqrt().cwiseInverse();
  return es.eigenvectors() * s.asDiagonal() * es.eigenvectors().transpose();
}

Eigen::MatrixXd symmetrize(const Eigen::MatrixXd& a) { return 0.5 * (a + a.transpose()); }

double relative_error(const Eigen::MatrixXd& got, const Eigen::MatrixXd& want) {
  const double denom = std::max(want.norm(), 1e-300);
  return (got - want).norm() / denom;
}

}  // namespace posicaic
