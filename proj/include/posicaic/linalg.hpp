#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>

namespace posicaic {

// Warnings (condition numbers, non-monotone penalties) go through this sink.
using WarningHandler = std::function<void(const std::string&)>;
void set_warning_handler(WarningHandler handler);
void warn(const std::string& message);

inline constexpr double kCondWarn = 1e10;
inline constexpr double kCondError = 1e14;

// Cholesky of a symmetric positive definite matrix with the condition guard.
// Throws NumericalError on failure or when the estimated condition exceeds kCondError.
Eigen::LLT<Eigen::MatrixXd> guarded_llt(const Eigen::MatrixXd& a, const char* what, int cluster = -1);

Eigen::MatrixXd spd_inverse(const Eigen::MatrixXd& a, const char* what, int cluster = -1);
double spd_logdet(const Eigen::MatrixXd& a, const char* what, int cluster = -1);

// Symmetric square root and inverse square root through the eigendecomposition.
// sym_sqrt clips eigenvalues below zero (PSD input within rounding).
Eigen::MatrixXd sym_sqrt(const Eigen::MatrixXd& a);
Eigen::MatrixXd sym_inv_sqrt(const Eigen::MatrixXd& a, const char* what);

Eigen::MatrixXd symmetrize(const Eigen::MatrixXd& a);

double relative_error(const Eigen::MatrixXd& got, const Eigen::MatrixXd& want);

}  // namespace posicaic
