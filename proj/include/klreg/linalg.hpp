#pragma once

#include <Eigen/Dense>

namespace klreg::linalg {

/// Ratio of extreme eigenvalues of a symmetric matrix; +inf when the smallest
/// is not strictly positive.
double spd_condition(const Eigen::MatrixXd& a);

/// Ratio of extreme singular values of a general square matrix; +inf when
/// singular. For a matrix formed as a difference of terms of size `scale`,
/// singular values at round-off level relative to `scale` count as zero.
double condition(const Eigen::MatrixXd& a, double scale = 0.0);

bool is_symmetric(const Eigen::MatrixXd& a, double tol = 1e-10);

/// Inverse of an SPD matrix via Cholesky solve against the identity.
/// Throws std::invalid_argument if the factorization fails.
Eigen::MatrixXd spd_inverse(const Eigen::MatrixXd& a);

/// log det of an SPD matrix; throws std::invalid_argument if not PD.
double spd_logdet(const Eigen::MatrixXd& a);

/// Spectral norm of a symmetric matrix.
double sym_spectral_norm(const Eigen::MatrixXd& a);

}  // namespace klreg::linalg
