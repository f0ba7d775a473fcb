#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include <Eigen/Dense>

namespace klreg {

using Rng = std::mt19937_64;

/// Mixes a base seed with an ordered list of indices (splitmix64 chain).
/// Used to give every replicate, sweep cell and environment a disjoint stream.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> keys);

Eigen::MatrixXd standard_normal_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng);

/// Q * diag(lambda) * Q^T with Q orthogonal (QR of a Gaussian matrix) and
/// lambda ~ Uniform[min_eig, max_eig].
Eigen::MatrixXd random_spd(Eigen::Index d, Rng& rng, double min_eig = 0.3, double max_eig = 2.5);

}  // namespace klreg
