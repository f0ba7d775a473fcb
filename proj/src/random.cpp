#include "klreg/random.hpp"

namespace klreg {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> keys) {
    std::uint64_t h = splitmix64(base);
    for (auto k : keys) h = splitmix64(h ^ splitmix64(k + 0x632be59bd9b4e019ULL));
    return h;
}

Eigen::MatrixXd standard_normal_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::MatrixXd z(rows, cols);
    // row-major fill order so draws are easy to regenerate
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) z(i, j) = normal(rng);
    return z;
}

Eigen::MatrixXd random_spd(Eigen::Index d, Rng& rng, double min_eig, double max_eig) {
    Eigen::MatrixXd g = standard_normal_matrix(d, d, rng);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(d, d);
    std::uniform_real_distribution<double> unif(min_eig, max_eig);
    Eigen::VectorXd lambda(d);
    for (Eigen::Index i = 0; i < d; ++i) lambda(i) = unif(rng);
    Eigen::MatrixXd s = q * lambda.asDiagonal() * q.transpose();
    return 0.5 * (s + s.transpose());
}

}  // namespace klreg
