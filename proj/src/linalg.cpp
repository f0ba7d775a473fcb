#include "klreg/linalg.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace klreg::linalg {

double spd_condition(const Eigen::MatrixXd& a) {
    if (a.size() == 0) return 1.0;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a, Eigen::EigenvaluesOnly);
    const double lo = es.eigenvalues().minCoeff();
    const double hi = es.eigenvalues().maxCoeff();
    if (!(lo > 0.0)) return std::numeric_limits<double>::infinity();
    return hi / lo;
}

double condition(const Eigen::MatrixXd& a, double scale) {
    if (a.size() == 0) return 1.0;
    if (!a.allFinite()) return std::numeric_limits<double>::infinity();
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a);
    const auto& s = svd.singularValues();
    const double lo = s(s.size() - 1);
    const double floor = 16.0 * static_cast<double>(a.rows()) * std::numeric_limits<double>::epsilon() * scale;
    if (!(lo > floor)) return std::numeric_limits<double>::infinity();
    return s(0) / lo;
}

bool is_symmetric(const Eigen::MatrixXd& a, double tol) {
    if (a.rows() != a.cols()) return false;
    const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
    return (a - a.transpose()).cwiseAbs().maxCoeff() <= tol * scale;
}

Eigen::MatrixXd spd_inverse(const Eigen::MatrixXd& a) {
    Eigen::LLT<Eigen::MatrixXd> llt(a);
    if (llt.info() != Eigen::Success) throw std::invalid_argument("matrix is not positive definite");
    return llt.solve(Eigen::MatrixXd::Identity(a.rows(), a.cols()));
}

double spd_logdet(const Eigen::MatrixXd& a) {
    Eigen::LLT<Eigen::MatrixXd> llt(a);
    if (llt.info() != Eigen::Success) throw std::invalid_argument("matrix is not positive definite");
    return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

double sym_spectral_norm(const Eigen::MatrixXd& a) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a, Eigen::EigenvaluesOnly);
    return es.eigenvalues().cwiseAbs().maxCoeff();
}

}  // namespace klreg::linalg
