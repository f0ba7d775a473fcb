#include "klreg/moments.hpp"

#include <limits>
#include <sstream>
#include <stdexcept>

#include "klreg/errors.hpp"
#include "klreg/linalg.hpp"

namespace klreg {

namespace {

std::string env_label(const std::string& id) { return id.empty() ? "<unnamed>" : id; }

EnvironmentMoments from_blocks(Eigen::MatrixXd sigma_x, Eigen::VectorXd sigma_xy, double sigma_y,
                               Eigen::Index n, std::string env_id, const MomentOptions& opts) {
    if (opts.jitter < 0.0) throw std::invalid_argument("moments: jitter must be >= 0");
    if (opts.jitter > 0.0) sigma_x.diagonal().array() += opts.jitter;
    sigma_x = 0.5 * (sigma_x + sigma_x.transpose());

    const double cond = linalg::spd_condition(sigma_x);
    if (!(cond <= opts.max_condition)) {
        std::ostringstream msg;
        msg << "environment " << env_label(env_id) << ": covariate covariance is singular "
            << "(condition number " << cond << " exceeds " << opts.max_condition << ")";
        throw SingularCovarianceError(env_id, cond, msg.str());
    }

    EnvironmentMoments m;
    Eigen::LLT<Eigen::MatrixXd> llt(sigma_x);
    m.beta_e = llt.solve(sigma_xy);
    m.resid_var = sigma_y - m.beta_e.dot(sigma_x * m.beta_e);
    if (!(m.resid_var > 0.0)) {
        std::ostringstream msg;
        msg << "environment " << env_label(env_id)
            << ": joint covariance is singular (non-positive residual variance " << m.resid_var
            << ")";
        throw SingularCovarianceError(env_id, cond, msg.str());
    }
    m.sigma_x = std::move(sigma_x);
    m.sigma_xy = std::move(sigma_xy);
    m.sigma_y = sigma_y;
    m.n = n;
    m.condition = cond;
    m.env_id = std::move(env_id);
    return m;
}

}  // namespace

Eigen::MatrixXd empirical_joint(const EnvironmentData& data) {
    data.validate();
    const Eigen::Index n = data.n();
    const Eigen::Index d = data.d();
    Eigen::MatrixXd z(n, d + 1);
    z.leftCols(d) = data.x;
    z.col(d) = data.y;
    const Eigen::RowVectorXd mean = z.colwise().mean();
    z.rowwise() -= mean;
    Eigen::MatrixXd cov = (z.transpose() * z) / static_cast<double>(n);
    return 0.5 * (cov + cov.transpose());
}

EnvironmentMoments estimate_moments(const EnvironmentData& data, const MomentOptions& opts) {
    data.validate();
    const Eigen::Index d = data.d();
    if (data.n() <= d) {
        std::ostringstream msg;
        msg << "environment " << env_label(data.env_id) << ": " << data.n()
            << " samples for " << d << " covariates; need n > D for an invertible covariance";
        throw SingularCovarianceError(data.env_id, std::numeric_limits<double>::infinity(),
                                      msg.str());
    }
    return moments_from_joint(empirical_joint(data), data.n(), data.env_id, opts);
}

EnvironmentMoments moments_from_joint(const Eigen::MatrixXd& joint, Eigen::Index n,
                                      std::string env_id, const MomentOptions& opts) {
    if (joint.rows() != joint.cols() || joint.rows() < 2)
        throw std::invalid_argument("moments_from_joint: need a square (D+1)x(D+1) matrix");
    const Eigen::Index d = joint.rows() - 1;
    return from_blocks(joint.topLeftCorner(d, d), joint.topRightCorner(d, 1), joint(d, d), n,
                       std::move(env_id), opts);
}

EnvironmentMoments moments_from_population(const PopulationMoments& pm, std::string env_id) {
    return from_blocks(pm.sigma_x, pm.sigma_xy, pm.sigma_y, 0, std::move(env_id), MomentOptions{});
}

Eigen::MatrixXd joint_covariance(const EnvironmentMoments& m) {
    const Eigen::Index d = m.d();
    Eigen::MatrixXd j(d + 1, d + 1);
    const Eigen::VectorXd sb = m.sigma_x * m.beta_e;
    j.topLeftCorner(d, d) = m.sigma_x;
    j.topRightCorner(d, 1) = sb;
    j.bottomLeftCorner(1, d) = sb.transpose();
    j(d, d) = m.resid_var + m.beta_e.dot(sb);
    return j;
}

}  // namespace klreg
