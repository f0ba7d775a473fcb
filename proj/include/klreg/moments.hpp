#pragma once

#include <string>

#include <Eigen/Dense>

#include "klreg/sem_model.hpp"

namespace klreg {

/// Second moments of one environment in both parametrizations: the raw joint
/// blocks (sigma_x, sigma_xy, sigma_y) and the regression triplet
/// (sigma_x, beta_e, resid_var).
struct EnvironmentMoments {
    Eigen::MatrixXd sigma_x;
    Eigen::VectorXd sigma_xy;
    double sigma_y = 0.0;
    Eigen::VectorXd beta_e;
    double resid_var = 0.0;
    Eigen::Index n = 0;  // 0 = population-exact
    double condition = 1.0;
    std::string env_id;

    Eigen::Index d() const { return sigma_x.rows(); }
};

struct MomentOptions {
    double max_condition = 1e12;
    double jitter = 0.0;  // ridge tau added to sigma_x; off by default
};

/// Mean-centered, 1/n-normalized moments. Throws SingularCovarianceError when
/// n <= D or cond(sigma_x) > max_condition.
EnvironmentMoments estimate_moments(const EnvironmentData& data, const MomentOptions& opts = {});

/// Triplet extraction from a joint (D+1)x(D+1) covariance.
EnvironmentMoments moments_from_joint(const Eigen::MatrixXd& joint, Eigen::Index n = 0,
                                      std::string env_id = "", const MomentOptions& opts = {});

EnvironmentMoments moments_from_population(const PopulationMoments& pm, std::string env_id = "");

/// Pi((sigma_x, resid_var), beta_e)
Eigen::MatrixXd joint_covariance(const EnvironmentMoments& m);

/// Raw (1/n, centered) empirical joint covariance of [X, y].
Eigen::MatrixXd empirical_joint(const EnvironmentData& data);

}  // namespace klreg
