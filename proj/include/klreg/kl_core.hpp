#pragma once

#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "klreg/moments.hpp"

namespace klreg {

using EnvSpan = std::span<const EnvironmentMoments>;

/// (Sigma_X, beta, sigma^2) parametrization of a centered joint Gaussian on (X, Y).
struct RegressionTriplet {
    Eigen::MatrixXd sigma_x;
    Eigen::VectorXd beta;
    double resid_var = 1.0;
};

RegressionTriplet triplet_of(const EnvironmentMoments& m);

/// The regression function: [[S, S theta], [theta' S, s2 + theta' S theta]].
Eigen::MatrixXd pi_map(const Eigen::MatrixXd& sigma_x, double resid_var, const Eigen::VectorXd& theta);

/// KL(N(0, sigma1) || N(0, sigma2)). Throws std::invalid_argument on non-PD input.
double gaussian_kl(const Eigen::MatrixXd& sigma1, const Eigen::MatrixXd& sigma2);

/// Same divergence evaluated through the triplet decomposition
/// KL(Sx) + KL(s2) + (b1-b2)' S1 (b1-b2) / (2 s2_2).
double gaussian_kl_triplet(const RegressionTriplet& t1, const RegressionTriplet& t2);

/// Precision-weighted aggregates shared by every closed form. Weights are
/// 1/sigma_e^2, taken from resid_var unless overridden.
struct WeightedSums {
    Eigen::MatrixXd cov_sum;       // sum Sigma_e / s_e^2
    Eigen::MatrixXd prec_sum;      // sum Sigma_e^{-1} / s_e^2
    Eigen::VectorXd cov_beta_sum;  // sum Sigma_e beta_e / s_e^2
    Eigen::VectorXd beta_sum;      // sum beta_e / s_e^2
    double weight_sum = 0.0;       // sum 1 / s_e^2
    std::vector<double> weights;
    std::vector<Eigen::MatrixXd> inverses;  // Sigma_e^{-1}
};

WeightedSums weighted_sums(EnvSpan envs, std::span<const double> resid_var_override = {});

/// Minimizer of the unreparametrized loss: (sum S/s2)^{-1} (sum S beta / s2).
Eigen::VectorXd pooled_theta(EnvSpan envs);

/// sum_e (beta_e - beta - S_e^{-1} eta)' S_e (...) / (2 s_e^2)
double kl_loss(EnvSpan envs, const Eigen::VectorXd& beta, const Eigen::VectorXd& eta);

struct LossGradient {
    Eigen::VectorXd beta;
    Eigen::VectorXd eta;
};

LossGradient kl_loss_gradient(EnvSpan envs, const Eigen::VectorXd& beta, const Eigen::VectorXd& eta);
LossGradient kl_loss_gradient(const WeightedSums& sums, const Eigen::VectorXd& beta,
                              const Eigen::VectorXd& eta);

/// S_beta = (sum S^{-1}/s2)(sum S/s2) - (sum 1/s2)^2 I. Not symmetric in general.
Eigen::MatrixXd s_beta_matrix(const WeightedSums& sums);
Eigen::MatrixXd s_beta_matrix(EnvSpan envs);

/// Condition number of S_beta; round-off relative to the size of P A and w^2 counts as zero.
double s_beta_condition(const WeightedSums& sums, const Eigen::MatrixXd& s_beta);

struct Solvability {
    bool solvable = false;
    double condition = 0.0;
    std::optional<std::size_t> witness;  // index of an environment whose sufficient-condition matrix is invertible
};

/// Solvable iff cond(S_beta) < 1/tol. The witness search tests
/// S_{e*}^{-1} - (sum 1/s2)^{-1} (sum S^{-1}/s2) for every e* in order.
Solvability s_beta_solvable(EnvSpan envs, double tol = 1e-12);

struct KlFit {
    Eigen::VectorXd beta;
    Eigen::VectorXd eta;
    Eigen::MatrixXd s_beta;
    double cond_s_beta = 0.0;
    std::optional<Eigen::MatrixXd> cov;
    bool cov_plugin = true;  // cov uses estimated residual variances
    double loss_at_opt = 0.0;
    double stationarity_residual = 0.0;

    // penalized fits only
    double lambda = 0.0;
    int iterations = 0;
    double kkt_residual = 0.0;
    std::vector<double> objective_trace;
};

struct FitOptions {
    bool with_variance = false;
    /// Known sigma_e^2 per environment; empty = plug-in resid_var.
    std::vector<double> known_resid_var;
    double max_condition = 1e12;
};

/// Closed-form minimizer of kl_loss. Throws std::invalid_argument for fewer than
/// two environments and IllPosedError when cond(S_beta) > max_condition.
KlFit fit_kl(EnvSpan envs, const FitOptions& opts = {});

/// Conditional covariance of the plug-in estimator given the covariates.
/// The general route assembles W blockdiag(S_e^{-1}/n_e) W'; the equal-n route
/// is (1/n) S_beta^{-1} (sum S^{-1}/s2). Requires n_e > 0 for every environment.
Eigen::MatrixXd conditional_covariance(EnvSpan envs, std::span<const double> known_resid_var = {},
                                       bool force_general = false);

/// C = (sum 1/s2) (||sum S^{-1}/s2|| + sum ||S^{-1}|| / s2), spectral norms.
double robustness_constant(EnvSpan envs);

/// C * delta_sup^2
double robustness_bound(EnvSpan envs, double delta_sup);

}  // namespace klreg
