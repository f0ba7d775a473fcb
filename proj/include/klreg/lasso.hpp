#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "klreg/kl_core.hpp"

namespace klreg {

struct LassoConfig {
    double lambda = 0.0;
    int max_iter = 10000;
    double tol = 1e-8;
    std::optional<std::vector<double>> path_grid;
    bool record_trace = false;
};

/// The KL loss with eta profiled out exactly:
///   f(beta) = min_eta L(beta, eta) = 1/2 beta' H beta - g' beta + c0,
/// H = A - w^2 P^{-1}, g = c - w P^{-1} b, where A = sum S/s2, P = sum S^{-1}/s2,
/// w = sum 1/s2, c = sum S beta_e / s2, b = sum beta_e / s2.
class ProfiledLoss {
public:
    explicit ProfiledLoss(EnvSpan envs);

    Eigen::Index dim() const { return hessian_.rows(); }
    const Eigen::MatrixXd& hessian() const { return hessian_; }
    const Eigen::VectorXd& linear() const { return linear_; }

    /// eta minimizing L(beta, .)
    Eigen::VectorXd eta_of(const Eigen::VectorXd& beta) const;
    /// grad_beta L(beta, eta_of(beta))
    Eigen::VectorXd gradient(const Eigen::VectorXd& beta) const;
    /// L(beta, eta_of(beta)), exact including the constant term
    double value(const Eigen::VectorXd& beta) const;
    /// ||grad f(0)||_inf: smallest lambda with an all-zero solution
    double lambda_max() const;

private:
    WeightedSums sums_;
    Eigen::LLT<Eigen::MatrixXd> prec_llt_;
    Eigen::MatrixXd hessian_;
    Eigen::VectorXd linear_;
    double constant_ = 0.0;
};

double lambda_max(EnvSpan envs);

/// Worst KKT violation of beta for the penalized profiled problem.
double kkt_residual(const ProfiledLoss& loss, const Eigen::VectorXd& beta, double lambda);

/// Minimizes L(beta, eta) + lambda ||beta||_1 (eta unpenalized). Proximal
/// gradient on beta with backtracking and a monotone momentum step; eta is
/// profiled out exactly. Once the support settles, an exact solve on the
/// active set is accepted if it satisfies the KKT conditions.
/// Throws ConvergenceError after max_iter iterations.
KlFit fit_lasso(EnvSpan envs, const LassoConfig& cfg,
                const std::optional<Eigen::VectorXd>& warm_start = std::nullopt);
KlFit fit_lasso(const ProfiledLoss& loss, EnvSpan envs, const LassoConfig& cfg,
                const std::optional<Eigen::VectorXd>& warm_start = std::nullopt);

struct LassoPath {
    std::vector<double> lambdas;
    std::vector<KlFit> fits;
    /// Largest grid lambda at which each coefficient is nonzero; 0 if it never enters.
    Eigen::VectorXd entry_lambda;
};

/// log-spaced, decreasing: points values over [ratio, 1] * lambda_max
std::vector<double> default_grid(double lambda_max, int points = 30, double ratio = 1e-4);

/// Warm-started fits along a strictly decreasing grid.
LassoPath lasso_path(EnvSpan envs, std::span<const double> grid, const LassoConfig& base = {});

/// CSV rows: lambda,index,value,entry_lambda
void write_path_csv(const LassoPath& path, std::ostream& out);

struct CrossFitResult {
    double lambda = 0.0;
    std::vector<double> grid;
    std::vector<double> heldout_loss;  // summed over folds, one per grid point
};

/// K-fold cross-fitting inside each environment: moments are estimated on the
/// training part of every environment, the penalized fit is scored by kl_loss
/// on the held-out moments. An empty grid means default_grid over the full-data
/// lambda_max.
CrossFitResult select_lambda_cross_fit(std::span<const EnvironmentData> data,
                                       std::span<const double> grid, int folds,
                                       std::uint64_t seed, const MomentOptions& mopts = {});

}  // namespace klreg
