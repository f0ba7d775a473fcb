#pragma once

#include <cstddef>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "klreg/moments.hpp"

namespace klreg {

/// Least squares coefficient of one environment (same as estimate_moments().beta_e).
Eigen::VectorXd ols_per_environment(const EnvironmentData& data, const MomentOptions& opts = {});

/// Unweighted mean of per-environment OLS coefficients.
Eigen::VectorXd average_ols(std::span<const EnvironmentData> datasets, const MomentOptions& opts = {});
Eigen::VectorXd average_ols(std::span<const EnvironmentMoments> envs);

/// (1/D) ||beta_hat - beta_star||^2
double mse(const Eigen::VectorXd& beta_hat, const Eigen::VectorXd& beta_star);

struct SupportMetrics {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

inline constexpr double kPenalizedSupportThreshold = 1e-6;

/// Support = {j : |beta_hat_j| > threshold} against {j : beta_star_j != 0}.
/// Precision is 1 when nothing is predicted, recall is 1 when nothing is true.
SupportMetrics support_metrics(const Eigen::VectorXd& beta_hat, const Eigen::VectorXd& beta_star,
                               double threshold);

struct ScoredCandidate {
    std::size_t index = 0;  // candidate id; ties are broken by ascending index
    double score = 0.0;
    std::string label;      // free-form, e.g. "regulator->target"
};

struct EdgeRanking {
    std::vector<ScoredCandidate> scores;
    std::set<std::size_t> truth;
};

/// Candidates sorted by descending score, ties by ascending index.
std::vector<ScoredCandidate> sorted_candidates(const EdgeRanking& ranking);

/// Step-interpolated average precision: sum_k (R_k - R_{k-1}) P_k.
/// Throws std::invalid_argument when truth is empty.
double aupr(const EdgeRanking& ranking);

struct PrPoint {
    double threshold = 0.0;
    double precision = 0.0;
    double recall = 0.0;
};

std::vector<PrPoint> pr_curve(const EdgeRanking& ranking);
void write_pr_csv(const std::vector<PrPoint>& curve, std::ostream& out);

}  // namespace klreg
