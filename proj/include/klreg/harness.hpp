#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include <Eigen/Dense>

#include "klreg/eval.hpp"
#include "klreg/lasso.hpp"
#include "klreg/moments.hpp"
#include "klreg/sem_model.hpp"

namespace klreg {

enum class ExperimentKind {
    SampleSweep,            // value = samples per environment
    DiversitySweep,         // value = interpolation t in [0, 1]
    ConfoundingScaleSweep,  // value = scale s applied to eta0
    LatentDimSweep,         // value = Q
    SparsitySweep,          // value = d0
    SplitComparison,        // value = parts each environment is split into (1 = unsplit)
    StudentTSweep,          // value = degrees of freedom; <= 0 means Gaussian
    MisspecificationSweep,  // value = perturbation scale s
    RealData,               // no sweep; estimators run on ingested data
};

std::string to_string(ExperimentKind k);
ExperimentKind experiment_kind_from_string(const std::string& s);

enum class Estimator { Kl, LassoKl, AvgOls, PooledTheta, Zero };

std::string to_string(Estimator e);
Estimator estimator_from_string(const std::string& s);
std::vector<Estimator> parse_estimators(const std::string& comma_list);

/// Penalty for lasso_kl: a fixed lambda, or cross-fitting over a relative grid.
struct LassoSpec {
    std::optional<double> lambda;  // absolute; unset = cross-fit
    int folds = 5;
    int grid_points = 20;
    double grid_ratio = 1e-4;
    int max_iter = 10000;
    double tol = 1e-8;
};

struct ExperimentConfig {
    ExperimentKind kind = ExperimentKind::SampleSweep;
    Eigen::Index d = 100;
    Eigen::Index q = 2;
    Eigen::Index d0 = 10;
    std::size_t e_count = 4;
    Eigen::Index n_per_env = 5000;
    std::vector<double> sweep_values;
    int replicates = 50;
    std::uint64_t seed = 0;
    std::vector<Estimator> estimators{Estimator::Kl, Estimator::LassoKl, Estimator::AvgOls,
                                      Estimator::PooledTheta, Estimator::Zero};
    LassoSpec lasso;

    // fixed values of the axes that are not being swept
    double diversity_t = 1.0;
    double confounding_scale = 1.0;
    double noise_dof = 0.0;  // <= 0: Gaussian
    PerturbTarget perturb_target = PerturbTarget::BXX;

    double jitter = 0.0;
    double dense_support_threshold = 0.1;
    int threads = 0;  // 0 = hardware concurrency
    std::string data_dir;  // RealData only

    /// Throws std::invalid_argument describing the first problem found.
    void validate() const;
};

/// Reads a config document. A "preset": "desk" key sets d = 20 before the
/// remaining keys are applied. Unknown keys are rejected.
ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& cfg);

struct ReportRow {
    double value = 0.0;
    int replicate = 0;
    std::uint64_t replicate_seed = 0;
    Estimator estimator = Estimator::Kl;
    double mse = 0.0;
    double f1 = 0.0;
    double wall_ms = 0.0;
};

struct FailedCell {
    double value = 0.0;
    int replicate = 0;
    Estimator estimator = Estimator::Kl;
    std::string reason;
};

struct CellSummary {
    double value = 0.0;
    Estimator estimator = Estimator::Kl;
    std::size_t count = 0;
    double mse_median = 0.0, mse_q1 = 0.0, mse_q3 = 0.0;
    double f1_median = 0.0, f1_q1 = 0.0, f1_q3 = 0.0;
};

struct ExperimentReport {
    ExperimentConfig config;
    std::vector<ReportRow> rows;        // sorted by value, replicate, estimator
    std::vector<FailedCell> failures;   // same order
    std::vector<CellSummary> summary;   // sorted by value, estimator
    nlohmann::json real_data;           // RealData: estimates per estimator

    /// Median mse for (value, estimator); NaN when the cell has no rows.
    double median_mse(double value, Estimator e) const;
    double median_f1(double value, Estimator e) const;
};

/// Linear-interpolation quantile (p in [0, 1]) of an unsorted sample.
double quantile(std::vector<double> xs, double p);

std::vector<CellSummary> summarize(const std::vector<ReportRow>& rows, std::span<const double> values,
                                   std::span<const Estimator> estimators);

ExperimentReport run_experiment(const ExperimentConfig& cfg);

void write_rows_csv(const ExperimentReport& r, std::ostream& out);
void write_summary_csv(const ExperimentReport& r, std::ostream& out);
void write_failures_csv(const ExperimentReport& r, std::ostream& out);
nlohmann::json report_sidecar(const ExperimentReport& r);

/// report.csv, summary.csv, failures.csv and report.json in `dir`.
void write_report(const ExperimentReport& r, const std::filesystem::path& dir);

/// Row equality ignoring wall time.
bool same_rows(const ExperimentReport& a, const ExperimentReport& b);

/// Estimates of every requested estimator on one set of environments.
struct EstimatorOutcome {
    Estimator estimator = Estimator::Kl;
    std::optional<Eigen::VectorXd> beta;
    std::optional<double> lambda;  // lasso_kl
    std::string failure;
    double wall_ms = 0.0;
};

std::vector<EstimatorOutcome> run_estimators(std::span<const EnvironmentData> data,
                                             std::span<const Estimator> estimators, const LassoSpec& lasso,
                                             const MomentOptions& mopts, std::uint64_t seed);

// Edge ranking

/// Environments of one target gene: X holds the regulator columns, y the target.
struct TargetData {
    std::string name;
    std::vector<EnvironmentData> envs;
};

struct RankOptions {
    int grid_points = 50;
    double grid_ratio = 1e-4;
    bool standardize = false;  // scale regulator columns to unit pooled variance per target
    MomentOptions moments;
};

struct RankResult {
    EdgeRanking ranking;  // candidate index = target_index * regulators + regulator_index
    std::vector<std::string> regulators;
    std::vector<std::string> targets;
    std::vector<std::pair<std::string, std::string>> skipped;  // (target, reason)
};

/// Per target, a lasso path over a grid relative to that target's lambda_max;
/// an edge's score is the entry lambda divided by lambda_max (0 if it never
/// enters). Failed targets are skipped and recorded; if every target fails,
/// EmptyRankingError is thrown. `truth` holds (regulator, target) name pairs.
RankResult rank_edges(std::span<const TargetData> targets, const std::vector<std::string>& regulators,
                      const std::vector<std::pair<std::string, std::string>>& truth,
                      const RankOptions& opts = {});

/// Gene tables (one matrix of all genes per environment) to per-target data.
std::vector<TargetData> slice_targets(std::span<const EnvironmentData> gene_tables,
                                      const std::vector<std::string>& genes,
                                      const std::vector<std::string>& regulators,
                                      const std::vector<std::string>& targets);

struct SyntheticGrn {
    std::vector<std::string> genes;  // regulators first, then targets
    std::vector<std::string> regulators;
    std::vector<std::string> targets;
    std::vector<std::pair<std::string, std::string>> truth;
    std::vector<EnvironmentData> tables;  // y is empty; x holds every gene
};

/// Regulators follow generate_baseline_model(regulators, q, 0, seed) with
/// diverse environment noise. Each target is one extra node with
/// `parents_per_target` regulators chosen at random (weight 1) and the
/// model's latent loading eta0.
SyntheticGrn generate_synthetic_grn(Eigen::Index regulators, Eigen::Index q, int targets,
                                    int parents_per_target, std::size_t e_count, Eigen::Index n,
                                    std::uint64_t seed);

void write_ranking_csv(const RankResult& r, std::ostream& out);

}  // namespace klreg
