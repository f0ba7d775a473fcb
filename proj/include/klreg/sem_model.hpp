#pragma once

#include <cstdint>
#include <string>

#include <Eigen/Dense>

namespace klreg {

/// Linear SEM with latent confounders H:
///   H = eps_H,  X = B_XX X + B_XH H + eps_X,  Y = beta*^T X + eta0^T H + eps_Y.
/// The structural part is shared by every environment; only the noise
/// covariances of eps_X and eps_Y change between environments.
struct SemModel {
    Eigen::MatrixXd b_xx;       // D x D
    Eigen::MatrixXd b_xh;       // D x Q
    Eigen::VectorXd beta_star;  // D
    Eigen::VectorXd eta0;       // Q
    Eigen::MatrixXd sigma_h;    // Q x Q, SPD

    SemModel() = default;

    /// Validates shapes, invertibility of (I - b_xx) and positive definiteness
    /// of sigma_h. Throws std::invalid_argument.
    SemModel(Eigen::MatrixXd b_xx, Eigen::MatrixXd b_xh, Eigen::VectorXd beta_star,
             Eigen::VectorXd eta0, Eigen::MatrixXd sigma_h);

    Eigen::Index d() const { return beta_star.size(); }
    Eigen::Index q() const { return eta0.size(); }

    void validate() const;

    /// C = (I - B_XX)^{-1}
    Eigen::MatrixXd c_matrix() const;

    /// eta* = C B_XH Sigma_H eta0, the environment-invariant confounding direction.
    Eigen::VectorXd eta_star() const;
};

struct NoiseKind {
    enum class Family { Gaussian, StudentT };
    Family family = Family::Gaussian;
    double dof = 0.0;  // only meaningful for StudentT, must be > 2

    static NoiseKind gaussian() { return {}; }
    static NoiseKind student_t(double dof) { return {Family::StudentT, dof}; }
    bool operator==(const NoiseKind&) const = default;
};

/// Per-environment noise: covariance of eps_X and variance of eps_Y.
struct EnvironmentNoiseSpec {
    Eigen::MatrixXd sigma_ex;
    double sigma_ey = 1.0;
    NoiseKind kind;

    void validate() const;
};

struct EnvironmentData {
    Eigen::MatrixXd x;  // n_e x D
    Eigen::VectorXd y;  // n_e
    std::string env_id;

    Eigen::Index n() const { return x.rows(); }
    Eigen::Index d() const { return x.cols(); }
    void validate() const;
};

struct PopulationMoments {
    Eigen::MatrixXd sigma_x;
    Eigen::VectorXd sigma_xy;
    double sigma_y = 0.0;
    Eigen::VectorXd eta_star;
};

PopulationMoments population_moments(const SemModel& model, const EnvironmentNoiseSpec& noise);

/// Draws n i.i.d. samples of (X, Y). eps_H is always Gaussian; eps_X and eps_Y
/// follow noise.kind. Student-t draws are rescaled by sqrt((nu-2)/nu) so that
/// the covariance equals the specified one.
EnvironmentData sample_environment(const SemModel& model, const EnvironmentNoiseSpec& noise,
                                   Eigen::Index n, std::uint64_t seed, std::string env_id = "");

/// Baseline random model: beta* = (1 x d0, 0 x (d-d0)), eta0 = 0.5, Sigma_H = I.
/// B_XX strictly lower triangular and B_XH dense, entries Bernoulli(0.3) * U[-1, 1].
SemModel generate_baseline_model(Eigen::Index d, Eigen::Index q, Eigen::Index d0,
                                 std::uint64_t seed);

inline constexpr double kConnectivityDensity = 0.3;

/// (1 - t) * shared + t * specific
Eigen::MatrixXd interpolate_noise_cov(const Eigen::MatrixXd& shared, const Eigen::MatrixXd& specific,
                                      double t);

/// Sigma_{e,eps_X} = (1-t) Sigma_0 + t Sigma_e with a fresh random SPD Sigma_e
/// per environment; Sigma_{e,eps_Y} = 1 + |Z_e|.
EnvironmentNoiseSpec generate_environment_noise(Eigen::Index d, std::uint64_t e_index,
                                                double diversity_t,
                                                const Eigen::MatrixXd& shared_base,
                                                std::uint64_t seed);

enum class PerturbTarget { BXX, BXH, SigmaH };

/// Adds s * Z (Z standard Gaussian, drawn row-major from `seed`) to the chosen
/// block. For SigmaH the result is symmetrized and its eigenvalues clamped at
/// 1e-6. A B_XX draw that makes (I - B_XX) singular is redrawn up to 10 times.
SemModel perturb_model(const SemModel& model, PerturbTarget target, double s, std::uint64_t seed);

inline constexpr int kPerturbRetries = 10;

std::string to_string(PerturbTarget t);
PerturbTarget perturb_target_from_string(const std::string& s);

}  // namespace klreg
