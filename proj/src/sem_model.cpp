#include "klreg/sem_model.hpp"

#include <cmath>
#include <stdexcept>

#include "klreg/errors.hpp"
#include "klreg/linalg.hpp"
#include "klreg/random.hpp"

namespace klreg {

namespace {

constexpr double kSingularCondition = 1e12;

bool invertible_i_minus(const Eigen::MatrixXd& b) {
    const Eigen::Index d = b.rows();
    if (!b.allFinite()) return false;
    return linalg::condition(Eigen::MatrixXd::Identity(d, d) - b) < kSingularCondition;
}

Eigen::MatrixXd sparse_signed_weights(Eigen::Index rows, Eigen::Index cols, bool strictly_lower,
                                      Rng& rng) {
    std::bernoulli_distribution edge(kConnectivityDensity);
    std::uniform_real_distribution<double> weight(-1.0, 1.0);
    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        const Eigen::Index end = strictly_lower ? i : cols;
        for (Eigen::Index j = 0; j < end; ++j) {
            const bool on = edge(rng);
            const double v = weight(rng);
            if (on) w(i, j) = v;
        }
    }
    return w;
}

}  // namespace

SemModel::SemModel(Eigen::MatrixXd b_xx_, Eigen::MatrixXd b_xh_, Eigen::VectorXd beta_star_,
                   Eigen::VectorXd eta0_, Eigen::MatrixXd sigma_h_)
    : b_xx(std::move(b_xx_)),
      b_xh(std::move(b_xh_)),
      beta_star(std::move(beta_star_)),
      eta0(std::move(eta0_)),
      sigma_h(std::move(sigma_h_)) {
    validate();
}

void SemModel::validate() const {
    const auto dd = d();
    const auto qq = q();
    if (dd < 1) throw std::invalid_argument("SemModel: covariate dimension must be >= 1");
    if (b_xx.rows() != dd || b_xx.cols() != dd)
        throw std::invalid_argument("SemModel: b_xx must be D x D");
    if (b_xh.rows() != dd || b_xh.cols() != qq)
        throw std::invalid_argument("SemModel: b_xh must be D x Q");
    if (sigma_h.rows() != qq || sigma_h.cols() != qq)
        throw std::invalid_argument("SemModel: sigma_h must be Q x Q");
    if (!invertible_i_minus(b_xx))
        throw std::invalid_argument("SemModel: (I - b_xx) is singular");
    if (qq > 0) {
        if (!linalg::is_symmetric(sigma_h, 1e-10))
            throw std::invalid_argument("SemModel: sigma_h is not symmetric");
        Eigen::LLT<Eigen::MatrixXd> llt(sigma_h);
        if (llt.info() != Eigen::Success)
            throw std::invalid_argument("SemModel: sigma_h is not positive definite");
    }
}

Eigen::MatrixXd SemModel::c_matrix() const {
    const Eigen::Index dd = d();
    return (Eigen::MatrixXd::Identity(dd, dd) - b_xx)
        .partialPivLu()
        .solve(Eigen::MatrixXd::Identity(dd, dd));
}

Eigen::VectorXd SemModel::eta_star() const {
    if (q() == 0) return Eigen::VectorXd::Zero(d());
    return c_matrix() * (b_xh * (sigma_h * eta0));
}

void EnvironmentNoiseSpec::validate() const {
    if (sigma_ex.rows() != sigma_ex.cols() || sigma_ex.rows() < 1)
        throw std::invalid_argument("EnvironmentNoiseSpec: sigma_ex must be square");
    if (!linalg::is_symmetric(sigma_ex, 1e-10))
        throw std::invalid_argument("EnvironmentNoiseSpec: sigma_ex is not symmetric");
    Eigen::LLT<Eigen::MatrixXd> llt(sigma_ex);
    if (llt.info() != Eigen::Success)
        throw std::invalid_argument("EnvironmentNoiseSpec: sigma_ex is not positive definite");
    if (!(sigma_ey > 0.0)) throw std::invalid_argument("EnvironmentNoiseSpec: sigma_ey must be > 0");
    if (kind.family == NoiseKind::Family::StudentT && !(kind.dof > 2.0))
        throw std::invalid_argument("EnvironmentNoiseSpec: Student-t degrees of freedom must be > 2");
}

void EnvironmentData::validate() const {
    if (x.rows() < 1) throw std::invalid_argument("EnvironmentData: need at least one sample");
    if (x.rows() != y.size())
        throw std::invalid_argument("EnvironmentData: x and y row counts differ");
}

PopulationMoments population_moments(const SemModel& model, const EnvironmentNoiseSpec& noise) {
    if (noise.sigma_ex.rows() != model.d())
        throw std::invalid_argument("population_moments: noise dimension does not match model");
    const Eigen::MatrixXd c = model.c_matrix();
    Eigen::MatrixXd inner = noise.sigma_ex;
    if (model.q() > 0) inner += model.b_xh * model.sigma_h * model.b_xh.transpose();

    PopulationMoments pm;
    pm.sigma_x = c * inner * c.transpose();
    pm.sigma_x = 0.5 * (pm.sigma_x + pm.sigma_x.transpose());
    pm.eta_star = model.eta_star();
    pm.sigma_xy = pm.sigma_x * model.beta_star + pm.eta_star;

    // Var(Y) = b' Sx b + 2 b' Cov(X,H) eta0 + eta0' Sh eta0 + sigma_ey, Cov(X,H) eta0 = eta*
    const auto& b = model.beta_star;
    pm.sigma_y = b.dot(pm.sigma_x * b) + 2.0 * b.dot(pm.eta_star) + noise.sigma_ey;
    if (model.q() > 0) pm.sigma_y += model.eta0.dot(model.sigma_h * model.eta0);
    return pm;
}

EnvironmentData sample_environment(const SemModel& model, const EnvironmentNoiseSpec& noise,
                                   Eigen::Index n, std::uint64_t seed, std::string env_id) {
    if (n < 1) throw std::invalid_argument("sample_environment: n must be >= 1");
    noise.validate();
    const Eigen::Index d = model.d();
    const Eigen::Index q = model.q();
    if (noise.sigma_ex.rows() != d)
        throw std::invalid_argument("sample_environment: noise dimension does not match model");

    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const bool heavy = noise.kind.family == NoiseKind::Family::StudentT;
    std::student_t_distribution<double> student(heavy ? noise.kind.dof : 3.0);
    const double t_scale = heavy ? std::sqrt((noise.kind.dof - 2.0) / noise.kind.dof) : 1.0;
    auto draw = [&]() { return heavy ? t_scale * student(rng) : normal(rng); };

    const Eigen::MatrixXd lx = noise.sigma_ex.llt().matrixL();
    Eigen::MatrixXd lh;
    if (q > 0) lh = model.sigma_h.llt().matrixL();
    const double sy = std::sqrt(noise.sigma_ey);

    // Rows of the noise are generated first, then the triangular/LU solve is batched.
    Eigen::MatrixXd eps_h(n, q), eps_x(n, d);
    Eigen::VectorXd eps_y(n);
    Eigen::VectorXd zh(q), zx(d);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index k = 0; k < q; ++k) zh(k) = normal(rng);
        for (Eigen::Index k = 0; k < d; ++k) zx(k) = draw();
        const double zy = draw();
        if (q > 0) eps_h.row(i) = (lh * zh).transpose();
        eps_x.row(i) = (lx * zx).transpose();
        eps_y(i) = sy * zy;
    }

    // (I - B_XX) X^T = B_XH H^T + eps_X^T
    Eigen::MatrixXd rhs = eps_x.transpose();
    if (q > 0) rhs += model.b_xh * eps_h.transpose();
    const Eigen::MatrixXd i_minus_b = Eigen::MatrixXd::Identity(d, d) - model.b_xx;
    Eigen::MatrixXd xt = i_minus_b.partialPivLu().solve(rhs);

    EnvironmentData out;
    out.x = xt.transpose();
    out.y = out.x * model.beta_star + eps_y;
    if (q > 0) out.y += eps_h * model.eta0;
    out.env_id = std::move(env_id);
    return out;
}

SemModel generate_baseline_model(Eigen::Index d, Eigen::Index q, Eigen::Index d0,
                                 std::uint64_t seed) {
    if (d < 1) throw std::invalid_argument("generate_baseline_model: d must be >= 1");
    if (q < 0) throw std::invalid_argument("generate_baseline_model: q must be >= 0");
    if (d0 < 0 || d0 > d) throw std::invalid_argument("generate_baseline_model: need 0 <= d0 <= d");
    Rng rng(seed);
    Eigen::MatrixXd b_xx = sparse_signed_weights(d, d, true, rng);
    Eigen::MatrixXd b_xh = sparse_signed_weights(d, q, false, rng);
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(d);
    beta.head(d0).setOnes();
    return SemModel(std::move(b_xx), std::move(b_xh), std::move(beta),
                    Eigen::VectorXd::Constant(q, 0.5), Eigen::MatrixXd::Identity(q, q));
}

Eigen::MatrixXd interpolate_noise_cov(const Eigen::MatrixXd& shared, const Eigen::MatrixXd& specific,
                                      double t) {
    if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("diversity t must lie in [0, 1]");
    if (shared.rows() != specific.rows() || shared.cols() != specific.cols())
        throw std::invalid_argument("interpolate_noise_cov: shape mismatch");
    if (t == 0.0) return shared;
    if (t == 1.0) return specific;
    return (1.0 - t) * shared + t * specific;
}

EnvironmentNoiseSpec generate_environment_noise(Eigen::Index d, std::uint64_t e_index,
                                                double diversity_t,
                                                const Eigen::MatrixXd& shared_base,
                                                std::uint64_t seed) {
    if (shared_base.rows() != d || shared_base.cols() != d)
        throw std::invalid_argument("generate_environment_noise: shared_base must be D x D");
    Rng rng(derive_seed(seed, {e_index}));
    EnvironmentNoiseSpec spec;
    const Eigen::MatrixXd own = random_spd(d, rng);
    spec.sigma_ex = interpolate_noise_cov(shared_base, own, diversity_t);
    std::normal_distribution<double> normal(0.0, 1.0);
    spec.sigma_ey = 1.0 + std::abs(normal(rng));
    spec.validate();
    return spec;
}

SemModel perturb_model(const SemModel& model, PerturbTarget target, double s, std::uint64_t seed) {
    if (!(s >= 0.0)) throw std::invalid_argument("perturb_model: scale must be >= 0");
    if (s == 0.0) return model;
    Rng rng(seed);
    SemModel out = model;
    switch (target) {
        case PerturbTarget::BXX: {
            for (int attempt = 0; attempt < kPerturbRetries; ++attempt) {
                Eigen::MatrixXd cand = model.b_xx + s * standard_normal_matrix(model.d(), model.d(), rng);
                if (invertible_i_minus(cand)) {
                    out.b_xx = std::move(cand);
                    return out;
                }
            }
            throw ResampleExhaustedError("perturb_model: (I - B_XX) stayed singular after " +
                                         std::to_string(kPerturbRetries) + " draws");
        }
        case PerturbTarget::BXH:
            out.b_xh = model.b_xh + s * standard_normal_matrix(model.d(), model.q(), rng);
            return out;
        case PerturbTarget::SigmaH: {
            Eigen::MatrixXd m = model.sigma_h + s * standard_normal_matrix(model.q(), model.q(), rng);
            m = 0.5 * (m + m.transpose());
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
            Eigen::VectorXd ev = es.eigenvalues().cwiseMax(1e-6);
            m = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
            out.sigma_h = 0.5 * (m + m.transpose());
            return out;
        }
    }
    throw std::invalid_argument("perturb_model: unknown target");
}

std::string to_string(PerturbTarget t) {
    switch (t) {
        case PerturbTarget::BXX: return "bxx";
        case PerturbTarget::BXH: return "bxh";
        case PerturbTarget::SigmaH: return "sigma_h";
    }
    return "?";
}

PerturbTarget perturb_target_from_string(const std::string& s) {
    if (s == "bxx" || s == "BXX") return PerturbTarget::BXX;
    if (s == "bxh" || s == "BXH") return PerturbTarget::BXH;
    if (s == "sigma_h" || s == "SigmaH") return PerturbTarget::SigmaH;
    throw std::invalid_argument("unknown perturbation target: " + s);
}

}  // namespace klreg
