#include "klreg/kl_core.hpp"

#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "klreg/errors.hpp"
#include "klreg/linalg.hpp"

namespace klreg {

namespace {

void check_envs(EnvSpan envs, const char* who) {
    if (envs.empty()) throw std::invalid_argument(std::string(who) + ": need at least one environment");
    const Eigen::Index d = envs.front().d();
    for (const auto& m : envs) {
        if (m.d() != d || m.beta_e.size() != d)
            throw std::invalid_argument(std::string(who) + ": environments have inconsistent dimensions");
        if (!(m.resid_var > 0.0))
            throw std::invalid_argument(std::string(who) + ": residual variance must be > 0");
    }
}

double rel(double num, double den) { return num / std::max(den, 1e-300); }

}  // namespace

RegressionTriplet triplet_of(const EnvironmentMoments& m) { return {m.sigma_x, m.beta_e, m.resid_var}; }

Eigen::MatrixXd pi_map(const Eigen::MatrixXd& sigma_x, double resid_var, const Eigen::VectorXd& theta) {
    const Eigen::Index d = sigma_x.rows();
    if (sigma_x.cols() != d || theta.size() != d)
        throw std::invalid_argument("pi_map: dimension mismatch");
    if (!(resid_var > 0.0)) throw std::invalid_argument("pi_map: resid_var must be > 0");
    const Eigen::VectorXd st = sigma_x * theta;
    Eigen::MatrixXd out(d + 1, d + 1);
    out.topLeftCorner(d, d) = sigma_x;
    out.topRightCorner(d, 1) = st;
    out.bottomLeftCorner(1, d) = st.transpose();
    out(d, d) = resid_var + theta.dot(st);
    return out;
}

double gaussian_kl(const Eigen::MatrixXd& sigma1, const Eigen::MatrixXd& sigma2) {
    if (sigma1.rows() != sigma2.rows() || sigma1.cols() != sigma2.cols() || sigma1.rows() != sigma1.cols())
        throw std::invalid_argument("gaussian_kl: shape mismatch");
    Eigen::LLT<Eigen::MatrixXd> l1(sigma1), l2(sigma2);
    if (l1.info() != Eigen::Success || l2.info() != Eigen::Success)
        throw std::invalid_argument("gaussian_kl: covariance is not positive definite");
    const double k = static_cast<double>(sigma1.rows());
    const double logdet1 = 2.0 * l1.matrixLLT().diagonal().array().log().sum();
    const double logdet2 = 2.0 * l2.matrixLLT().diagonal().array().log().sum();
    const double trace = l2.solve(sigma1).trace();
    return std::max(0.0, 0.5 * (trace - k + logdet2 - logdet1));
}

double gaussian_kl_triplet(const RegressionTriplet& t1, const RegressionTriplet& t2) {
    if (!(t1.resid_var > 0.0) || !(t2.resid_var > 0.0))
        throw std::invalid_argument("gaussian_kl_triplet: residual variance must be > 0");
    const double kl_x = gaussian_kl(t1.sigma_x, t2.sigma_x);
    const double ratio = t1.resid_var / t2.resid_var;
    const double kl_y = 0.5 * (ratio - 1.0 - std::log(ratio));
    const Eigen::VectorXd diff = t1.beta - t2.beta;
    return kl_x + kl_y + 0.5 * diff.dot(t1.sigma_x * diff) / t2.resid_var;
}

WeightedSums weighted_sums(EnvSpan envs, std::span<const double> resid_var_override) {
    check_envs(envs, "weighted_sums");
    if (!resid_var_override.empty() && resid_var_override.size() != envs.size())
        throw std::invalid_argument("weighted_sums: one known residual variance per environment required");
    const Eigen::Index d = envs.front().d();
    WeightedSums s;
    s.cov_sum = Eigen::MatrixXd::Zero(d, d);
    s.prec_sum = Eigen::MatrixXd::Zero(d, d);
    s.cov_beta_sum = Eigen::VectorXd::Zero(d);
    s.beta_sum = Eigen::VectorXd::Zero(d);
    // ordered reduction; results are bit-stable for a given environment order
    for (std::size_t e = 0; e < envs.size(); ++e) {
        const auto& m = envs[e];
        const double s2 = resid_var_override.empty() ? m.resid_var : resid_var_override[e];
        if (!(s2 > 0.0)) throw std::invalid_argument("weighted_sums: residual variance must be > 0");
        const double w = 1.0 / s2;
        Eigen::MatrixXd inv = linalg::spd_inverse(m.sigma_x);
        inv = 0.5 * (inv + inv.transpose());
        s.cov_sum += w * m.sigma_x;
        s.prec_sum += w * inv;
        s.cov_beta_sum += w * (m.sigma_x * m.beta_e);
        s.beta_sum += w * m.beta_e;
        s.weight_sum += w;
        s.weights.push_back(w);
        s.inverses.push_back(std::move(inv));
    }
    return s;
}

Eigen::VectorXd pooled_theta(EnvSpan envs) {
    const WeightedSums s = weighted_sums(envs);
    Eigen::LLT<Eigen::MatrixXd> llt(s.cov_sum);
    if (llt.info() != Eigen::Success)
        throw IllPosedError(std::numeric_limits<double>::infinity(),
                            "pooled_theta: weighted covariance sum is singular");
    return llt.solve(s.cov_beta_sum);
}

double kl_loss(EnvSpan envs, const Eigen::VectorXd& beta, const Eigen::VectorXd& eta) {
    check_envs(envs, "kl_loss");
    double total = 0.0;
    for (const auto& m : envs) {
        Eigen::LLT<Eigen::MatrixXd> llt(m.sigma_x);
        const Eigen::VectorXd r = m.beta_e - beta - llt.solve(eta);
        total += r.dot(m.sigma_x * r) / (2.0 * m.resid_var);
    }
    return total;
}

LossGradient kl_loss_gradient(const WeightedSums& s, const Eigen::VectorXd& beta,
                              const Eigen::VectorXd& eta) {
    return {s.cov_sum * beta - s.cov_beta_sum + s.weight_sum * eta,
            s.prec_sum * eta - s.beta_sum + s.weight_sum * beta};
}

LossGradient kl_loss_gradient(EnvSpan envs, const Eigen::VectorXd& beta, const Eigen::VectorXd& eta) {
    return kl_loss_gradient(weighted_sums(envs), beta, eta);
}

Eigen::MatrixXd s_beta_matrix(const WeightedSums& s) {
    const Eigen::Index d = s.cov_sum.rows();
    return s.prec_sum * s.cov_sum - (s.weight_sum * s.weight_sum) * Eigen::MatrixXd::Identity(d, d);
}

Eigen::MatrixXd s_beta_matrix(EnvSpan envs) { return s_beta_matrix(weighted_sums(envs)); }

// S_beta = P A - w^2 I cancels exactly for identical environments; measure
// the remainder against the size of the cancelling terms.
double s_beta_condition(const WeightedSums& s, const Eigen::MatrixXd& sb) {
    const double scale = linalg::sym_spectral_norm(s.prec_sum) * linalg::sym_spectral_norm(s.cov_sum) +
                         s.weight_sum * s.weight_sum;
    return linalg::condition(sb, scale);
}

Solvability s_beta_solvable(EnvSpan envs, double tol) {
    if (!(tol > 0.0)) throw std::invalid_argument("s_beta_solvable: tol must be > 0");
    const WeightedSums s = weighted_sums(envs);
    Solvability out;
    out.condition = s_beta_condition(s, s_beta_matrix(s));
    out.solvable = out.condition < 1.0 / tol;
    const Eigen::MatrixXd avg_prec = s.prec_sum / s.weight_sum;
    for (std::size_t e = 0; e < envs.size(); ++e) {
        const double scale = linalg::sym_spectral_norm(s.inverses[e]) + linalg::sym_spectral_norm(avg_prec);
        if (linalg::condition(s.inverses[e] - avg_prec, scale) < 1.0 / tol) {
            out.witness = e;
            break;
        }
    }
    return out;
}

namespace {

Eigen::MatrixXd covariance_from_sums(EnvSpan envs, const WeightedSums& s,
                                     const Eigen::PartialPivLU<Eigen::MatrixXd>& s_lu,
                                     bool force_general) {
    const Eigen::Index d = s.cov_sum.rows();
    for (const auto& m : envs)
        if (m.n <= 0)
            throw std::invalid_argument(
                "conditional_covariance: sample sizes are required (population moments have n = 0)");
    bool equal_n = true;
    for (const auto& m : envs) equal_n = equal_n && m.n == envs.front().n;

    if (equal_n && !force_general) {
        Eigen::MatrixXd v = s_lu.solve(s.prec_sum) / static_cast<double>(envs.front().n);
        return 0.5 * (v + v.transpose());
    }
    // W_e = S^{-1} (P S_e - w I) / s_e with P = sum S^{-1}/s2, w = sum 1/s2;
    // V = sum_e W_e S_e^{-1} W_e' / n_e
    const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(d, d);
    Eigen::MatrixXd v = Eigen::MatrixXd::Zero(d, d);
    for (std::size_t e = 0; e < envs.size(); ++e) {
        const Eigen::MatrixXd we =
            s_lu.solve(s.prec_sum * envs[e].sigma_x - s.weight_sum * id) * std::sqrt(s.weights[e]);
        v += we * s.inverses[e] * we.transpose() / static_cast<double>(envs[e].n);
    }
    return 0.5 * (v + v.transpose());
}

}  // namespace

Eigen::MatrixXd conditional_covariance(EnvSpan envs, std::span<const double> known_resid_var,
                                       bool force_general) {
    const WeightedSums s = weighted_sums(envs, known_resid_var);
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(s_beta_matrix(s));
    return covariance_from_sums(envs, s, lu, force_general);
}

KlFit fit_kl(EnvSpan envs, const FitOptions& opts) {
    if (envs.size() < 2)
        throw std::invalid_argument("fit_kl: at least two environments are required");
    const WeightedSums s = weighted_sums(envs, opts.known_resid_var);

    KlFit fit;
    fit.s_beta = s_beta_matrix(s);
    fit.cond_s_beta = s_beta_condition(s, fit.s_beta);
    if (!(fit.cond_s_beta <= opts.max_condition)) {
        std::ostringstream msg;
        msg << "fit_kl: S_beta is ill-conditioned (condition number " << fit.cond_s_beta
            << " > " << opts.max_condition
            << "); the environment covariances are not diverse enough to identify beta. "
               "Add environments with more heterogeneous covariate covariances.";
        throw IllPosedError(fit.cond_s_beta, msg.str());
    }

    // S_beta is not symmetric; LU with partial pivoting.
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(fit.s_beta);
    const Eigen::VectorXd rhs = s.prec_sum * s.cov_beta_sum - s.weight_sum * s.beta_sum;
    fit.beta = lu.solve(rhs);

    Eigen::LLT<Eigen::MatrixXd> prec_llt(s.prec_sum);
    fit.eta = prec_llt.solve(s.beta_sum - s.weight_sum * fit.beta);

    const LossGradient g = kl_loss_gradient(s, fit.beta, fit.eta);
    const double scale_b = std::max({s.cov_beta_sum.norm(), (s.cov_sum * fit.beta).norm(),
                                     s.weight_sum * fit.eta.norm()});
    const double scale_e = std::max({s.beta_sum.norm(), (s.prec_sum * fit.eta).norm(),
                                     s.weight_sum * fit.beta.norm()});
    fit.stationarity_residual = std::max(rel(g.beta.norm(), scale_b), rel(g.eta.norm(), scale_e));

    if (opts.known_resid_var.empty()) {
        fit.loss_at_opt = kl_loss(envs, fit.beta, fit.eta);
    } else {
        std::vector<EnvironmentMoments> known(envs.begin(), envs.end());
        for (std::size_t e = 0; e < known.size(); ++e) known[e].resid_var = opts.known_resid_var[e];
        fit.loss_at_opt = kl_loss(known, fit.beta, fit.eta);
    }

    if (opts.with_variance) {
        fit.cov = covariance_from_sums(envs, s, lu, false);
        fit.cov_plugin = opts.known_resid_var.empty();
    }
    return fit;
}

double robustness_constant(EnvSpan envs) {
    const WeightedSums s = weighted_sums(envs);
    double inv_norms = 0.0;
    for (std::size_t e = 0; e < envs.size(); ++e)
        inv_norms += s.weights[e] * linalg::sym_spectral_norm(s.inverses[e]);
    return s.weight_sum * (linalg::sym_spectral_norm(s.prec_sum) + inv_norms);
}

double robustness_bound(EnvSpan envs, double delta_sup) {
    if (!(delta_sup >= 0.0)) throw std::invalid_argument("robustness_bound: delta_sup must be >= 0");
    if (delta_sup == 0.0) return 0.0;
    return robustness_constant(envs) * delta_sup * delta_sup;
}

}  // namespace klreg
