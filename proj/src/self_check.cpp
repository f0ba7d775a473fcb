#include "klreg/self_check.hpp"

#include <cmath>
#include <functional>
#include <sstream>

#include "klreg/errors.hpp"
#include "klreg/eval.hpp"
#include "klreg/kl_core.hpp"
#include "klreg/lasso.hpp"
#include "klreg/random.hpp"
#include "klreg/sem_model.hpp"

namespace klreg {

namespace {

EnvironmentMoments scalar_env(double sigma, double resid_var, double beta, Eigen::Index n) {
    EnvironmentMoments m;
    m.sigma_x = Eigen::MatrixXd::Constant(1, 1, sigma);
    m.beta_e = Eigen::VectorXd::Constant(1, beta);
    m.resid_var = resid_var;
    m.sigma_xy = m.sigma_x * m.beta_e;
    m.sigma_y = resid_var + beta * beta * sigma;
    m.n = n;
    return m;
}

std::vector<EnvironmentMoments> population_envs(const SemModel& m, std::size_t e_count, std::uint64_t seed) {
    Rng rng(seed);
    const Eigen::MatrixXd shared = random_spd(m.d(), rng);
    std::vector<EnvironmentMoments> envs;
    for (std::size_t e = 0; e < e_count; ++e)
        envs.push_back(moments_from_population(
            population_moments(m, generate_environment_noise(m.d(), e, 1.0, shared, seed))));
    return envs;
}

std::string fmt(double v) {
    std::ostringstream s;
    s.precision(3);
    s << v;
    return s.str();
}

CheckResult hand_case() {
    const std::vector<EnvironmentMoments> envs{scalar_env(2.0, 1.0, 1.5, 100), scalar_env(1.0, 1.0, 2.0, 100)};
    FitOptions opts;
    opts.with_variance = true;
    const auto fit = fit_kl(envs, opts);
    const double err = std::max({std::abs(fit.beta(0) - 1.0), std::abs(fit.eta(0) - 1.0),
                                 std::abs(fit.s_beta(0, 0) - 0.5), std::abs((*fit.cov)(0, 0) - 0.03),
                                 std::abs(robustness_constant(envs) - 6.0),
                                 std::abs(pooled_theta(envs)(0) - 5.0 / 3.0)});
    return {"scalar hand case", err < 1e-12, "max error " + fmt(err)};
}

CheckResult population_recovery() {
    double worst = 0.0;
    for (std::uint64_t s = 0; s < 10; ++s) {
        const SemModel m = generate_baseline_model(2 + static_cast<Eigen::Index>(s % 4) * 3, 1 + s % 3, 1, 100 + s);
        const auto envs = population_envs(m, 2 + s % 3, 200 + s);
        const auto fit = fit_kl(envs);
        worst = std::max({worst, (fit.beta - m.beta_star).lpNorm<Eigen::Infinity>(),
                          (fit.eta - m.eta_star()).lpNorm<Eigen::Infinity>()});
    }
    return {"population recovery of beta* and eta*", worst < 1e-8, "max error " + fmt(worst)};
}

CheckResult kl_lemma() {
    Rng rng(7);
    double worst = 0.0;
    bool nonneg = true;
    for (int i = 0; i < 50; ++i) {
        const Eigen::Index d = 1 + i % 5;
        RegressionTriplet a{random_spd(d, rng), standard_normal_matrix(d, 1, rng).col(0), 0.5 + 0.1 * i};
        RegressionTriplet b{random_spd(d, rng), standard_normal_matrix(d, 1, rng).col(0), 1.0 + 0.05 * i};
        const double direct = gaussian_kl(pi_map(a.sigma_x, a.resid_var, a.beta), pi_map(b.sigma_x, b.resid_var, b.beta));
        const double trip = gaussian_kl_triplet(a, b);
        worst = std::max(worst, std::abs(direct - trip) / std::max(1.0, std::abs(direct)));
        nonneg = nonneg && direct >= 0.0 && std::abs(gaussian_kl_triplet(a, a)) < 1e-12;
    }
    return {"Gaussian KL triplet decomposition", worst < 1e-9 && nonneg, "max relative gap " + fmt(worst)};
}

CheckResult stationarity() {
    double worst = 0.0;
    for (std::uint64_t s = 0; s < 10; ++s) {
        const SemModel m = generate_baseline_model(6, 2, 3, 300 + s);
        auto envs = population_envs(m, 3, 400 + s);
        Rng rng(500 + s);
        for (auto& e : envs) e.beta_e += 0.1 * standard_normal_matrix(6, 1, rng).col(0);
        const auto fit = fit_kl(envs);
        const auto g = kl_loss_gradient(envs, fit.beta, fit.eta);
        worst = std::max({worst, g.beta.lpNorm<Eigen::Infinity>(), g.eta.lpNorm<Eigen::Infinity>()});
    }
    return {"closed form is a stationary point of the loss", worst < 1e-8, "max gradient " + fmt(worst)};
}

CheckResult lasso_limits() {
    const SemModel m = generate_baseline_model(8, 2, 4, 600);
    auto envs = population_envs(m, 3, 601);
    Rng rng(602);
    for (auto& e : envs) e.beta_e += 0.05 * standard_normal_matrix(8, 1, rng).col(0);
    LassoConfig cfg;
    const auto free_fit = fit_lasso(envs, cfg);
    const double gap = (free_fit.beta - fit_kl(envs).beta).lpNorm<Eigen::Infinity>();
    cfg.lambda = lambda_max(envs);
    const bool zero = fit_lasso(envs, cfg).beta.isZero(0.0);
    return {"lasso at lambda = 0 and lambda_max", gap < 1e-6 && zero,
            "gap to closed form " + fmt(gap) + (zero ? ", zero at lambda_max" : ", nonzero at lambda_max")};
}

CheckResult identical_environments() {
    const SemModel m = generate_baseline_model(5, 2, 2, 700);
    auto one = population_envs(m, 1, 701).front();
    const std::vector<EnvironmentMoments> copies(3, one);
    const auto solv = s_beta_solvable(copies);
    bool raised = false;
    try {
        fit_kl(copies);
    } catch (const IllPosedError&) {
        raised = true;
    }
    return {"identical environments are ill-posed", raised && !solv.solvable && solv.condition > 1e12,
            "condition " + fmt(solv.condition)};
}

CheckResult aupr_example() {
    EdgeRanking r;
    r.scores = {{0, 0.9, ""}, {1, 0.8, ""}, {2, 0.2, ""}};
    r.truth = {0, 2};
    const double ap = aupr(r);
    return {"step-interpolated AUPR", std::abs(ap - 5.0 / 6.0) < 1e-12, "AP " + fmt(ap)};
}

}  // namespace

std::vector<CheckResult> self_check() {
    const std::vector<std::function<CheckResult()>> checks{hand_case,    population_recovery,    kl_lemma,
                                                           stationarity, lasso_limits, identical_environments,
                                                           aupr_example};
    std::vector<CheckResult> out;
    for (const auto& c : checks) {
        try {
            out.push_back(c());
        } catch (const std::exception& e) {
            out.push_back({"(check raised)", false, e.what()});
        }
    }
    return out;
}

void print_checks(const std::vector<CheckResult>& checks, std::ostream& out) {
    for (const auto& c : checks) out << (c.passed ? "PASS " : "FAIL ") << c.name << " (" << c.detail << ")\n";
}

}  // namespace klreg
