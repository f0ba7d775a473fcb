#include "klreg/lasso.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "klreg/errors.hpp"
#include "klreg/linalg.hpp"
#include "klreg/random.hpp"

namespace klreg {

namespace {

double soft(double v, double thr) {
    if (v > thr) return v - thr;
    if (v < -thr) return v + thr;
    return 0.0;
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

double kkt_scale(const ProfiledLoss& loss, double lambda) {
    const double s = std::max(loss.lambda_max(), lambda);
    return s > 0.0 ? s : 1.0;
}

}  // namespace

ProfiledLoss::ProfiledLoss(EnvSpan envs) : sums_(weighted_sums(envs)) {
    prec_llt_.compute(sums_.prec_sum);
    if (prec_llt_.info() != Eigen::Success)
        throw IllPosedError(std::numeric_limits<double>::infinity(),
                            "ProfiledLoss: precision sum is not positive definite");
    const double w = sums_.weight_sum;
    hessian_ = sums_.cov_sum - (w * w) * prec_llt_.solve(Eigen::MatrixXd::Identity(sums_.cov_sum.rows(), sums_.cov_sum.rows()));
    hessian_ = 0.5 * (hessian_ + hessian_.transpose());
    linear_ = sums_.cov_beta_sum - w * prec_llt_.solve(sums_.beta_sum);
    constant_ = kl_loss(envs, Eigen::VectorXd::Zero(dim()), eta_of(Eigen::VectorXd::Zero(dim())));
}

Eigen::VectorXd ProfiledLoss::eta_of(const Eigen::VectorXd& beta) const {
    return prec_llt_.solve(sums_.beta_sum - sums_.weight_sum * beta);
}

Eigen::VectorXd ProfiledLoss::gradient(const Eigen::VectorXd& beta) const {
    return hessian_ * beta - linear_;
}

double ProfiledLoss::value(const Eigen::VectorXd& beta) const {
    return 0.5 * beta.dot(hessian_ * beta) - linear_.dot(beta) + constant_;
}

double ProfiledLoss::lambda_max() const { return linear_.cwiseAbs().maxCoeff(); }

double lambda_max(EnvSpan envs) { return ProfiledLoss(envs).lambda_max(); }

double kkt_residual(const ProfiledLoss& loss, const Eigen::VectorXd& beta, double lambda) {
    const Eigen::VectorXd g = loss.gradient(beta);
    double worst = 0.0;
    for (Eigen::Index j = 0; j < beta.size(); ++j) {
        const double v = beta(j) != 0.0 ? std::abs(g(j) + lambda * sign(beta(j)))
                                        : std::max(0.0, std::abs(g(j)) - lambda);
        worst = std::max(worst, v);
    }
    return worst;
}

KlFit fit_lasso(EnvSpan envs, const LassoConfig& cfg, const std::optional<Eigen::VectorXd>& warm_start) {
    return fit_lasso(ProfiledLoss(envs), envs, cfg, warm_start);
}

KlFit fit_lasso(const ProfiledLoss& loss, EnvSpan envs, const LassoConfig& cfg,
                const std::optional<Eigen::VectorXd>& warm_start) {
    if (!(cfg.lambda >= 0.0)) throw std::invalid_argument("fit_lasso: lambda must be >= 0");
    if (!(cfg.tol > 0.0)) throw std::invalid_argument("fit_lasso: tol must be > 0");
    if (cfg.max_iter < 1) throw std::invalid_argument("fit_lasso: max_iter must be >= 1");
    const Eigen::Index d = loss.dim();
    const double lambda = cfg.lambda;
    const double threshold = cfg.tol * kkt_scale(loss, lambda);

    auto objective = [&](const Eigen::VectorXd& b) { return loss.value(b) + lambda * b.lpNorm<1>(); };

    Eigen::VectorXd x = Eigen::VectorXd::Zero(d);
    if (warm_start) {
        if (warm_start->size() != d) throw std::invalid_argument("fit_lasso: warm start has wrong size");
        x = *warm_start;
    }
    double fx = objective(x);

    KlFit fit;
    fit.lambda = lambda;
    if (cfg.record_trace) fit.objective_trace.push_back(fx);

    // Exact solve restricted to the current support with the current signs.
    auto try_polish = [&]() -> bool {
        std::vector<Eigen::Index> support;
        for (Eigen::Index j = 0; j < d; ++j)
            if (x(j) != 0.0) support.push_back(j);
        Eigen::VectorXd cand = Eigen::VectorXd::Zero(d);
        if (!support.empty()) {
            const auto k = static_cast<Eigen::Index>(support.size());
            Eigen::MatrixXd h(k, k);
            Eigen::VectorXd rhs(k);
            for (Eigen::Index a = 0; a < k; ++a) {
                rhs(a) = loss.linear()(support[a]) - lambda * sign(x(support[a]));
                for (Eigen::Index b = 0; b < k; ++b) h(a, b) = loss.hessian()(support[a], support[b]);
            }
            Eigen::LDLT<Eigen::MatrixXd> ldlt(h);
            if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) return false;
            const Eigen::VectorXd sol = ldlt.solve(rhs);
            if (!sol.allFinite()) return false;
            for (Eigen::Index a = 0; a < k; ++a) {
                if (lambda > 0.0 && sign(sol(a)) != sign(x(support[a]))) return false;
                cand(support[a]) = sol(a);
            }
        }
        if (kkt_residual(loss, cand, lambda) > threshold) return false;
        const double fc = objective(cand);
        if (fc > fx + 1e-12 * std::max(1.0, std::abs(fx))) return false;
        x = cand;
        fx = std::min(fc, fx);
        if (cfg.record_trace) fit.objective_trace.push_back(fx);
        return true;
    };

    double kkt = kkt_residual(loss, x, lambda);
    int iter = 0;
    if (kkt > threshold && !try_polish()) {
        // Backtracking starts from an optimistic step and only ever shrinks.
        double hnorm = linalg::sym_spectral_norm(loss.hessian());
        double step = hnorm > 0.0 ? 4.0 / hnorm : 1.0;
        Eigen::VectorXd y = x;
        double theta = 1.0;
        bool converged = false;
        while (iter < cfg.max_iter) {
            ++iter;
            const Eigen::VectorXd gy = loss.gradient(y);
            const double fy = loss.value(y);
            Eigen::VectorXd z(d);
            for (int bt = 0; bt < 60; ++bt) {
                for (Eigen::Index j = 0; j < d; ++j) z(j) = soft(y(j) - step * gy(j), step * lambda);
                const Eigen::VectorXd dz = z - y;
                if (loss.value(z) <= fy + gy.dot(dz) + dz.squaredNorm() / (2.0 * step) + 1e-15 * std::abs(fy))
                    break;
                step *= 0.5;
            }
            const double fz = objective(z);
            const Eigen::VectorXd x_prev = x;
            if (fz <= fx) {
                x = z;
                fx = fz;
            }
            const double theta_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * theta * theta));
            y = x + (theta / theta_next) * (z - x) + ((theta - 1.0) / theta_next) * (x - x_prev);
            theta = theta_next;
            if (cfg.record_trace) fit.objective_trace.push_back(fx);

            kkt = kkt_residual(loss, x, lambda);
            if (kkt <= threshold) {
                converged = true;
                break;
            }
            if (iter % 10 == 0 && try_polish()) {
                converged = true;
                break;
            }
        }
        kkt = kkt_residual(loss, x, lambda);
        if (!converged && kkt > threshold) {
            std::ostringstream msg;
            msg << "fit_lasso: no convergence after " << cfg.max_iter << " iterations (KKT residual "
                << kkt << ", target " << threshold << ")";
            throw ConvergenceError(kkt, msg.str());
        }
    }

    fit.beta = x;
    fit.eta = loss.eta_of(x);
    fit.iterations = iter;
    fit.kkt_residual = kkt_residual(loss, x, lambda);
    fit.loss_at_opt = loss.value(x);
    const WeightedSums sums = weighted_sums(envs);
    fit.s_beta = s_beta_matrix(sums);
    fit.cond_s_beta = s_beta_condition(sums, fit.s_beta);
    const LossGradient g = kl_loss_gradient(envs, fit.beta, fit.eta);
    fit.stationarity_residual = g.eta.norm();
    return fit;
}

std::vector<double> default_grid(double lmax, int points, double ratio) {
    if (points < 1) throw std::invalid_argument("default_grid: need at least one point");
    if (!(ratio > 0.0 && ratio <= 1.0)) throw std::invalid_argument("default_grid: ratio must be in (0, 1]");
    if (!(lmax > 0.0)) return {0.0};
    std::vector<double> grid(points);
    if (points == 1) return {lmax};
    const double lo = std::log(ratio);
    for (int i = 0; i < points; ++i) grid[i] = lmax * std::exp(lo * i / (points - 1));
    return grid;
}

LassoPath lasso_path(EnvSpan envs, std::span<const double> grid, const LassoConfig& base) {
    if (grid.empty()) throw std::invalid_argument("lasso_path: empty grid");
    for (std::size_t i = 1; i < grid.size(); ++i)
        if (!(grid[i] < grid[i - 1])) throw std::invalid_argument("lasso_path: grid must be strictly decreasing");
    const ProfiledLoss loss(envs);
    LassoPath path;
    path.entry_lambda = Eigen::VectorXd::Zero(loss.dim());
    std::optional<Eigen::VectorXd> warm;
    for (double lam : grid) {
        LassoConfig cfg = base;
        cfg.lambda = lam;
        KlFit f = fit_lasso(loss, envs, cfg, warm);
        for (Eigen::Index j = 0; j < f.beta.size(); ++j)
            if (f.beta(j) != 0.0 && path.entry_lambda(j) == 0.0) path.entry_lambda(j) = lam;
        warm = f.beta;
        path.lambdas.push_back(lam);
        path.fits.push_back(std::move(f));
    }
    return path;
}

void write_path_csv(const LassoPath& path, std::ostream& out) {
    out << "lambda,index,value,entry_lambda\n";
    out.precision(17);
    for (std::size_t i = 0; i < path.fits.size(); ++i)
        for (Eigen::Index j = 0; j < path.fits[i].beta.size(); ++j)
            out << path.lambdas[i] << ',' << j << ',' << path.fits[i].beta(j) << ','
                << path.entry_lambda(j) << '\n';
}

namespace {

EnvironmentData take_rows(const EnvironmentData& src, const std::vector<Eigen::Index>& rows) {
    EnvironmentData out;
    out.env_id = src.env_id;
    out.x.resize(static_cast<Eigen::Index>(rows.size()), src.d());
    out.y.resize(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.x.row(static_cast<Eigen::Index>(i)) = src.x.row(rows[i]);
        out.y(static_cast<Eigen::Index>(i)) = src.y(rows[i]);
    }
    return out;
}

}  // namespace

CrossFitResult select_lambda_cross_fit(std::span<const EnvironmentData> data,
                                       std::span<const double> grid_in, int folds,
                                       std::uint64_t seed, const MomentOptions& mopts) {
    if (data.empty()) throw std::invalid_argument("select_lambda_cross_fit: no environments");
    if (folds < 2) throw std::invalid_argument("select_lambda_cross_fit: need at least 2 folds");
    const Eigen::Index d = data.front().d();
    for (const auto& env : data) {
        env.validate();
        if (env.n() < folds * (d + 1))
            throw std::invalid_argument("select_lambda_cross_fit: environment " + env.env_id +
                                        " has too few samples for " + std::to_string(folds) +
                                        " folds");
    }

    CrossFitResult res;
    if (grid_in.empty()) {
        std::vector<EnvironmentMoments> full;
        for (const auto& env : data) full.push_back(estimate_moments(env, mopts));
        res.grid = default_grid(lambda_max(full));
    } else {
        res.grid.assign(grid_in.begin(), grid_in.end());
    }
    res.heldout_loss.assign(res.grid.size(), 0.0);
    if (res.grid.size() == 1) {
        res.lambda = res.grid.front();
        return res;
    }

    // fold id per row, drawn within each environment
    std::vector<std::vector<int>> fold_of(data.size());
    for (std::size_t e = 0; e < data.size(); ++e) {
        const Eigen::Index n = data[e].n();
        std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
        std::iota(perm.begin(), perm.end(), 0);
        Rng rng(derive_seed(seed, {e}));
        std::shuffle(perm.begin(), perm.end(), rng);
        fold_of[e].assign(static_cast<std::size_t>(n), 0);
        for (Eigen::Index i = 0; i < n; ++i) fold_of[e][static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = static_cast<int>(i % folds);
    }

    for (int k = 0; k < folds; ++k) {
        std::vector<EnvironmentMoments> train, held;
        for (std::size_t e = 0; e < data.size(); ++e) {
            std::vector<Eigen::Index> in, out;
            for (Eigen::Index i = 0; i < data[e].n(); ++i)
                (fold_of[e][static_cast<std::size_t>(i)] == k ? out : in).push_back(i);
            train.push_back(estimate_moments(take_rows(data[e], in), mopts));
            held.push_back(estimate_moments(take_rows(data[e], out), mopts));
        }
        const LassoPath path = lasso_path(train, res.grid);
        for (std::size_t g = 0; g < res.grid.size(); ++g)
            res.heldout_loss[g] += kl_loss(held, path.fits[g].beta, path.fits[g].eta);
    }

    std::size_t best = 0;
    for (std::size_t g = 1; g < res.grid.size(); ++g)
        if (res.heldout_loss[g] < res.heldout_loss[best]) best = g;
    res.lambda = res.grid[best];
    return res;
}

}  // namespace klreg
