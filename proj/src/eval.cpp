#include "klreg/eval.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace klreg {

Eigen::VectorXd ols_per_environment(const EnvironmentData& data, const MomentOptions& opts) {
    return estimate_moments(data, opts).beta_e;
}

Eigen::VectorXd average_ols(std::span<const EnvironmentData> datasets, const MomentOptions& opts) {
    if (datasets.empty()) throw std::invalid_argument("average_ols: no environments");
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(datasets.front().d());
    for (const auto& env : datasets) acc += ols_per_environment(env, opts);
    return acc / static_cast<double>(datasets.size());
}

Eigen::VectorXd average_ols(std::span<const EnvironmentMoments> envs) {
    if (envs.empty()) throw std::invalid_argument("average_ols: no environments");
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(envs.front().d());
    for (const auto& m : envs) acc += m.beta_e;
    return acc / static_cast<double>(envs.size());
}

double mse(const Eigen::VectorXd& beta_hat, const Eigen::VectorXd& beta_star) {
    if (beta_hat.size() != beta_star.size()) throw std::invalid_argument("mse: length mismatch");
    if (beta_hat.size() == 0) throw std::invalid_argument("mse: empty vectors");
    return (beta_hat - beta_star).squaredNorm() / static_cast<double>(beta_hat.size());
}

SupportMetrics support_metrics(const Eigen::VectorXd& beta_hat, const Eigen::VectorXd& beta_star,
                               double threshold) {
    if (beta_hat.size() != beta_star.size()) throw std::invalid_argument("support_metrics: length mismatch");
    if (!(threshold >= 0.0)) throw std::invalid_argument("support_metrics: threshold must be >= 0");
    int tp = 0, predicted = 0, actual = 0;
    for (Eigen::Index j = 0; j < beta_hat.size(); ++j) {
        const bool p = std::abs(beta_hat(j)) > threshold;
        const bool t = beta_star(j) != 0.0;
        predicted += p;
        actual += t;
        tp += p && t;
    }
    SupportMetrics m;
    m.precision = predicted == 0 ? 1.0 : static_cast<double>(tp) / predicted;
    m.recall = actual == 0 ? 1.0 : static_cast<double>(tp) / actual;
    m.f1 = (m.precision + m.recall) > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
    return m;
}

std::vector<ScoredCandidate> sorted_candidates(const EdgeRanking& ranking) {
    std::vector<ScoredCandidate> c = ranking.scores;
    for (const auto& s : c)
        if (!std::isfinite(s.score)) throw std::invalid_argument("edge ranking: scores must be finite");
    std::sort(c.begin(), c.end(), [](const ScoredCandidate& a, const ScoredCandidate& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.index < b.index;
    });
    return c;
}

std::vector<PrPoint> pr_curve(const EdgeRanking& ranking) {
    if (ranking.truth.empty()) throw std::invalid_argument("pr_curve: truth set is empty");
    const auto sorted = sorted_candidates(ranking);
    std::set<std::size_t> ids;
    for (const auto& c : sorted) ids.insert(c.index);
    for (auto t : ranking.truth)
        if (!ids.count(t)) throw std::invalid_argument("pr_curve: truth contains an unknown candidate");
    const double positives = static_cast<double>(ranking.truth.size());
    std::vector<PrPoint> curve;
    curve.reserve(sorted.size());
    int tp = 0;
    for (std::size_t k = 0; k < sorted.size(); ++k) {
        tp += ranking.truth.count(sorted[k].index) > 0;
        curve.push_back({sorted[k].score, tp / static_cast<double>(k + 1), tp / positives});
    }
    return curve;
}

double aupr(const EdgeRanking& ranking) {
    if (ranking.truth.empty()) throw std::invalid_argument("aupr: truth set is empty");
    const auto curve = pr_curve(ranking);
    double ap = 0.0, prev_recall = 0.0;
    for (const auto& p : curve) {
        ap += (p.recall - prev_recall) * p.precision;
        prev_recall = p.recall;
    }
    return ap;
}

void write_pr_csv(const std::vector<PrPoint>& curve, std::ostream& out) {
    out << "threshold,precision,recall\n";
    out.precision(17);
    for (const auto& p : curve) out << p.threshold << ',' << p.precision << ',' << p.recall << '\n';
}

}  // namespace klreg
