#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "klreg/eval.hpp"
#include "klreg/random.hpp"
#include "klreg/sem_model.hpp"

using namespace klreg;

namespace {

EdgeRanking ranking(const std::vector<double>& scores, const std::vector<int>& labels) {
    EdgeRanking r;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        r.scores.push_back({i, scores[i], ""});
        if (labels[i]) r.truth.insert(i);
    }
    return r;
}

}  // namespace

TEST_CASE("mse examples") {
    const Eigen::VectorXd star = (Eigen::VectorXd(20) << Eigen::VectorXd::Ones(10), Eigen::VectorXd::Zero(10)).finished();
    CHECK(mse(star, star) == 0.0);
    CHECK(mse(Eigen::VectorXd::Zero(20), star) == doctest::Approx(0.5));
    CHECK(mse(Eigen::VectorXd::Constant(1, 1.75), Eigen::VectorXd::Ones(1)) == doctest::Approx(0.5625));
    CHECK_THROWS_AS(mse(Eigen::VectorXd::Zero(2), Eigen::VectorXd::Zero(3)), std::invalid_argument);
}

TEST_CASE("support metrics examples") {
    Eigen::VectorXd star = Eigen::VectorXd::Zero(20);
    star.head(10).setOnes();
    CHECK(support_metrics(star, star, 0.1).f1 == 1.0);
    const auto none = support_metrics(Eigen::VectorXd::Zero(20), star, 0.1);
    CHECK(none.recall == 0.0);
    CHECK(none.precision == 1.0);

    Eigen::VectorXd hat = Eigen::VectorXd::Zero(20);
    hat.head(8).setConstant(0.9);
    hat(15) = 0.5;
    hat(16) = -0.3;
    hat(17) = 0.05;  // below threshold
    const auto m = support_metrics(hat, star, 0.1);
    CHECK(m.precision == doctest::Approx(0.8));
    CHECK(m.recall == doctest::Approx(0.8));
    CHECK(m.f1 == doctest::Approx(0.8));

    const auto null_truth = support_metrics(Eigen::VectorXd::Zero(5), Eigen::VectorXd::Zero(5), 0.0);
    CHECK(null_truth.recall == 1.0);
    CHECK(null_truth.precision == 1.0);
    CHECK_THROWS_AS(support_metrics(hat, star, -1.0), std::invalid_argument);
}

TEST_CASE("aupr examples") {
    CHECK(aupr(ranking({0.9, 0.8, 0.2}, {1, 0, 1})) == doctest::Approx(5.0 / 6.0));
    CHECK(aupr(ranking({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0})) == doctest::Approx(1.0));
    CHECK_THROWS_AS(aupr(ranking({0.5, 0.4}, {0, 0})), std::invalid_argument);
}

TEST_CASE("aupr ties are broken by ascending index") {
    CHECK(aupr(ranking({0.5, 0.5}, {1, 0})) == doctest::Approx(1.0));
    CHECK(aupr(ranking({0.5, 0.5}, {0, 1})) == doctest::Approx(0.5));
}

TEST_CASE("aupr is invariant under increasing transforms") {
    Rng rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> s(50), t(50);
    std::vector<int> labels(50);
    for (int i = 0; i < 50; ++i) {
        s[i] = u(rng);
        t[i] = std::exp(3.0 * s[i]) - 7.0;
        labels[i] = u(rng) < 0.3;
    }
    labels[0] = 1;
    CHECK(aupr(ranking(s, labels)) == aupr(ranking(t, labels)));
}

TEST_CASE("aupr of random scores is near the prevalence") {
    double total = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        std::vector<double> s(1000);
        std::vector<int> labels(1000, 0);
        for (auto& v : s) v = u(rng);
        for (int i = 0; i < 100; ++i) labels[i] = 1;
        const double ap = aupr(ranking(s, labels));
        CHECK(std::abs(ap - 0.1) < 0.05);
        total += ap;
    }
    CHECK(std::abs(total / 20.0 - 0.1) < 0.03);
}

TEST_CASE("ranking validation and PR output") {
    EdgeRanking r = ranking({0.3, 0.2}, {1, 0});
    r.truth.insert(7);
    CHECK_THROWS_AS(aupr(r), std::invalid_argument);
    EdgeRanking nan = ranking({std::nan(""), 0.2}, {1, 0});
    CHECK_THROWS_AS(aupr(nan), std::invalid_argument);

    const auto curve = pr_curve(ranking({0.9, 0.8, 0.2}, {1, 0, 1}));
    REQUIRE(curve.size() == 3);
    CHECK(curve[1].precision == doctest::Approx(0.5));
    CHECK(curve[2].recall == doctest::Approx(1.0));
    std::ostringstream out;
    write_pr_csv(curve, out);
    CHECK(out.str().rfind("threshold,precision,recall\n", 0) == 0);
}

TEST_CASE("average OLS") {
    EnvironmentMoments a, b;
    a.sigma_x = b.sigma_x = Eigen::MatrixXd::Identity(1, 1);
    a.beta_e = Eigen::VectorXd::Constant(1, 1.5);
    b.beta_e = Eigen::VectorXd::Constant(1, 2.0);
    const std::vector<EnvironmentMoments> two{a, b};
    CHECK(average_ols(two)(0) == doctest::Approx(1.75));
    const std::vector<EnvironmentMoments> one{a};
    CHECK(average_ols(one)(0) == 1.5);

    const SemModel base = generate_baseline_model(4, 1, 2, 1);
    const SemModel m(base.b_xx, Eigen::MatrixXd::Zero(4, 1), base.beta_star, base.eta0, base.sigma_h);
    Rng rng(2);
    const Eigen::MatrixXd shared = random_spd(4, rng);
    std::vector<EnvironmentData> data;
    for (std::size_t e = 0; e < 3; ++e)
        data.push_back(sample_environment(m, generate_environment_noise(4, e, 1.0, shared, 3), 100000, 10 + e));
    CHECK((average_ols(data) - m.beta_star).lpNorm<Eigen::Infinity>() < 0.02);
    CHECK(ols_per_environment(data[0]) == estimate_moments(data[0]).beta_e);
}
