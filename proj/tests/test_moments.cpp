#include <doctest.h>

#include "klreg/errors.hpp"
#include "klreg/moments.hpp"
#include "klreg/random.hpp"
#include "klreg/sem_model.hpp"
#include "klreg/serialize.hpp"

using namespace klreg;

namespace {

EnvironmentData noisy_data(Eigen::Index n, Eigen::Index d, std::uint64_t seed) {
    Rng rng(seed);
    EnvironmentData data;
    data.x = standard_normal_matrix(n, d, rng);
    Eigen::VectorXd beta = Eigen::VectorXd::LinSpaced(d, -1.0, 1.0);
    data.y = data.x * beta + standard_normal_matrix(n, 1, rng).col(0);
    data.env_id = "rand";
    return data;
}

}  // namespace

TEST_CASE("degenerate design names the environment") {
    EnvironmentData data;
    data.x.resize(100, 2);
    data.y.resize(100);
    for (int i = 0; i < 100; ++i) {
        data.x(i, 0) = i % 2 == 0 ? 1.0 : -1.0;
        data.x(i, 1) = 0.0;
        data.y(i) = static_cast<double>(i);
    }
    data.env_id = "flat";
    try {
        estimate_moments(data);
        FAIL("expected a singular-covariance error");
    } catch (const SingularCovarianceError& e) {
        CHECK(e.env_id() == "flat");
        CHECK(std::string(e.what()).find("flat") != std::string::npos);
    }
}

TEST_CASE("n <= D is rejected") {
    const auto data = noisy_data(3, 5, 1);
    CHECK_THROWS_AS(estimate_moments(data), SingularCovarianceError);
    CHECK_THROWS_AS(estimate_moments(noisy_data(5, 5, 1)), SingularCovarianceError);
    // centering uses one degree of freedom: n = D + 1 leaves no residual
    CHECK_THROWS_AS(estimate_moments(noisy_data(6, 5, 1)), SingularCovarianceError);
    CHECK_NOTHROW(estimate_moments(noisy_data(7, 5, 1)));
}

TEST_CASE("unconfounded data recovers beta*") {
    const SemModel base = generate_baseline_model(5, 2, 3, 9);
    const SemModel m(base.b_xx, Eigen::MatrixXd::Zero(5, 2), base.beta_star, base.eta0, base.sigma_h);
    Rng rng(4);
    const auto noise = generate_environment_noise(5, 0, 1.0, random_spd(5, rng), 4);
    const auto mom = estimate_moments(sample_environment(m, noise, 200000, 5));
    CHECK((mom.beta_e - m.beta_star).norm() < 0.02);
}

TEST_CASE("population path: resid_var equals the response noise variance without confounding or edges") {
    Rng rng(2);
    const SemModel m(Eigen::MatrixXd::Zero(3, 3), Eigen::MatrixXd::Zero(3, 1), Eigen::Vector3d(1, 0, -2),
                     Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Identity(1, 1));
    const EnvironmentNoiseSpec noise{random_spd(3, rng), 1.7, NoiseKind::gaussian()};
    const auto mom = moments_from_population(population_moments(m, noise), "pop");
    CHECK(mom.resid_var == doctest::Approx(1.7).epsilon(1e-12));
    // a latent acting on Y alone adds eta0' Sigma_H eta0 to the residual
    const SemModel direct(m.b_xx, m.b_xh, m.beta_star, Eigen::VectorXd::Constant(1, 0.5), m.sigma_h);
    CHECK(moments_from_population(population_moments(direct, noise)).resid_var ==
          doctest::Approx(1.95).epsilon(1e-12));
    CHECK(mom.n == 0);
    CHECK(mom.env_id == "pop");
    CHECK((mom.beta_e - m.beta_star).norm() < 1e-12);
}

TEST_CASE("moment invariants") {
    const auto mom = estimate_moments(noisy_data(500, 4, 3));
    CHECK((mom.sigma_x * mom.beta_e - mom.sigma_xy).norm() <= 1e-8 * mom.sigma_xy.norm());
    CHECK(mom.resid_var == doctest::Approx(mom.sigma_y - mom.beta_e.dot(mom.sigma_x * mom.beta_e)));
    CHECK(mom.resid_var > 0.0);
    CHECK((mom.sigma_x - mom.sigma_x.transpose()).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK(mom.n == 500);
    CHECK(mom.condition >= 1.0);
}

TEST_CASE("joint covariance: examples") {
    EnvironmentMoments m;
    m.sigma_x = Eigen::MatrixXd::Identity(2, 2);
    m.beta_e = Eigen::Vector2d(1, 0);
    m.resid_var = 1.0;
    Eigen::MatrixXd expected(3, 3);
    expected << 1, 0, 1, 0, 1, 0, 1, 0, 2;
    CHECK(joint_covariance(m).isApprox(expected, 1e-15));

    m.sigma_x << 2, 0.5, 0.5, 1;
    m.beta_e.setZero();
    m.resid_var = 3.0;
    const Eigen::MatrixXd j = joint_covariance(m);
    CHECK(j.topLeftCorner(2, 2) == m.sigma_x);
    CHECK(j.col(2).head(2).isZero());
    CHECK(j(2, 2) == 3.0);
}

TEST_CASE("reparametrization round trip") {
    for (std::uint64_t s = 0; s < 10; ++s) {
        const auto data = noisy_data(300, 4, 20 + s);
        const Eigen::MatrixXd raw = empirical_joint(data);
        const auto mom = estimate_moments(data);
        CHECK((joint_covariance(mom) - raw).cwiseAbs().maxCoeff() < 1e-9);

        Rng rng(s);
        const Eigen::MatrixXd pd = random_spd(5, rng);
        CHECK((joint_covariance(moments_from_joint(pd)) - pd).cwiseAbs().maxCoeff() < 1e-9);
    }
}

TEST_CASE("scale equivariance in y") {
    auto data = noisy_data(400, 3, 7);
    const auto a = estimate_moments(data);
    data.y *= 2.5;
    const auto b = estimate_moments(data);
    CHECK((b.beta_e - 2.5 * a.beta_e).norm() < 1e-10);
    CHECK(b.resid_var == doctest::Approx(6.25 * a.resid_var).epsilon(1e-10));
}

TEST_CASE("empirical joint is mean-centered and 1/n normalized") {
    EnvironmentData d;
    d.x.resize(4, 1);
    d.x << 1, 2, 3, 4;
    d.y = Eigen::Vector4d(10, 10, 10, 14);
    const Eigen::MatrixXd j = empirical_joint(d);
    CHECK(j(0, 0) == doctest::Approx(1.25));
    CHECK(j(1, 1) == doctest::Approx(3.0));
    CHECK(j(0, 1) == doctest::Approx(1.5));
}

TEST_CASE("jitter regularizes a constant column") {
    EnvironmentData data = noisy_data(200, 3, 11);
    data.x.col(2).setConstant(1.0);
    CHECK_THROWS_AS(estimate_moments(data), SingularCovarianceError);
    MomentOptions opts;
    opts.jitter = 1e-3;
    const auto m = estimate_moments(data, opts);
    CHECK(m.sigma_x(2, 2) == doctest::Approx(1e-3));
    CHECK(std::abs(m.beta_e(2)) < 1e-8);
}

TEST_CASE("moments JSON round trip") {
    const auto m = estimate_moments(noisy_data(100, 3, 13));
    const auto back = json(m).get<EnvironmentMoments>();
    CHECK(back.sigma_x == m.sigma_x);
    CHECK(back.beta_e == m.beta_e);
    CHECK(back.resid_var == m.resid_var);
    CHECK(back.n == m.n);
    CHECK(back.env_id == m.env_id);
}
