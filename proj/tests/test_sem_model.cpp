#include <doctest.h>

#include <cmath>
#include <limits>

#include "klreg/errors.hpp"
#include "klreg/moments.hpp"
#include "klreg/random.hpp"
#include "klreg/sem_model.hpp"
#include "klreg/serialize.hpp"
#include "oracles.hpp"

using namespace klreg;

namespace {

SemModel two_by_one() {
    Eigen::MatrixXd bxh(2, 1);
    bxh << 1, 0;
    return SemModel(Eigen::MatrixXd::Zero(2, 2), bxh, Eigen::Vector2d(1.0, -0.5),
                    Eigen::VectorXd::Constant(1, 0.5), Eigen::MatrixXd::Identity(1, 1));
}

EnvironmentNoiseSpec identity_noise(Eigen::Index d, double sy = 1.0) {
    return {Eigen::MatrixXd::Identity(d, d), sy, NoiseKind::gaussian()};
}

EnvironmentNoiseSpec random_noise(Eigen::Index d, std::uint64_t seed) {
    Rng rng(seed);
    return generate_environment_noise(d, 0, 1.0, random_spd(d, rng), seed);
}

Eigen::MatrixXd sample_cov(const EnvironmentData& data) {
    Eigen::MatrixXd xc = data.x.rowwise() - data.x.colwise().mean();
    return xc.transpose() * xc / static_cast<double>(data.n());
}

}  // namespace

TEST_CASE("population moments: hand example with a single latent on the first covariate") {
    const auto pm = population_moments(two_by_one(), identity_noise(2));
    CHECK(pm.sigma_x.isApprox(Eigen::Vector2d(2, 1).asDiagonal().toDenseMatrix(), 1e-14));
    CHECK(pm.eta_star(0) == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(pm.eta_star(1) == doctest::Approx(0.0));
}

TEST_CASE("population moments: no confounding reduces to the noise covariance") {
    Rng rng(3);
    const Eigen::MatrixXd sx = random_spd(3, rng);
    const Eigen::Vector3d beta(1, 2, -1);
    SemModel m(Eigen::MatrixXd::Zero(3, 3), Eigen::MatrixXd::Zero(3, 2), beta, Eigen::Vector2d(0.5, 0.5),
               Eigen::MatrixXd::Identity(2, 2));
    const auto pm = population_moments(m, {sx, 1.3, NoiseKind::gaussian()});
    CHECK((pm.sigma_x - sx).cwiseAbs().maxCoeff() < 1e-14);
    CHECK(pm.eta_star.norm() < 1e-15);
    CHECK((pm.sigma_xy - sx * beta).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("population moments agree with the full-system oracle") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const SemModel m = generate_baseline_model(5, 2, 2, seed);
        const auto noise = random_noise(5, 100 + seed);
        const auto pm = population_moments(m, noise);
        const auto ref = oracle::full_system_moments(m, noise);
        const double scale = ref.sigma_x.cwiseAbs().maxCoeff();
        CHECK((pm.sigma_x - ref.sigma_x).cwiseAbs().maxCoeff() < 1e-12 * scale);
        CHECK((pm.sigma_xy - ref.sigma_xy).cwiseAbs().maxCoeff() < 1e-12 * scale);
        CHECK(pm.sigma_y == doctest::Approx(ref.sigma_y).epsilon(1e-12));
        CHECK((pm.sigma_xy - (pm.sigma_x * m.beta_star + pm.eta_star)).norm() < 1e-10);
    }
}

TEST_CASE("eta* is the same for every environment of a model") {
    const SemModel m = generate_baseline_model(8, 2, 3, 42);
    const Eigen::MatrixXd first = [&] {
        const auto pm = population_moments(m, random_noise(8, 1));
        return Eigen::MatrixXd(pm.sigma_xy - pm.sigma_x * m.beta_star);
    }();
    for (std::uint64_t s = 2; s < 6; ++s) {
        const auto pm = population_moments(m, random_noise(8, s));
        CHECK((pm.sigma_xy - pm.sigma_x * m.beta_star - first).cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("sampling: shape, determinism and argument checks") {
    const SemModel m = generate_baseline_model(4, 2, 2, 7);
    const auto noise = random_noise(4, 8);
    const auto a = sample_environment(m, noise, 100, 99, "env");
    CHECK(a.x.rows() == 100);
    CHECK(a.x.cols() == 4);
    CHECK(a.y.size() == 100);
    CHECK(a.env_id == "env");
    const auto b = sample_environment(m, noise, 100, 99);
    CHECK(a.x == b.x);
    CHECK(a.y == b.y);
    const auto c = sample_environment(m, noise, 100, 100);
    CHECK(a.x != c.x);
    CHECK_THROWS_AS(sample_environment(m, noise, 0, 1), std::invalid_argument);
}

TEST_CASE("sampling: empirical covariance converges to the population moments") {
    const SemModel m = generate_baseline_model(5, 2, 2, 11);
    const auto noise = random_noise(5, 12);
    const auto pm = population_moments(m, noise);
    const auto data = sample_environment(m, noise, 200000, 13);
    CHECK((sample_cov(data) - pm.sigma_x).norm() < 0.05 * pm.sigma_x.norm());
}

TEST_CASE("sampling: Frobenius error roughly halves when n quadruples") {
    const SemModel m = generate_baseline_model(4, 1, 2, 21);
    const auto noise = random_noise(4, 22);
    const auto pm = population_moments(m, noise);
    double small = 0.0, large = 0.0;
    const int reps = 40;
    for (int r = 0; r < reps; ++r) {
        small += (sample_cov(sample_environment(m, noise, 2000, 1000 + r)) - pm.sigma_x).norm();
        large += (sample_cov(sample_environment(m, noise, 8000, 5000 + r)) - pm.sigma_x).norm();
    }
    const double ratio = large / small;
    CHECK(ratio > 0.5 * 0.7);
    CHECK(ratio < 0.5 * 1.3);
}

TEST_CASE("sampling: Student-t noise keeps the specified covariance") {
    const SemModel m = generate_baseline_model(4, 2, 2, 31);
    auto noise = random_noise(4, 32);
    noise.kind = NoiseKind::student_t(30.0);
    const auto pm = population_moments(m, noise);
    const auto data = sample_environment(m, noise, 200000, 33);
    CHECK((sample_cov(data) - pm.sigma_x).norm() < 0.10 * pm.sigma_x.norm());
    noise.kind = NoiseKind::student_t(2.0);
    CHECK_THROWS_AS(sample_environment(m, noise, 10, 1), std::invalid_argument);
}

TEST_CASE("baseline model layout") {
    const SemModel m = generate_baseline_model(100, 2, 10, 5);
    for (Eigen::Index j = 0; j < 100; ++j) CHECK(m.beta_star(j) == (j < 10 ? 1.0 : 0.0));
    CHECK(m.eta0.size() == 2);
    CHECK(m.eta0(0) == 0.5);
    CHECK(m.eta0(1) == 0.5);
    CHECK(m.sigma_h.isIdentity());
    bool upper_zero = true;
    for (Eigen::Index i = 0; i < 100; ++i)
        for (Eigen::Index j = i; j < 100; ++j) upper_zero = upper_zero && m.b_xx(i, j) == 0.0;
    CHECK(upper_zero);
    CHECK(m.b_xx.cwiseAbs().maxCoeff() <= 1.0);
    // roughly 30% nonzero in the strict lower triangle
    const double density = (m.b_xx.array() != 0.0).count() / (100.0 * 99.0 / 2.0);
    CHECK(density == doctest::Approx(0.3).epsilon(0.1));

    const SemModel null_model = generate_baseline_model(5, 1, 0, 6);
    CHECK(null_model.beta_star.isZero());
    CHECK_THROWS_AS(generate_baseline_model(5, 1, 6, 1), std::invalid_argument);
}

TEST_CASE("model construction rejects singular (I - B_XX) and bad sigma_h") {
    Eigen::MatrixXd bxx = Eigen::MatrixXd::Identity(2, 2);
    CHECK_THROWS_AS(SemModel(bxx, Eigen::MatrixXd::Zero(2, 1), Eigen::VectorXd::Zero(2),
                             Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Identity(1, 1)),
                    std::invalid_argument);
    CHECK_THROWS_AS(SemModel(Eigen::MatrixXd::Zero(2, 2), Eigen::MatrixXd::Zero(2, 1),
                             Eigen::VectorXd::Zero(2), Eigen::VectorXd::Zero(1),
                             -Eigen::MatrixXd::Identity(1, 1)),
                    std::invalid_argument);
}

TEST_CASE("environment noise interpolation") {
    Rng rng(1);
    const Eigen::MatrixXd base = random_spd(4, rng);
    const auto a = generate_environment_noise(4, 0, 0.0, base, 10);
    const auto b = generate_environment_noise(4, 1, 0.0, base, 10);
    CHECK(a.sigma_ex == base);
    CHECK(b.sigma_ex == base);
    CHECK(a.sigma_ey >= 1.0);

    const auto own0 = generate_environment_noise(4, 0, 1.0, base, 10);
    const auto own1 = generate_environment_noise(4, 1, 1.0, base, 10);
    CHECK(own0.sigma_ex != base);
    CHECK(own0.sigma_ex != own1.sigma_ex);
    // same per-environment draw at every t
    const auto half = generate_environment_noise(4, 0, 0.5, base, 10);
    CHECK((half.sigma_ex - 0.5 * (base + own0.sigma_ex)).cwiseAbs().maxCoeff() < 1e-14);
    CHECK(half.sigma_ey == own0.sigma_ey);

    const Eigen::MatrixXd mid = interpolate_noise_cov(Eigen::MatrixXd::Identity(3, 3),
                                                      3.0 * Eigen::MatrixXd::Identity(3, 3), 0.5);
    CHECK(mid.isApprox(2.0 * Eigen::MatrixXd::Identity(3, 3)));
    CHECK_THROWS_AS(interpolate_noise_cov(base, base, 1.5), std::invalid_argument);
}

TEST_CASE("random SPD matrices have eigenvalues in the configured band") {
    Rng rng(77);
    for (int i = 0; i < 20; ++i) {
        const Eigen::MatrixXd s = random_spd(6, rng);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s);
        CHECK(es.eigenvalues().minCoeff() >= 0.3 - 1e-12);
        CHECK(es.eigenvalues().maxCoeff() <= 2.5 + 1e-12);
    }
}

TEST_CASE("perturbation") {
    const SemModel m = generate_baseline_model(5, 2, 2, 3);
    const SemModel same = perturb_model(m, PerturbTarget::BXX, 0.0, 9);
    CHECK(same.b_xx == m.b_xx);
    CHECK(same.b_xh == m.b_xh);
    CHECK(same.sigma_h == m.sigma_h);

    const SemModel p = perturb_model(m, PerturbTarget::BXX, 0.1, 9);
    Rng rng(9);
    const Eigen::MatrixXd z = standard_normal_matrix(5, 5, rng);
    CHECK(((p.b_xx - m.b_xx) - 0.1 * z).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(p.b_xh == m.b_xh);

    const SemModel ph = perturb_model(m, PerturbTarget::BXH, 0.3, 4);
    CHECK(ph.b_xx == m.b_xx);
    CHECK(ph.b_xh != m.b_xh);

    for (double s : {0.1, 1.0, 5.0, 50.0}) {
        const SemModel ps = perturb_model(m, PerturbTarget::SigmaH, s, 17);
        CHECK(ps.sigma_h.isApprox(ps.sigma_h.transpose()));
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(ps.sigma_h);
        CHECK(es.eigenvalues().minCoeff() > 0.0);
    }
    CHECK_THROWS_AS(perturb_model(m, PerturbTarget::BXX, -1.0, 1), std::invalid_argument);
}

TEST_CASE("perturbation gives up on a singular B_XX after the retry budget") {
    const SemModel m = generate_baseline_model(3, 1, 1, 2);
    // every draw is non-finite, so no candidate is accepted
    CHECK_THROWS_AS(perturb_model(m, PerturbTarget::BXX, std::numeric_limits<double>::infinity(), 5),
                    ResampleExhaustedError);
}

TEST_CASE("model and noise JSON round trip") {
    const SemModel m = generate_baseline_model(4, 2, 2, 8);
    const json j = m;
    const SemModel back = j.get<SemModel>();
    CHECK(back.b_xx == m.b_xx);
    CHECK(back.b_xh == m.b_xh);
    CHECK(back.beta_star == m.beta_star);
    CHECK(back.eta0 == m.eta0);
    CHECK(back.sigma_h == m.sigma_h);

    EnvironmentNoiseSpec n = random_noise(4, 2);
    n.kind = NoiseKind::student_t(5.0);
    const EnvironmentNoiseSpec nb = json(n).get<EnvironmentNoiseSpec>();
    CHECK(nb.sigma_ex == n.sigma_ex);
    CHECK(nb.sigma_ey == n.sigma_ey);
    CHECK(nb.kind == n.kind);
}
