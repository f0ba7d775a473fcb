#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "klreg/errors.hpp"
#include "klreg/harness.hpp"
#include "klreg/ingest.hpp"
#include "klreg/random.hpp"
#include "klreg/self_check.hpp"
#include "klreg/serialize.hpp"
#include "temp_dir.hpp"

using namespace klreg;

namespace {

ExperimentConfig small(ExperimentKind kind, std::vector<double> values) {
    ExperimentConfig cfg;
    cfg.kind = kind;
    cfg.d = 5;
    cfg.d0 = 2;
    cfg.q = 2;
    cfg.e_count = 3;
    cfg.n_per_env = 400;
    cfg.replicates = 3;
    cfg.sweep_values = std::move(values);
    cfg.seed = 11;
    cfg.threads = 1;
    return cfg;
}

ExperimentConfig desk(ExperimentKind kind, std::vector<double> values, std::vector<Estimator> est) {
    ExperimentConfig cfg;
    cfg.kind = kind;
    cfg.d = 20;
    cfg.replicates = 20;
    cfg.sweep_values = std::move(values);
    cfg.estimators = std::move(est);
    cfg.seed = 5;
    return cfg;
}

std::size_t cells(const ExperimentConfig& cfg) {
    return static_cast<std::size_t>(cfg.replicates) * cfg.sweep_values.size() * cfg.estimators.size();
}

}  // namespace

TEST_CASE("config: defaults, preset and round trip") {
    const auto def = config_from_json({{"sweep_values", {5000}}});
    CHECK(def.d == 100);
    CHECK(def.q == 2);
    CHECK(def.d0 == 10);
    CHECK(def.e_count == 4);
    CHECK(def.n_per_env == 5000);
    CHECK(def.replicates == 50);
    CHECK(def.estimators.size() == 5);
    CHECK(def.kind == ExperimentKind::SampleSweep);

    const auto deskcfg = config_from_json({{"preset", "desk"}, {"sweep_values", {500}}});
    CHECK(deskcfg.d == 20);
    const auto override_d = config_from_json({{"preset", "desk"}, {"d", 30}, {"sweep_values", {500}}});
    CHECK(override_d.d == 30);

    nlohmann::json j{{"kind", "StudentTSweep"}, {"d", 8}, {"d0", 3}, {"sweep_values", {0, 5}},
                     {"estimators", "kl, avg_ols"}, {"lasso", {{"lambda", 0.01}, {"folds", 3}}},
                     {"perturb_target", "bxh"}, {"seed", 42u}, {"jitter", 1e-6}};
    const auto cfg = config_from_json(j);
    CHECK(cfg.estimators == std::vector<Estimator>{Estimator::Kl, Estimator::AvgOls});
    CHECK(cfg.lasso.lambda.value() == 0.01);
    CHECK(cfg.perturb_target == PerturbTarget::BXH);
    const auto back = config_from_json(to_json(cfg));
    CHECK(to_json(back) == to_json(cfg));
}

TEST_CASE("config: invalid documents") {
    auto bad = [](nlohmann::json j) { CHECK_THROWS_AS(config_from_json(j), std::invalid_argument); };
    bad({{"sweep_values", nlohmann::json::array()}});
    bad({{"sweep_values", {5000}}, {"replicates", 0}});
    bad({{"sweep_values", {5000}}, {"colour", "red"}});
    bad({{"sweep_values", {5000}}, {"lasso", {{"fold", 2}}}});
    bad({{"sweep_values", {5000}}, {"estimators", {"kl", "ridge"}}});
    bad({{"sweep_values", {5000}}, {"estimators", {"kl", "kl"}}});
    bad({{"sweep_values", {5000}}, {"d", "twenty"}});
    bad({{"sweep_values", {10}}, {"kind", "SampleSweep"}});  // n < d + 2
    bad({{"sweep_values", {1.5}}, {"kind", "DiversitySweep"}});
    bad({{"sweep_values", {2.0}}, {"kind", "StudentTSweep"}});
    bad({{"sweep_values", {1}}, {"kind", "Sweepish"}});
    bad({{"sweep_values", {1}}, {"e_count", 1}});
    bad({{"kind", "RealData"}});
    bad(nlohmann::json::array());
    CHECK_NOTHROW(config_from_json({{"kind", "RealData"}, {"data_dir", "somewhere"}}));
}

TEST_CASE("estimator names") {
    CHECK(parse_estimators("kl,lasso_kl , zero") ==
          std::vector<Estimator>{Estimator::Kl, Estimator::LassoKl, Estimator::Zero});
    CHECK_THROWS_AS(parse_estimators(""), std::invalid_argument);
    CHECK_THROWS_AS(parse_estimators("ols"), std::invalid_argument);
    for (auto e : {Estimator::Kl, Estimator::LassoKl, Estimator::AvgOls, Estimator::PooledTheta, Estimator::Zero})
        CHECK(estimator_from_string(to_string(e)) == e);
}

TEST_CASE("quantiles interpolate linearly") {
    CHECK(quantile({4, 1, 3, 2}, 0.5) == doctest::Approx(2.5));
    CHECK(quantile({4, 1, 3, 2}, 0.25) == doctest::Approx(1.75));
    CHECK(quantile({4, 1, 3, 2}, 1.0) == 4.0);
    CHECK(quantile({7}, 0.3) == 7.0);
    CHECK(std::isnan(quantile({}, 0.5)));
}

TEST_CASE("run_experiment: accounting, ordering and summaries") {
    auto cfg = small(ExperimentKind::SampleSweep, {400, 100});
    const auto r = run_experiment(cfg);
    CHECK(r.rows.size() + r.failures.size() == cells(cfg));
    CHECK(r.failures.empty());
    for (std::size_t i = 1; i < r.rows.size(); ++i) {
        const auto &a = r.rows[i - 1], &b = r.rows[i];
        CHECK(std::make_tuple(a.value, a.replicate, static_cast<int>(a.estimator)) <
              std::make_tuple(b.value, b.replicate, static_cast<int>(b.estimator)));
    }
    CHECK(r.rows.front().value == 100.0);
    for (const auto& row : r.rows) {
        if (row.estimator == Estimator::Zero) CHECK(row.mse == doctest::Approx(2.0 / 5.0));
        CHECK(row.f1 >= 0.0);
        CHECK(row.f1 <= 1.0);
    }
    CHECK(r.summary.size() == 2 * cfg.estimators.size());
    const auto again = summarize(r.rows, cfg.sweep_values, cfg.estimators);
    REQUIRE(again.size() == r.summary.size());
    for (std::size_t i = 0; i < again.size(); ++i) {
        CHECK(again[i].mse_median == r.summary[i].mse_median);
        CHECK(again[i].count == 3);
    }
}

TEST_CASE("run_experiment: replay and thread count do not change rows") {
    auto cfg = small(ExperimentKind::DiversitySweep, {0.5, 1.0});
    const auto a = run_experiment(cfg);
    cfg.threads = 3;
    const auto b = run_experiment(cfg);
    CHECK(same_rows(a, b));
    const auto replay = run_experiment(config_from_json(report_sidecar(a)["config"]));
    CHECK(same_rows(a, replay));
    cfg.seed = 12;
    CHECK_FALSE(same_rows(a, run_experiment(cfg)));
}

TEST_CASE("run_experiment: every sweep kind runs") {
    struct Case {
        ExperimentKind kind;
        std::vector<double> values;
    };
    const std::vector<Case> cases{
        {ExperimentKind::ConfoundingScaleSweep, {0.0, 2.0}}, {ExperimentKind::LatentDimSweep, {0, 1, 4}},
        {ExperimentKind::SparsitySweep, {0, 5}},             {ExperimentKind::SplitComparison, {1, 2}},
        {ExperimentKind::StudentTSweep, {0, 5}},             {ExperimentKind::MisspecificationSweep, {0.0, 0.05}}};
    for (const auto& c : cases) {
        CAPTURE(to_string(c.kind));
        auto cfg = small(c.kind, c.values);
        cfg.replicates = 2;
        const auto r = run_experiment(cfg);
        CHECK(r.rows.size() + r.failures.size() == cells(cfg));
        CHECK(r.rows.size() >= cells(cfg) / 2);
    }
}

TEST_CASE("run_experiment: sparsity sweep changes the truth") {
    auto cfg = small(ExperimentKind::SparsitySweep, {0, 5});
    cfg.estimators = {Estimator::Zero};
    const auto r = run_experiment(cfg);
    CHECK(r.median_mse(0, Estimator::Zero) == 0.0);
    CHECK(r.median_mse(5, Estimator::Zero) == doctest::Approx(1.0));
}

TEST_CASE("run_experiment: estimator failures become failed cells") {
    auto cfg = small(ExperimentKind::SampleSweep, {400});
    cfg.estimators = {Estimator::LassoKl, Estimator::Zero};
    cfg.lasso.lambda = 1e-6;
    cfg.lasso.max_iter = 1;
    const auto r = run_experiment(cfg);
    CHECK(r.rows.size() + r.failures.size() == cells(cfg));
    REQUIRE(r.failures.size() == 3);
    for (const auto& f : r.failures) {
        CHECK(f.estimator == Estimator::LassoKl);
        CHECK_FALSE(f.reason.empty());
    }
    CHECK(std::isnan(r.median_mse(400, Estimator::LassoKl)));
    CHECK(r.median_mse(400, Estimator::Zero) == doctest::Approx(0.4));
}

TEST_CASE("harness examples at desk scale") {
    SUBCASE("more samples lower the kl error") {
        const auto r = run_experiment(desk(ExperimentKind::SampleSweep, {500, 5000}, {Estimator::Kl}));
        CHECK(r.median_mse(5000, Estimator::Kl) < r.median_mse(500, Estimator::Kl));
    }
    SUBCASE("diverse environments help") {
        const auto r = run_experiment(desk(ExperimentKind::DiversitySweep, {0.0, 1.0}, {Estimator::Kl}));
        CHECK(r.median_mse(1.0, Estimator::Kl) < r.median_mse(0.0, Estimator::Kl));
    }
    SUBCASE("without confounding every method does well") {
        auto cfg = desk(ExperimentKind::ConfoundingScaleSweep, {0.0},
                        {Estimator::Kl, Estimator::LassoKl, Estimator::AvgOls, Estimator::PooledTheta, Estimator::Zero});
        cfg.replicates = 5;
        const auto r = run_experiment(cfg);
        CHECK(r.median_mse(0.0, Estimator::Kl) < 0.01);
        CHECK(r.median_mse(0.0, Estimator::AvgOls) < 0.01);
        CHECK(r.median_mse(0.0, Estimator::PooledTheta) < 0.01);
        CHECK(r.median_mse(0.0, Estimator::Zero) == doctest::Approx(0.5));
    }
    SUBCASE("splitting does not help") {
        const auto r = run_experiment(desk(ExperimentKind::SplitComparison, {1, 2}, {Estimator::Kl}));
        CHECK(r.median_mse(2, Estimator::Kl) >= r.median_mse(1, Estimator::Kl));
    }
}

TEST_CASE("reports: csv layout and sidecar") {
    TempDir tmp("report");
    const auto r = run_experiment(small(ExperimentKind::SampleSweep, {100}));
    write_report(r, tmp.path);
    for (const char* f : {"report.csv", "summary.csv", "failures.csv", "report.json"})
        CHECK(std::filesystem::exists(tmp.path / f));
    std::ifstream rows(tmp.path / "report.csv");
    std::string header;
    std::getline(rows, header);
    CHECK(header == "value,replicate,replicate_seed,estimator,mse,f1,wall_ms");
    std::size_t lines = 0;
    for (std::string l; std::getline(rows, l);) ++lines;
    CHECK(lines == r.rows.size());
    std::ifstream side(tmp.path / "report.json");
    const auto j = nlohmann::json::parse(side);
    CHECK(j["seed"] == 11);
    CHECK(j["rows"] == r.rows.size());
    CHECK(same_rows(r, run_experiment(config_from_json(j["config"]))));

    ExperimentReport f;
    f.failures.push_back({1.0, 0, Estimator::Kl, "bad, \"quoted\""});
    std::ostringstream out;
    write_failures_csv(f, out);
    CHECK(out.str() == "value,replicate,estimator,reason\n1,0,kl,\"bad, \"\"quoted\"\"\"\n");
}

TEST_CASE("real data runs every estimator on ingested environments") {
    TempDir tmp("realdata");
    const SemModel m = generate_baseline_model(4, 1, 2, 3);
    Rng rng(4);
    const Eigen::MatrixXd shared = random_spd(4, rng);
    std::vector<EnvironmentData> envs;
    for (std::size_t e = 0; e < 3; ++e)
        envs.push_back(sample_environment(m, generate_environment_noise(4, e, 1.0, shared, 5), 3000, 6 + e,
                                          "e" + std::to_string(e)));
    write_environments(tmp.path, default_covariate_names(4), "y", envs, {{"beta_star", vector_to_json(m.beta_star)}});
    ExperimentConfig cfg;
    cfg.kind = ExperimentKind::RealData;
    cfg.data_dir = tmp.path.string();
    const auto r = run_experiment(cfg);
    CHECK(r.rows.size() + r.failures.size() == cfg.estimators.size());
    CHECK(r.failures.empty());
    for (const auto& row : r.rows) CHECK(std::isfinite(row.mse));
    CHECK(r.median_mse(0.0, Estimator::Kl) < 0.01);
    CHECK(r.real_data["estimates"]["lasso_kl"].contains("lambda"));
    CHECK(r.real_data["estimates"]["kl"]["beta"].size() == 4);
}

TEST_CASE("rank_edges: a single strong regulator ranks first") {
    Rng rng(21);
    TargetData t;
    t.name = "target";
    for (int e = 0; e < 3; ++e) {
        EnvironmentData env;
        const Eigen::MatrixXd l = random_spd(4, rng).llt().matrixL();
        env.x = standard_normal_matrix(2000, 4, rng) * l.transpose();
        env.y = 2.0 * env.x.col(2) + 0.5 * standard_normal_matrix(2000, 1, rng).col(0);
        env.env_id = "e" + std::to_string(e);
        t.envs.push_back(env);
    }
    const std::vector<TargetData> targets{t};
    const auto res = rank_edges(targets, {"a", "b", "c", "d"}, {{"c", "target"}});
    const auto top = sorted_candidates(res.ranking).front();
    CHECK(top.index == 2);
    CHECK(top.label == "c->target");
    // lambda_max itself gives beta = 0, so the earliest entry is the second grid point
    CHECK(top.score == doctest::Approx(default_grid(1.0, 50, 1e-4)[1]));
    CHECK(aupr(res.ranking) == 1.0);
    std::ostringstream csv;
    write_ranking_csv(res, csv);
    CHECK(csv.str().rfind("rank,regulator,target,score,is_true\n1,c,target,", 0) == 0);
}

TEST_CASE("rank_edges: degenerate targets are skipped, all-failed raises") {
    const auto grn = generate_synthetic_grn(6, 1, 2, 2, 3, 500, 8);
    auto per_target = slice_targets(grn.tables, grn.genes, grn.regulators, grn.targets);
    for (auto& env : per_target[1].envs) env.y.setConstant(3.0);
    const auto res = rank_edges(per_target, grn.regulators, grn.truth);
    REQUIRE(res.skipped.size() == 1);
    CHECK(res.skipped[0].first == "t2");
    CHECK(res.skipped[0].second.find("constant") != std::string::npos);
    CHECK(res.ranking.scores.size() == 6);
    CHECK(res.ranking.truth.size() == 2);

    for (auto& env : per_target[0].envs) env.y.setZero();
    CHECK_THROWS_AS(rank_edges(per_target, grn.regulators, grn.truth), EmptyRankingError);
    CHECK_THROWS_AS(rank_edges(per_target, {"g1", "t1"}, {}), std::invalid_argument);
    CHECK_THROWS_AS(rank_edges(per_target, grn.regulators, {{"g1", "nope"}}), std::invalid_argument);
}

TEST_CASE("synthetic GRN layout") {
    const auto grn = generate_synthetic_grn(10, 2, 3, 4, 4, 200, 1);
    CHECK(grn.genes.size() == 13);
    CHECK(grn.truth.size() == 12);
    CHECK(grn.tables.size() == 4);
    for (const auto& t : grn.tables) {
        CHECK(t.x.rows() == 200);
        CHECK(t.x.cols() == 13);
    }
    const auto again = generate_synthetic_grn(10, 2, 3, 4, 4, 200, 1);
    CHECK(again.truth == grn.truth);
    CHECK((again.tables[2].x - grn.tables[2].x).cwiseAbs().maxCoeff() == 0.0);
    const auto sliced = slice_targets(grn.tables, grn.genes, grn.regulators, grn.targets);
    REQUIRE(sliced.size() == 3);
    CHECK(sliced[1].envs[0].x.cols() == 10);
    CHECK((sliced[1].envs[0].y - grn.tables[0].x.col(11)).cwiseAbs().maxCoeff() == 0.0);
    CHECK_THROWS_AS(slice_targets(grn.tables, grn.genes, {"g1"}, {"zz"}), std::invalid_argument);
    CHECK_THROWS_AS(generate_synthetic_grn(3, 1, 1, 4, 2, 100, 1), std::invalid_argument);
}

TEST_CASE("self check passes") {
    for (const auto& c : self_check()) {
        CAPTURE(c.name);
        CAPTURE(c.detail);
        CHECK(c.passed);
    }
}
