#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "klreg/errors.hpp"
#include "klreg/eval.hpp"
#include "klreg/harness.hpp"
#include "klreg/ingest.hpp"
#include "klreg/kl_core.hpp"
#include "klreg/random.hpp"
#include "klreg/self_check.hpp"
#include "klreg/serialize.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace klreg;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInvalid = 2;
constexpr int kExitNumerical = 3;

struct InvalidInput : std::runtime_error {
    using std::runtime_error::runtime_error;
};

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InvalidInput("cannot open " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw InvalidInput(path + ": " + e.what());
    }
}

// A report sidecar carries its config under "config"; plain config files are accepted too.
ExperimentConfig load_config(const std::string& path) {
    json j = read_json_file(path);
    if (j.is_object() && j.contains("config") && j["config"].is_object()) j = j["config"];
    return config_from_json(j);
}

void emit_json(const json& j, const std::string& out) {
    if (out.empty()) {
        std::cout << j.dump(2) << '\n';
        return;
    }
    fs::path p(out);
    if (fs::is_directory(p)) p /= "fit.json";
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream(p) << j.dump(2) << '\n';
    std::cerr << "wrote " << p.string() << '\n';
}

struct Common {
    std::optional<std::uint64_t> seed;
    std::string config;
    std::string out;
    std::string estimators;
    std::optional<double> jitter;
};

void apply_overrides(ExperimentConfig& cfg, const Common& c) {
    if (c.seed) cfg.seed = *c.seed;
    if (!c.estimators.empty()) cfg.estimators = parse_estimators(c.estimators);
    if (c.jitter) cfg.jitter = *c.jitter;
    cfg.validate();
}

// ---------------------------------------------------------------- simulate

struct SimulateArgs {
    bool grn = false;
    int targets = 3;
    int parents = 5;
};

int cmd_simulate(const Common& c, const SimulateArgs& s) {
    if (c.out.empty()) throw InvalidInput("simulate needs --out <dir>");
    ExperimentConfig cfg;
    cfg.d = 20;
    cfg.sweep_values = {static_cast<double>(cfg.n_per_env)};
    if (!c.config.empty()) cfg = load_config(c.config);
    apply_overrides(cfg, c);

    if (s.grn) {
        const auto grn = generate_synthetic_grn(cfg.d, cfg.q, s.targets, s.parents, cfg.e_count, cfg.n_per_env,
                                                cfg.seed);
        json extra;
        extra["regulators"] = grn.regulators;
        extra["targets"] = grn.targets;
        extra["truth"] = json::array();
        for (const auto& [r, t] : grn.truth) extra["truth"].push_back({r, t});
        extra["seed"] = cfg.seed;
        fs::create_directories(c.out);
        json manifest = extra;
        manifest["environments"] = json::array();
        for (const auto& table : grn.tables) {
            write_table_csv(fs::path(c.out) / (table.env_id + ".csv"), grn.genes, table.x);
            manifest["environments"].push_back({{"label", table.env_id}, {"file", table.env_id + ".csv"}});
        }
        std::ofstream(fs::path(c.out) / "manifest.json") << manifest.dump(2) << '\n';
        std::cerr << "wrote " << grn.tables.size() << " gene tables to " << c.out << '\n';
        return kExitOk;
    }

    SemModel model = generate_baseline_model(cfg.d, cfg.q, cfg.d0, derive_seed(cfg.seed, {0}));
    model.eta0 *= cfg.confounding_scale;
    Rng base_rng(derive_seed(cfg.seed, {0, 1000}));
    const Eigen::MatrixXd shared = random_spd(cfg.d, base_rng);
    std::vector<EnvironmentData> envs;
    for (std::size_t e = 0; e < cfg.e_count; ++e) {
        auto noise = generate_environment_noise(cfg.d, e, cfg.diversity_t, shared, derive_seed(cfg.seed, {0, 2000}));
        if (cfg.noise_dof > 0.0) noise.kind = NoiseKind::student_t(cfg.noise_dof);
        envs.push_back(sample_environment(model, noise, cfg.n_per_env, derive_seed(cfg.seed, {0, 0, e}),
                                          "env" + std::to_string(e)));
    }
    json extra;
    extra["beta_star"] = vector_to_json(model.beta_star);
    extra["eta_star"] = vector_to_json(model.eta_star());
    extra["model"] = model;
    extra["seed"] = cfg.seed;
    write_environments(c.out, default_covariate_names(cfg.d), "y", envs, extra);
    std::cerr << "wrote " << envs.size() << " environments to " << c.out << '\n';
    return kExitOk;
}

// ---------------------------------------------------------------- fit

int cmd_fit(const Common& c, const std::string& data_dir) {
    if (data_dir.empty()) throw InvalidInput("fit needs a data directory");
    ExperimentConfig cfg;
    if (!c.config.empty()) cfg = load_config(c.config);
    cfg.kind = ExperimentKind::RealData;
    cfg.data_dir = data_dir;
    if (c.estimators.empty() && c.config.empty()) cfg.estimators = {Estimator::Kl};
    apply_overrides(cfg, c);

    nlohmann::json manifest;
    read_environment_tables(data_dir, &manifest);
    const IngestedData ing = ingest_environments(data_dir);
    MomentOptions mopts;
    mopts.jitter = cfg.jitter;

    json out;
    out["data_dir"] = data_dir;
    out["covariates"] = ing.covariates;
    out["response"] = ing.response;
    out["seed"] = cfg.seed;
    out["jitter"] = cfg.jitter;
    out["estimates"] = json::object();
    std::optional<Eigen::VectorXd> beta_star;
    if (manifest.contains("beta_star")) beta_star = vector_from_json(manifest["beta_star"]);

    int ok = 0;
    for (const auto& o : run_estimators(ing.envs, cfg.estimators, cfg.lasso, mopts, cfg.seed)) {
        const std::string name = to_string(o.estimator);
        if (!o.beta) {
            out["estimates"][name] = {{"failure", o.failure}};
            continue;
        }
        ++ok;
        json est{{"beta", vector_to_json(*o.beta)}};
        if (o.lambda) est["lambda"] = *o.lambda;
        if (o.estimator == Estimator::Kl) {
            std::vector<EnvironmentMoments> moments;
            for (const auto& env : ing.envs) moments.push_back(estimate_moments(env, mopts));
            FitOptions fo;
            fo.with_variance = true;
            est["fit"] = fit_kl(moments, fo);
        }
        if (beta_star && beta_star->size() == o.beta->size()) est["mse"] = mse(*o.beta, *beta_star);
        out["estimates"][name] = est;
    }
    emit_json(out, c.out);
    return ok > 0 ? kExitOk : kExitNumerical;
}

// ---------------------------------------------------------------- sweep

int cmd_sweep(const Common& c) {
    if (c.config.empty()) throw InvalidInput("sweep needs --config <file>");
    ExperimentConfig cfg = load_config(c.config);
    apply_overrides(cfg, c);
    const auto report = run_experiment(cfg);
    if (!c.out.empty()) {
        write_report(report, c.out);
        std::cerr << "wrote report to " << c.out << '\n';
    } else {
        write_summary_csv(report, std::cout);
    }
    std::cerr << report.rows.size() << " rows, " << report.failures.size() << " failed cells\n";
    return report.rows.empty() ? kExitNumerical : kExitOk;
}

// ---------------------------------------------------------------- rank-edges

int cmd_rank_edges(const Common& c, const std::string& data_dir, const RankOptions& base) {
    if (data_dir.empty()) throw InvalidInput("rank-edges needs a data directory");
    RankOptions opts = base;
    if (c.jitter) opts.moments.jitter = *c.jitter;
    json manifest;
    const auto tables = read_environment_tables(data_dir, &manifest);
    if (!manifest.contains("regulators") || !manifest.contains("targets"))
        throw InvalidInput("manifest needs \"regulators\" and \"targets\" lists");
    std::vector<std::string> regulators, targets;
    std::vector<std::pair<std::string, std::string>> truth;
    try {
        regulators = manifest["regulators"].get<std::vector<std::string>>();
        targets = manifest["targets"].get<std::vector<std::string>>();
        if (manifest.contains("truth"))
            for (const auto& p : manifest["truth"]) truth.emplace_back(p.at(0).get<std::string>(), p.at(1).get<std::string>());
    } catch (const json::exception& e) {
        throw InvalidInput(std::string("manifest: ") + e.what());
    }
    std::vector<EnvironmentData> gene_tables;
    for (const auto& t : tables) gene_tables.push_back({t.values, Eigen::VectorXd(), t.label});
    const auto per_target = slice_targets(gene_tables, tables.front().columns, regulators, targets);
    const auto result = rank_edges(per_target, regulators, truth, opts);

    for (const auto& [t, reason] : result.skipped) std::cerr << "skipped target " << t << ": " << reason << '\n';
    json summary{{"candidates", result.ranking.scores.size()},
                 {"skipped", json::array()},
                 {"grid_points", opts.grid_points},
                 {"grid_ratio", opts.grid_ratio}};
    for (const auto& [t, reason] : result.skipped) summary["skipped"].push_back({{"target", t}, {"reason", reason}});
    std::optional<std::vector<PrPoint>> curve;
    if (!result.ranking.truth.empty()) {
        summary["aupr"] = aupr(result.ranking);
        curve = pr_curve(result.ranking);
    }
    if (c.out.empty()) {
        write_ranking_csv(result, std::cout);
    } else {
        fs::create_directories(c.out);
        std::ofstream rank_file(fs::path(c.out) / "ranking.csv");
        write_ranking_csv(result, rank_file);
        if (curve) {
            std::ofstream pr_file(fs::path(c.out) / "pr_curve.csv");
            write_pr_csv(*curve, pr_file);
        }
        std::ofstream(fs::path(c.out) / "ranking.json") << summary.dump(2) << '\n';
    }
    if (summary.contains("aupr")) std::cerr << "AUPR " << summary["aupr"].get<double>() << '\n';
    return kExitOk;
}

int cmd_check() {
    const auto checks = self_check();
    print_checks(checks, std::cout);
    for (const auto& c : checks)
        if (!c.passed) return kExitNumerical;
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"klreg: Kullback-Leibler regression across environments"};
    app.require_subcommand(1);
    Common common;
    auto add_common = [&](CLI::App* sub, bool config, bool estimators) {
        sub->add_option("--seed", common.seed, "base RNG seed");
        if (config) sub->add_option("--config", common.config, "experiment config JSON (or a report.json sidecar)");
        sub->add_option("--out", common.out, "output directory or file");
        if (estimators)
            sub->add_option("--estimators", common.estimators, "comma list of kl, lasso_kl, avg_ols, pooled_theta, zero");
        sub->add_option("--jitter", common.jitter, "ridge added to every covariance")->check(CLI::NonNegativeNumber);
    };

    SimulateArgs sim;
    auto* simulate = app.add_subcommand("simulate", "write synthetic environments as CSV files plus manifest.json");
    add_common(simulate, true, false);
    simulate->add_flag("--grn", sim.grn, "write gene tables for rank-edges instead");
    simulate->add_option("--targets", sim.targets, "target genes (--grn)")->check(CLI::PositiveNumber);
    simulate->add_option("--parents", sim.parents, "regulators per target (--grn)")->check(CLI::PositiveNumber);

    std::string fit_dir;
    auto* fit = app.add_subcommand("fit", "fit estimators to an ingested data directory (JSON output)");
    fit->add_option("data", fit_dir, "directory with manifest.json and one CSV per environment")->required();
    add_common(fit, true, true);

    auto* sweep = app.add_subcommand("sweep", "run an experiment from a config file");
    add_common(sweep, true, true);

    std::string rank_dir;
    RankOptions rank_opts;
    auto* rank = app.add_subcommand("rank-edges", "rank regulator->target edges by lasso entry penalty");
    rank->add_option("data", rank_dir, "directory with gene tables and a manifest")->required();
    add_common(rank, false, false);
    rank->add_option("--grid-points", rank_opts.grid_points, "penalty grid size")->check(CLI::Range(2, 10000));
    rank->add_option("--grid-ratio", rank_opts.grid_ratio, "smallest penalty relative to lambda_max")
        ->check(CLI::Range(1e-12, 0.999));
    rank->add_flag("--standardize", rank_opts.standardize, "scale regulator columns to unit variance first");

    auto* check = app.add_subcommand("check", "run the built-in identity and oracle checks");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitInvalid;
    }

    try {
        if (*simulate) return cmd_simulate(common, sim);
        if (*fit) return cmd_fit(common, fit_dir);
        if (*sweep) return cmd_sweep(common);
        if (*rank) return cmd_rank_edges(common, rank_dir, rank_opts);
        if (*check) return cmd_check();
    } catch (const InvalidInput& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitInvalid;
    } catch (const IngestError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitInvalid;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitInvalid;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return kExitOk;
}
