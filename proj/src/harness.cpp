#include "klreg/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "klreg/errors.hpp"
#include "klreg/ingest.hpp"
#include "klreg/kl_core.hpp"
#include "klreg/random.hpp"
#include "klreg/serialize.hpp"

namespace klreg {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

const std::vector<std::pair<ExperimentKind, std::string>> kKindNames{
    {ExperimentKind::SampleSweep, "SampleSweep"},
    {ExperimentKind::DiversitySweep, "DiversitySweep"},
    {ExperimentKind::ConfoundingScaleSweep, "ConfoundingScaleSweep"},
    {ExperimentKind::LatentDimSweep, "LatentDimSweep"},
    {ExperimentKind::SparsitySweep, "SparsitySweep"},
    {ExperimentKind::SplitComparison, "SplitComparison"},
    {ExperimentKind::StudentTSweep, "StudentTSweep"},
    {ExperimentKind::MisspecificationSweep, "MisspecificationSweep"},
    {ExperimentKind::RealData, "RealData"},
};

const std::vector<std::pair<Estimator, std::string>> kEstimatorNames{
    {Estimator::Kl, "kl"},
    {Estimator::LassoKl, "lasso_kl"},
    {Estimator::AvgOls, "avg_ols"},
    {Estimator::PooledTheta, "pooled_theta"},
    {Estimator::Zero, "zero"},
};

bool is_count(double v) { return std::isfinite(v) && v >= 0.0 && v == std::floor(v) && v < 1e9; }

// shortest text that reads back to the same double
std::string num(double v) {
    if (std::isnan(v)) return "nan";
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

double elapsed_ms(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

std::string to_string(ExperimentKind k) {
    for (const auto& [kind, name] : kKindNames)
        if (kind == k) return name;
    return "?";
}

ExperimentKind experiment_kind_from_string(const std::string& s) {
    for (const auto& [kind, name] : kKindNames)
        if (name == s) return kind;
    throw std::invalid_argument("unknown experiment kind: " + s);
}

std::string to_string(Estimator e) {
    for (const auto& [est, name] : kEstimatorNames)
        if (est == e) return name;
    return "?";
}

Estimator estimator_from_string(const std::string& s) {
    for (const auto& [est, name] : kEstimatorNames)
        if (name == s) return est;
    throw std::invalid_argument("unknown estimator: '" + s + "' (expected kl, lasso_kl, avg_ols, pooled_theta, zero)");
}

std::vector<Estimator> parse_estimators(const std::string& comma_list) {
    std::vector<Estimator> out;
    std::stringstream in(comma_list);
    std::string item;
    while (std::getline(in, item, ',')) {
        item.erase(0, item.find_first_not_of(" \t"));
        item.erase(item.find_last_not_of(" \t") + 1);
        if (!item.empty()) out.push_back(estimator_from_string(item));
    }
    if (out.empty()) throw std::invalid_argument("estimator list is empty");
    return out;
}

// ---------------------------------------------------------------- config

void ExperimentConfig::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("invalid config: " + m); };
    if (d < 1) fail("d must be >= 1");
    if (q < 0) fail("q must be >= 0");
    if (d0 < 0 || d0 > d) fail("d0 must lie in [0, d]");
    if (replicates < 1) fail("replicates must be >= 1");
    if (estimators.empty()) fail("estimators must be nonempty");
    if (std::set<Estimator>(estimators.begin(), estimators.end()).size() != estimators.size())
        fail("estimators must not repeat");
    if (!(jitter >= 0.0) || !std::isfinite(jitter)) fail("jitter must be a finite value >= 0");
    if (!(dense_support_threshold >= 0.0)) fail("dense_support_threshold must be >= 0");
    if (threads < 0) fail("threads must be >= 0");
    if (lasso.lambda && !(*lasso.lambda >= 0.0 && std::isfinite(*lasso.lambda)))
        fail("lasso.lambda must be a finite value >= 0");
    if (lasso.folds < 2) fail("lasso.folds must be >= 2");
    if (lasso.grid_points < 2) fail("lasso.grid_points must be >= 2");
    if (!(lasso.grid_ratio > 0.0 && lasso.grid_ratio < 1.0)) fail("lasso.grid_ratio must lie in (0, 1)");
    if (lasso.max_iter < 1) fail("lasso.max_iter must be >= 1");
    if (!(lasso.tol > 0.0)) fail("lasso.tol must be > 0");

    if (kind == ExperimentKind::RealData) {
        if (data_dir.empty()) fail("RealData needs data_dir");
        return;
    }
    if (e_count < 2) fail("e_count must be >= 2");
    if (n_per_env < d + 2) fail("n_per_env must be >= d + 2");
    if (!(diversity_t >= 0.0 && diversity_t <= 1.0)) fail("diversity_t must lie in [0, 1]");
    if (!(confounding_scale >= 0.0) || !std::isfinite(confounding_scale))
        fail("confounding_scale must be a finite value >= 0");
    if (!(noise_dof <= 0.0 || noise_dof > 2.0)) fail("noise_dof must be <= 0 (Gaussian) or > 2");
    if (sweep_values.empty()) fail("sweep_values must be nonempty");
    if (std::set<double>(sweep_values.begin(), sweep_values.end()).size() != sweep_values.size())
        fail("sweep_values must not repeat");
    for (double v : sweep_values) {
        const std::string bad = "sweep value " + num(v) + " ";
        if (!std::isfinite(v)) fail(bad + "is not finite");
        switch (kind) {
            case ExperimentKind::SampleSweep:
                if (!is_count(v) || v < static_cast<double>(d + 2)) fail(bad + "must be an integer >= d + 2");
                break;
            case ExperimentKind::DiversitySweep:
                if (v < 0.0 || v > 1.0) fail(bad + "must lie in [0, 1]");
                break;
            case ExperimentKind::ConfoundingScaleSweep:
            case ExperimentKind::MisspecificationSweep:
                if (v < 0.0) fail(bad + "must be >= 0");
                break;
            case ExperimentKind::LatentDimSweep:
                if (!is_count(v)) fail(bad + "must be an integer >= 0");
                break;
            case ExperimentKind::SparsitySweep:
                if (!is_count(v) || v > static_cast<double>(d)) fail(bad + "must be an integer in [0, d]");
                break;
            case ExperimentKind::SplitComparison:
                if (!is_count(v) || v < 1.0) fail(bad + "must be an integer >= 1");
                if (n_per_env / static_cast<Eigen::Index>(v) < d + 2)
                    fail(bad + "leaves fewer than d + 2 rows per part");
                break;
            case ExperimentKind::StudentTSweep:
                if (v > 0.0 && v <= 2.0) fail(bad + "must be <= 0 (Gaussian) or > 2");
                break;
            case ExperimentKind::RealData: break;
        }
    }
}

ExperimentConfig config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw std::invalid_argument("invalid config: expected a JSON object");
    static const std::set<std::string> known{
        "preset", "kind", "d", "q", "d0", "e_count", "n_per_env", "sweep_values", "replicates", "seed",
        "estimators", "lasso", "diversity_t", "confounding_scale", "noise_dof", "perturb_target", "jitter",
        "dense_support_threshold", "threads", "data_dir"};
    static const std::set<std::string> known_lasso{"lambda", "folds", "grid_points", "grid_ratio", "max_iter",
                                                   "tol"};
    for (const auto& [key, _] : j.items())
        if (!known.count(key)) throw std::invalid_argument("invalid config: unknown key '" + key + "'");

    ExperimentConfig cfg;
    try {
        if (j.contains("preset")) {
            const auto p = j.at("preset").get<std::string>();
            if (p == "desk")
                cfg.d = 20;
            else if (p != "paper")
                throw std::invalid_argument("invalid config: unknown preset '" + p + "' (desk or paper)");
        }
        if (j.contains("kind")) cfg.kind = experiment_kind_from_string(j.at("kind").get<std::string>());
        if (j.contains("d")) cfg.d = j.at("d").get<Eigen::Index>();
        if (j.contains("q")) cfg.q = j.at("q").get<Eigen::Index>();
        if (j.contains("d0")) cfg.d0 = j.at("d0").get<Eigen::Index>();
        if (j.contains("e_count")) {
            const auto e = j.at("e_count").get<long long>();
            if (e < 0) throw std::invalid_argument("invalid config: e_count must be >= 2");
            cfg.e_count = static_cast<std::size_t>(e);
        }
        if (j.contains("n_per_env")) cfg.n_per_env = j.at("n_per_env").get<Eigen::Index>();
        if (j.contains("sweep_values")) cfg.sweep_values = j.at("sweep_values").get<std::vector<double>>();
        if (j.contains("replicates")) cfg.replicates = j.at("replicates").get<int>();
        if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("estimators")) {
            const auto& e = j.at("estimators");
            if (e.is_string()) {
                cfg.estimators = parse_estimators(e.get<std::string>());
            } else {
                cfg.estimators.clear();
                for (const auto& name : e) cfg.estimators.push_back(estimator_from_string(name.get<std::string>()));
            }
        }
        if (j.contains("lasso")) {
            const auto& l = j.at("lasso");
            if (!l.is_object()) throw std::invalid_argument("invalid config: lasso must be an object");
            for (const auto& [key, _] : l.items())
                if (!known_lasso.count(key))
                    throw std::invalid_argument("invalid config: unknown key 'lasso." + key + "'");
            if (l.contains("lambda") && !l.at("lambda").is_null()) cfg.lasso.lambda = l.at("lambda").get<double>();
            if (l.contains("folds")) cfg.lasso.folds = l.at("folds").get<int>();
            if (l.contains("grid_points")) cfg.lasso.grid_points = l.at("grid_points").get<int>();
            if (l.contains("grid_ratio")) cfg.lasso.grid_ratio = l.at("grid_ratio").get<double>();
            if (l.contains("max_iter")) cfg.lasso.max_iter = l.at("max_iter").get<int>();
            if (l.contains("tol")) cfg.lasso.tol = l.at("tol").get<double>();
        }
        if (j.contains("diversity_t")) cfg.diversity_t = j.at("diversity_t").get<double>();
        if (j.contains("confounding_scale")) cfg.confounding_scale = j.at("confounding_scale").get<double>();
        if (j.contains("noise_dof")) cfg.noise_dof = j.at("noise_dof").get<double>();
        if (j.contains("perturb_target"))
            cfg.perturb_target = perturb_target_from_string(j.at("perturb_target").get<std::string>());
        if (j.contains("jitter")) cfg.jitter = j.at("jitter").get<double>();
        if (j.contains("dense_support_threshold"))
            cfg.dense_support_threshold = j.at("dense_support_threshold").get<double>();
        if (j.contains("threads")) cfg.threads = j.at("threads").get<int>();
        if (j.contains("data_dir")) cfg.data_dir = j.at("data_dir").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("invalid config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

nlohmann::json to_json(const ExperimentConfig& cfg) {
    nlohmann::json j;
    j["kind"] = to_string(cfg.kind);
    j["d"] = cfg.d;
    j["q"] = cfg.q;
    j["d0"] = cfg.d0;
    j["e_count"] = cfg.e_count;
    j["n_per_env"] = cfg.n_per_env;
    j["sweep_values"] = cfg.sweep_values;
    j["replicates"] = cfg.replicates;
    j["seed"] = cfg.seed;
    j["estimators"] = nlohmann::json::array();
    for (auto e : cfg.estimators) j["estimators"].push_back(to_string(e));
    j["lasso"] = {{"lambda", cfg.lasso.lambda ? nlohmann::json(*cfg.lasso.lambda) : nlohmann::json(nullptr)},
                  {"folds", cfg.lasso.folds},
                  {"grid_points", cfg.lasso.grid_points},
                  {"grid_ratio", cfg.lasso.grid_ratio},
                  {"max_iter", cfg.lasso.max_iter},
                  {"tol", cfg.lasso.tol}};
    j["diversity_t"] = cfg.diversity_t;
    j["confounding_scale"] = cfg.confounding_scale;
    j["noise_dof"] = cfg.noise_dof;
    j["perturb_target"] = to_string(cfg.perturb_target);
    j["jitter"] = cfg.jitter;
    j["dense_support_threshold"] = cfg.dense_support_threshold;
    j["threads"] = cfg.threads;
    j["data_dir"] = cfg.data_dir;
    return j;
}

// ---------------------------------------------------------------- summaries

double quantile(std::vector<double> xs, double p) {
    if (xs.empty()) return kNaN;
    std::sort(xs.begin(), xs.end());
    const double h = (static_cast<double>(xs.size()) - 1.0) * std::clamp(p, 0.0, 1.0);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, xs.size() - 1);
    return xs[lo] + (h - static_cast<double>(lo)) * (xs[hi] - xs[lo]);
}

std::vector<CellSummary> summarize(const std::vector<ReportRow>& rows, std::span<const double> values,
                                   std::span<const Estimator> estimators) {
    std::vector<double> sorted_values(values.begin(), values.end());
    std::sort(sorted_values.begin(), sorted_values.end());
    std::vector<CellSummary> out;
    for (double v : sorted_values) {
        for (Estimator e : estimators) {
            std::vector<double> m, f;
            for (const auto& r : rows)
                if (r.value == v && r.estimator == e) {
                    m.push_back(r.mse);
                    f.push_back(r.f1);
                }
            CellSummary s;
            s.value = v;
            s.estimator = e;
            s.count = m.size();
            s.mse_median = quantile(m, 0.5);
            s.mse_q1 = quantile(m, 0.25);
            s.mse_q3 = quantile(m, 0.75);
            s.f1_median = quantile(f, 0.5);
            s.f1_q1 = quantile(f, 0.25);
            s.f1_q3 = quantile(f, 0.75);
            out.push_back(s);
        }
    }
    return out;
}

double ExperimentReport::median_mse(double value, Estimator e) const {
    for (const auto& s : summary)
        if (s.value == value && s.estimator == e) return s.mse_median;
    return kNaN;
}

double ExperimentReport::median_f1(double value, Estimator e) const {
    for (const auto& s : summary)
        if (s.value == value && s.estimator == e) return s.f1_median;
    return kNaN;
}

// ---------------------------------------------------------------- estimators

std::vector<EstimatorOutcome> run_estimators(std::span<const EnvironmentData> data,
                                             std::span<const Estimator> estimators, const LassoSpec& lasso,
                                             const MomentOptions& mopts, std::uint64_t seed) {
    std::vector<EstimatorOutcome> out;
    std::vector<EnvironmentMoments> moments;
    std::string moment_failure;
    try {
        for (const auto& env : data) moments.push_back(estimate_moments(env, mopts));
    } catch (const std::exception& e) {
        moment_failure = e.what();
    }
    const Eigen::Index d = data.empty() ? 0 : data.front().d();

    for (Estimator est : estimators) {
        EstimatorOutcome o;
        o.estimator = est;
        const auto start = std::chrono::steady_clock::now();
        try {
            if (est == Estimator::Zero) {
                o.beta = Eigen::VectorXd::Zero(d);
            } else if (!moment_failure.empty()) {
                o.failure = moment_failure;
            } else {
                switch (est) {
                    case Estimator::Kl: o.beta = fit_kl(moments).beta; break;
                    case Estimator::AvgOls: o.beta = average_ols(moments); break;
                    case Estimator::PooledTheta: o.beta = pooled_theta(moments); break;
                    case Estimator::LassoKl: {
                        LassoConfig lc;
                        lc.max_iter = lasso.max_iter;
                        lc.tol = lasso.tol;
                        if (lasso.lambda) {
                            lc.lambda = *lasso.lambda;
                        } else {
                            const auto grid = default_grid(lambda_max(moments), lasso.grid_points, lasso.grid_ratio);
                            lc.lambda = select_lambda_cross_fit(data, grid, lasso.folds, seed, mopts).lambda;
                        }
                        o.lambda = lc.lambda;
                        o.beta = fit_lasso(moments, lc).beta;
                        break;
                    }
                    case Estimator::Zero: break;
                }
            }
        } catch (const std::exception& e) {
            o.beta.reset();
            o.failure = e.what();
        }
        if (o.beta && !o.beta->allFinite()) {
            o.beta.reset();
            o.failure = "non-finite estimate";
        }
        o.wall_ms = elapsed_ms(start);
        out.push_back(std::move(o));
    }
    return out;
}

// ---------------------------------------------------------------- experiment

namespace {

struct CellResult {
    std::size_t value_index = 0;
    std::vector<ReportRow> rows;
    std::vector<FailedCell> failures;
};

std::vector<EnvironmentData> split_environments(const std::vector<EnvironmentData>& envs, int parts,
                                                std::uint64_t seed) {
    if (parts == 1) return envs;
    std::vector<EnvironmentData> out;
    for (std::size_t e = 0; e < envs.size(); ++e) {
        const auto& env = envs[e];
        std::vector<Eigen::Index> order(static_cast<std::size_t>(env.n()));
        std::iota(order.begin(), order.end(), Eigen::Index{0});
        Rng rng(derive_seed(seed, {e}));
        std::shuffle(order.begin(), order.end(), rng);
        const Eigen::Index chunk = env.n() / parts;
        for (int p = 0; p < parts; ++p) {
            const Eigen::Index begin = p * chunk;
            const Eigen::Index len = (p == parts - 1) ? env.n() - begin : chunk;
            EnvironmentData part;
            part.x.resize(len, env.d());
            part.y.resize(len);
            for (Eigen::Index i = 0; i < len; ++i) {
                const auto src = order[static_cast<std::size_t>(begin + i)];
                part.x.row(i) = env.x.row(src);
                part.y(i) = env.y(src);
            }
            part.env_id = env.env_id + "_part" + std::to_string(p + 1);
            out.push_back(std::move(part));
        }
    }
    return out;
}

CellResult run_cell(const ExperimentConfig& cfg, int r, std::size_t idx) {
    CellResult cell;
    cell.value_index = idx;
    const double v = cfg.sweep_values[idx];
    const std::uint64_t cell_seed = derive_seed(cfg.seed, {static_cast<std::uint64_t>(r), idx});

    auto record_all_failed = [&](const std::string& reason) {
        for (Estimator e : cfg.estimators) cell.failures.push_back({v, r, e, reason});
    };

    Eigen::VectorXd beta_star;
    std::vector<EnvironmentData> data;
    try {
        Eigen::Index q = cfg.q, d0 = cfg.d0, n = cfg.n_per_env;
        double t = cfg.diversity_t, scale = cfg.confounding_scale, dof = cfg.noise_dof;
        switch (cfg.kind) {
            case ExperimentKind::SampleSweep: n = static_cast<Eigen::Index>(v); break;
            case ExperimentKind::DiversitySweep: t = v; break;
            case ExperimentKind::ConfoundingScaleSweep: scale = v; break;
            case ExperimentKind::LatentDimSweep: q = static_cast<Eigen::Index>(v); break;
            case ExperimentKind::SparsitySweep: d0 = static_cast<Eigen::Index>(v); break;
            case ExperimentKind::StudentTSweep: dof = v; break;
            default: break;
        }
        const auto rr = static_cast<std::uint64_t>(r);
        SemModel model = generate_baseline_model(cfg.d, q, d0, derive_seed(cfg.seed, {rr}));
        model.eta0 *= scale;
        beta_star = model.beta_star;

        Rng base_rng(derive_seed(cfg.seed, {rr, 1000}));
        const Eigen::MatrixXd shared = random_spd(cfg.d, base_rng);
        // split cells resample the unsplit data so both arms see the same rows
        const std::size_t data_idx = cfg.kind == ExperimentKind::SplitComparison ? 0 : idx;
        for (std::size_t e = 0; e < cfg.e_count; ++e) {
            auto noise = generate_environment_noise(cfg.d, e, t, shared, derive_seed(cfg.seed, {rr, 2000}));
            if (dof > 0.0) noise.kind = NoiseKind::student_t(dof);
            SemModel env_model = model;
            if (cfg.kind == ExperimentKind::MisspecificationSweep)
                env_model = perturb_model(model, cfg.perturb_target, v, derive_seed(cfg.seed, {rr, idx, e, 99}));
            data.push_back(sample_environment(env_model, noise, n, derive_seed(cfg.seed, {rr, data_idx, e}),
                                              "env" + std::to_string(e)));
        }
        if (cfg.kind == ExperimentKind::SplitComparison)
            data = split_environments(data, static_cast<int>(v), derive_seed(cell_seed, {7}));
    } catch (const std::exception& e) {
        record_all_failed(std::string("data generation failed: ") + e.what());
        return cell;
    }

    MomentOptions mopts;
    mopts.jitter = cfg.jitter;
    const auto outcomes = run_estimators(data, cfg.estimators, cfg.lasso, mopts, cell_seed);
    for (const auto& o : outcomes) {
        if (!o.beta) {
            cell.failures.push_back({v, r, o.estimator, o.failure});
            continue;
        }
        const double thr =
            o.estimator == Estimator::LassoKl ? kPenalizedSupportThreshold : cfg.dense_support_threshold;
        ReportRow row;
        row.value = v;
        row.replicate = r;
        row.replicate_seed = cell_seed;
        row.estimator = o.estimator;
        row.mse = mse(*o.beta, beta_star);
        row.f1 = support_metrics(*o.beta, beta_star, thr).f1;
        row.wall_ms = o.wall_ms;
        cell.rows.push_back(row);
    }
    return cell;
}

ExperimentReport run_real_data(const ExperimentConfig& cfg) {
    ExperimentReport report;
    report.config = cfg;
    nlohmann::json manifest;
    read_environment_tables(cfg.data_dir, &manifest);
    const IngestedData ing = ingest_environments(cfg.data_dir);
    std::optional<Eigen::VectorXd> beta_star;
    if (manifest.contains("beta_star")) {
        beta_star = vector_from_json(manifest["beta_star"]);
        if (beta_star->size() != static_cast<Eigen::Index>(ing.covariates.size()))
            throw IngestError("manifest beta_star has the wrong length");
    }
    MomentOptions mopts;
    mopts.jitter = cfg.jitter;
    const auto outcomes = run_estimators(ing.envs, cfg.estimators, cfg.lasso, mopts, cfg.seed);
    report.real_data = {{"covariates", ing.covariates}, {"response", ing.response}, {"estimates", nlohmann::json::object()}};
    for (const auto& o : outcomes) {
        const std::string name = to_string(o.estimator);
        if (!o.beta) {
            report.failures.push_back({0.0, 0, o.estimator, o.failure});
            report.real_data["estimates"][name] = {{"failure", o.failure}};
            continue;
        }
        nlohmann::json est{{"beta", vector_to_json(*o.beta)}};
        if (o.lambda) est["lambda"] = *o.lambda;
        report.real_data["estimates"][name] = est;
        ReportRow row;
        row.estimator = o.estimator;
        row.replicate_seed = cfg.seed;
        row.wall_ms = o.wall_ms;
        if (beta_star) {
            const double thr =
                o.estimator == Estimator::LassoKl ? kPenalizedSupportThreshold : cfg.dense_support_threshold;
            row.mse = mse(*o.beta, *beta_star);
            row.f1 = support_metrics(*o.beta, *beta_star, thr).f1;
        } else {
            row.mse = kNaN;
            row.f1 = kNaN;
        }
        report.rows.push_back(row);
    }
    const double zero = 0.0;
    report.summary = summarize(report.rows, std::span<const double>(&zero, 1), cfg.estimators);
    return report;
}

}  // namespace

ExperimentReport run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    if (cfg.kind == ExperimentKind::RealData) return run_real_data(cfg);

    const std::size_t values = cfg.sweep_values.size();
    const std::size_t total = static_cast<std::size_t>(cfg.replicates) * values;
    std::vector<CellResult> cells(total);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t k = next++; k < total; k = next++)
            cells[k] = run_cell(cfg, static_cast<int>(k / values), k % values);
    };
    unsigned n_threads = cfg.threads > 0 ? static_cast<unsigned>(cfg.threads) : std::thread::hardware_concurrency();
    n_threads = std::clamp<unsigned>(n_threads, 1, static_cast<unsigned>(std::max<std::size_t>(total, 1)));
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (unsigned i = 0; i < n_threads; ++i) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    ExperimentReport report;
    report.config = cfg;
    for (auto& c : cells) {
        report.rows.insert(report.rows.end(), c.rows.begin(), c.rows.end());
        report.failures.insert(report.failures.end(), c.failures.begin(), c.failures.end());
    }
    auto est_rank = [&](Estimator e) {
        return std::find(cfg.estimators.begin(), cfg.estimators.end(), e) - cfg.estimators.begin();
    };
    std::stable_sort(report.rows.begin(), report.rows.end(), [&](const ReportRow& a, const ReportRow& b) {
        if (a.value != b.value) return a.value < b.value;
        if (a.replicate != b.replicate) return a.replicate < b.replicate;
        return est_rank(a.estimator) < est_rank(b.estimator);
    });
    std::stable_sort(report.failures.begin(), report.failures.end(), [&](const FailedCell& a, const FailedCell& b) {
        if (a.value != b.value) return a.value < b.value;
        if (a.replicate != b.replicate) return a.replicate < b.replicate;
        return est_rank(a.estimator) < est_rank(b.estimator);
    });
    report.summary = summarize(report.rows, cfg.sweep_values, cfg.estimators);
    return report;
}

// ---------------------------------------------------------------- output

void write_rows_csv(const ExperimentReport& r, std::ostream& out) {
    out << "value,replicate,replicate_seed,estimator,mse,f1,wall_ms\n";
    for (const auto& row : r.rows)
        out << num(row.value) << ',' << row.replicate << ',' << row.replicate_seed << ',' << to_string(row.estimator)
            << ',' << num(row.mse) << ',' << num(row.f1) << ',' << num(row.wall_ms) << '\n';
}

void write_summary_csv(const ExperimentReport& r, std::ostream& out) {
    out << "value,estimator,count,mse_median,mse_q1,mse_q3,f1_median,f1_q1,f1_q3\n";
    for (const auto& s : r.summary)
        out << num(s.value) << ',' << to_string(s.estimator) << ',' << s.count << ',' << num(s.mse_median) << ','
            << num(s.mse_q1) << ',' << num(s.mse_q3) << ',' << num(s.f1_median) << ',' << num(s.f1_q1) << ','
            << num(s.f1_q3) << '\n';
}

void write_failures_csv(const ExperimentReport& r, std::ostream& out) {
    out << "value,replicate,estimator,reason\n";
    for (const auto& f : r.failures)
        out << num(f.value) << ',' << f.replicate << ',' << to_string(f.estimator) << ',' << csv_field(f.reason)
            << '\n';
}

nlohmann::json report_sidecar(const ExperimentReport& r) {
    nlohmann::json j;
    j["config"] = to_json(r.config);
    j["seed"] = r.config.seed;
    j["rows"] = r.rows.size();
    j["failures"] = r.failures.size();
    j["files"] = {{"rows", "report.csv"}, {"summary", "summary.csv"}, {"failures", "failures.csv"}};
    if (!r.real_data.is_null()) j["real_data"] = r.real_data;
    return j;
}

void write_report(const ExperimentReport& r, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    auto open = [&](const char* name) {
        std::ofstream f(dir / name);
        if (!f) throw std::runtime_error("cannot write " + (dir / name).string());
        return f;
    };
    {
        auto f = open("report.csv");
        write_rows_csv(r, f);
    }
    {
        auto f = open("summary.csv");
        write_summary_csv(r, f);
    }
    {
        auto f = open("failures.csv");
        write_failures_csv(r, f);
    }
    auto f = open("report.json");
    f << report_sidecar(r).dump(2) << '\n';
}

bool same_rows(const ExperimentReport& a, const ExperimentReport& b) {
    if (a.rows.size() != b.rows.size() || a.failures.size() != b.failures.size()) return false;
    auto same = [](double x, double y) { return x == y || (std::isnan(x) && std::isnan(y)); };
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
        const auto &x = a.rows[i], &y = b.rows[i];
        if (x.value != y.value || x.replicate != y.replicate || x.replicate_seed != y.replicate_seed ||
            x.estimator != y.estimator || !same(x.mse, y.mse) || !same(x.f1, y.f1))
            return false;
    }
    for (std::size_t i = 0; i < a.failures.size(); ++i) {
        const auto &x = a.failures[i], &y = b.failures[i];
        if (x.value != y.value || x.replicate != y.replicate || x.estimator != y.estimator || x.reason != y.reason)
            return false;
    }
    return true;
}

// ---------------------------------------------------------------- edge ranking

namespace {

void standardize_columns(std::vector<EnvironmentData>& envs) {
    if (envs.empty()) return;
    const Eigen::Index d = envs.front().d();
    Eigen::VectorXd ss = Eigen::VectorXd::Zero(d);
    double rows = 0.0;
    for (const auto& e : envs) {
        if (e.d() != d) return;
        const Eigen::MatrixXd centered = e.x.rowwise() - e.x.colwise().mean();
        ss += centered.colwise().squaredNorm().transpose();
        rows += static_cast<double>(e.n());
    }
    Eigen::VectorXd inv_sd = (ss / rows).cwiseSqrt().cwiseInverse();
    for (Eigen::Index j = 0; j < d; ++j)
        if (!std::isfinite(inv_sd(j))) inv_sd(j) = 1.0;
    for (auto& e : envs) e.x = e.x * inv_sd.asDiagonal();
}

}  // namespace

RankResult rank_edges(std::span<const TargetData> targets, const std::vector<std::string>& regulators,
                      const std::vector<std::pair<std::string, std::string>>& truth, const RankOptions& opts) {
    if (regulators.empty()) throw std::invalid_argument("rank_edges: no regulators");
    if (targets.empty()) throw std::invalid_argument("rank_edges: no targets");
    const std::size_t n_reg = regulators.size();
    std::map<std::string, std::size_t> reg_index, target_index;
    for (std::size_t j = 0; j < n_reg; ++j)
        if (!reg_index.emplace(regulators[j], j).second)
            throw std::invalid_argument("rank_edges: duplicate regulator " + regulators[j]);
    RankResult out;
    out.regulators = regulators;
    for (std::size_t t = 0; t < targets.size(); ++t) {
        const auto& name = targets[t].name;
        if (reg_index.count(name)) throw std::invalid_argument("rank_edges: target " + name + " is also a regulator");
        if (!target_index.emplace(name, t).second) throw std::invalid_argument("rank_edges: duplicate target " + name);
        out.targets.push_back(name);
    }
    std::set<std::size_t> truth_idx;
    for (const auto& [reg, tgt] : truth) {
        const auto ri = reg_index.find(reg);
        const auto ti = target_index.find(tgt);
        if (ri == reg_index.end() || ti == target_index.end())
            throw std::invalid_argument("rank_edges: truth edge " + reg + "->" + tgt + " names an unknown gene");
        truth_idx.insert(ti->second * n_reg + ri->second);
    }

    for (std::size_t t = 0; t < targets.size(); ++t) {
        const auto& target = targets[t];
        try {
            if (target.envs.size() < 2) throw std::invalid_argument("needs at least two environments");
            std::vector<EnvironmentData> envs(target.envs.begin(), target.envs.end());
            if (opts.standardize) standardize_columns(envs);
            std::vector<EnvironmentMoments> moments;
            for (const auto& env : envs) {
                if (env.d() != static_cast<Eigen::Index>(n_reg))
                    throw std::invalid_argument("environment " + env.env_id + " has " + std::to_string(env.d()) +
                                                " regulator columns, expected " + std::to_string(n_reg));
                if (env.n() > 0 && (env.y.array() == env.y(0)).all())
                    throw std::invalid_argument("target column is constant in environment " + env.env_id);
                moments.push_back(estimate_moments(env, opts.moments));
            }
            const double lmax = lambda_max(moments);
            if (!(lmax > 0.0) || !std::isfinite(lmax))
                throw std::invalid_argument("lambda_max is zero or not finite");
            const auto grid = default_grid(lmax, opts.grid_points, opts.grid_ratio);
            const LassoPath path = lasso_path(moments, grid);
            for (std::size_t j = 0; j < n_reg; ++j) {
                ScoredCandidate c;
                c.index = t * n_reg + j;
                c.score = path.entry_lambda(static_cast<Eigen::Index>(j)) / lmax;
                c.label = regulators[j] + "->" + target.name;
                out.ranking.scores.push_back(std::move(c));
            }
        } catch (const std::exception& e) {
            out.skipped.emplace_back(target.name, e.what());
        }
    }
    if (out.ranking.scores.empty()) {
        std::string why;
        for (const auto& [name, reason] : out.skipped) why += "\n  " + name + ": " + reason;
        throw EmptyRankingError("rank_edges: every target failed" + why);
    }
    std::set<std::size_t> ranked;
    for (const auto& c : out.ranking.scores) ranked.insert(c.index);
    for (auto i : truth_idx)
        if (ranked.count(i)) out.ranking.truth.insert(i);
    return out;
}

std::vector<TargetData> slice_targets(std::span<const EnvironmentData> gene_tables,
                                      const std::vector<std::string>& genes,
                                      const std::vector<std::string>& regulators,
                                      const std::vector<std::string>& targets) {
    std::map<std::string, Eigen::Index> col;
    for (std::size_t i = 0; i < genes.size(); ++i) col[genes[i]] = static_cast<Eigen::Index>(i);
    auto lookup = [&](const std::string& g) {
        const auto it = col.find(g);
        if (it == col.end()) throw std::invalid_argument("unknown gene: " + g);
        return it->second;
    };
    std::vector<Eigen::Index> reg_cols;
    for (const auto& r : regulators) reg_cols.push_back(lookup(r));
    std::vector<TargetData> out;
    for (const auto& t : targets) {
        const Eigen::Index tc = lookup(t);
        TargetData td;
        td.name = t;
        for (const auto& table : gene_tables) {
            if (table.x.cols() != static_cast<Eigen::Index>(genes.size()))
                throw std::invalid_argument("gene table " + table.env_id + " does not match the gene list");
            EnvironmentData env;
            env.x = table.x(Eigen::all, reg_cols);
            env.y = table.x.col(tc);
            env.env_id = table.env_id;
            td.envs.push_back(std::move(env));
        }
        out.push_back(std::move(td));
    }
    return out;
}

SyntheticGrn generate_synthetic_grn(Eigen::Index regulators, Eigen::Index q, int targets,
                                    int parents_per_target, std::size_t e_count, Eigen::Index n,
                                    std::uint64_t seed) {
    if (regulators < 1 || targets < 1) throw std::invalid_argument("synthetic GRN needs regulators and targets");
    if (parents_per_target < 1 || parents_per_target > regulators)
        throw std::invalid_argument("parents_per_target must lie in [1, regulators]");
    if (e_count < 2) throw std::invalid_argument("synthetic GRN needs at least two environments");

    const SemModel reg_model = generate_baseline_model(regulators, q, 0, derive_seed(seed, {0}));
    const Eigen::Index total = regulators + targets;
    Eigen::MatrixXd b_xx = Eigen::MatrixXd::Zero(total, total);
    Eigen::MatrixXd b_xh = Eigen::MatrixXd::Zero(total, q);
    b_xx.topLeftCorner(regulators, regulators) = reg_model.b_xx;
    b_xh.topRows(regulators) = reg_model.b_xh;

    SyntheticGrn grn;
    for (Eigen::Index j = 0; j < regulators; ++j) grn.regulators.push_back("g" + std::to_string(j + 1));
    for (int t = 0; t < targets; ++t) grn.targets.push_back("t" + std::to_string(t + 1));
    grn.genes = grn.regulators;
    grn.genes.insert(grn.genes.end(), grn.targets.begin(), grn.targets.end());

    Rng rng(derive_seed(seed, {1}));
    std::vector<Eigen::Index> order(static_cast<std::size_t>(regulators));
    for (int t = 0; t < targets; ++t) {
        std::iota(order.begin(), order.end(), Eigen::Index{0});
        std::shuffle(order.begin(), order.end(), rng);
        const Eigen::Index row = regulators + t;
        for (int k = 0; k < parents_per_target; ++k) {
            const auto j = order[static_cast<std::size_t>(k)];
            b_xx(row, j) = 1.0;
            grn.truth.emplace_back(grn.regulators[static_cast<std::size_t>(j)], grn.targets[static_cast<std::size_t>(t)]);
        }
        b_xh.row(row) = reg_model.eta0.transpose();
    }
    const SemModel model(b_xx, b_xh, Eigen::VectorXd::Zero(total), Eigen::VectorXd::Zero(q), reg_model.sigma_h);

    Rng base_rng(derive_seed(seed, {2}));
    const Eigen::MatrixXd shared = random_spd(regulators, base_rng);
    for (std::size_t e = 0; e < e_count; ++e) {
        const auto reg_noise = generate_environment_noise(regulators, e, 1.0, shared, derive_seed(seed, {3}));
        Rng target_rng(derive_seed(seed, {4, e}));
        std::normal_distribution<double> normal(0.0, 1.0);
        EnvironmentNoiseSpec noise;
        noise.sigma_ex = Eigen::MatrixXd::Zero(total, total);
        noise.sigma_ex.topLeftCorner(regulators, regulators) = reg_noise.sigma_ex;
        for (int t = 0; t < targets; ++t) noise.sigma_ex(regulators + t, regulators + t) = 1.0 + std::abs(normal(target_rng));
        noise.sigma_ey = 1.0;
        auto table = sample_environment(model, noise, n, derive_seed(seed, {5, e}), "env" + std::to_string(e));
        table.y.resize(0);
        grn.tables.push_back(std::move(table));
    }
    return grn;
}

void write_ranking_csv(const RankResult& r, std::ostream& out) {
    out << "rank,regulator,target,score,is_true\n";
    const auto sorted = sorted_candidates(r.ranking);
    const std::size_t n_reg = r.regulators.size();
    for (std::size_t k = 0; k < sorted.size(); ++k) {
        const auto& c = sorted[k];
        out << (k + 1) << ',' << csv_field(r.regulators[c.index % n_reg]) << ','
            << csv_field(r.targets[c.index / n_reg]) << ',' << num(c.score) << ','
            << (r.ranking.truth.count(c.index) ? 1 : 0) << '\n';
    }
}

}  // namespace klreg
