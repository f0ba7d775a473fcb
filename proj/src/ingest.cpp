#include "klreg/ingest.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "klreg/errors.hpp"

namespace klreg {

namespace {

std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r' || s[b] == '"')) ++b;
    while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r' || s[e - 1] == '"')) --e;
    return std::string(s.substr(b, e - b));
}

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto comma = line.find(',', start);
        out.push_back(trim(std::string_view(line).substr(start, comma == std::string::npos ? std::string::npos
                                                                                            : comma - start)));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

std::string where(const std::filesystem::path& file, std::size_t line) {
    return file.string() + ":" + std::to_string(line);
}

std::string join(const std::vector<std::string>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
    return s;
}

EnvironmentTable read_csv(const std::filesystem::path& file, std::string label) {
    std::ifstream in(file);
    if (!in) throw IngestError("cannot open " + file.string());
    EnvironmentTable t;
    t.label = std::move(label);
    t.file = file;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!trim(line).empty()) break;
    }
    if (lineno == 0 || trim(line).empty()) throw IngestError(file.string() + ": empty file (no header row)");
    t.columns = split(line);
    for (const auto& c : t.columns)
        if (c.empty()) throw IngestError(where(file, lineno) + ": empty column name in header");

    std::vector<double> cells;
    Eigen::Index rows = 0;
    const std::size_t cols = t.columns.size();
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        const auto fields = split(line);
        if (fields.size() != cols)
            throw IngestError(where(file, lineno) + ": expected " + std::to_string(cols) + " fields, found " +
                              std::to_string(fields.size()));
        for (std::size_t c = 0; c < cols; ++c) {
            const std::string& f = fields[c];
            double v = 0.0;
            const auto res = std::from_chars(f.data(), f.data() + f.size(), v);
            if (f.empty() || res.ec != std::errc() || res.ptr != f.data() + f.size() || !std::isfinite(v))
                throw IngestError(where(file, lineno) + ": non-numeric value '" + f + "' in column " +
                                  t.columns[c]);
            cells.push_back(v);
        }
        ++rows;
    }
    t.values.resize(rows, static_cast<Eigen::Index>(cols));
    for (Eigen::Index r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
            t.values(r, static_cast<Eigen::Index>(c)) = cells[static_cast<std::size_t>(r) * cols + c];
    return t;
}

}  // namespace

std::vector<EnvironmentTable> read_environment_tables(const std::filesystem::path& dir,
                                                      nlohmann::json* manifest_out) {
    const auto manifest_path = dir / "manifest.json";
    std::ifstream in(manifest_path);
    if (!in) throw IngestError("missing manifest: " + manifest_path.string());
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IngestError(manifest_path.string() + ": invalid JSON: " + e.what());
    }
    if (!manifest.contains("environments") || !manifest["environments"].is_array() ||
        manifest["environments"].empty())
        throw IngestError(manifest_path.string() + ": \"environments\" must be a non-empty array");

    std::vector<EnvironmentTable> tables;
    for (const auto& entry : manifest["environments"]) {
        if (!entry.contains("file") || !entry["file"].is_string())
            throw IngestError(manifest_path.string() + ": every environment needs a \"file\"");
        const std::string file = entry["file"].get<std::string>();
        const std::string label = entry.value("label", std::filesystem::path(file).stem().string());
        tables.push_back(read_csv(dir / file, label));
        const auto& first = tables.front();
        const auto& cur = tables.back();
        if (cur.columns != first.columns)
            throw IngestError("header mismatch between " + first.file.string() + " (" + join(first.columns) +
                              ") and " + cur.file.string() + " (" + join(cur.columns) + ")");
    }
    if (manifest_out) *manifest_out = std::move(manifest);
    return tables;
}

IngestedData ingest_environments(const std::filesystem::path& dir) {
    nlohmann::json manifest;
    auto tables = read_environment_tables(dir, &manifest);
    if (!manifest.contains("response") || !manifest["response"].is_string())
        throw IngestError((dir / "manifest.json").string() + ": \"response\" column name is required");
    IngestedData out;
    out.response = manifest["response"].get<std::string>();
    const auto& cols = tables.front().columns;
    if (cols.size() < 2 || cols.back() != out.response)
        throw IngestError(tables.front().file.string() + ": last column must be the response '" +
                          out.response + "'");
    out.covariates.assign(cols.begin(), cols.end() - 1);
    const auto d = static_cast<Eigen::Index>(out.covariates.size());
    for (auto& t : tables) {
        if (t.values.rows() <= d)
            throw SingularCovarianceError(t.label, std::numeric_limits<double>::infinity(),
                                          t.file.string() + ": " + std::to_string(t.values.rows()) +
                                              " rows for " + std::to_string(d) +
                                              " covariates; the covariance is singular (need n > D)");
        EnvironmentData env;
        env.x = t.values.leftCols(d);
        env.y = t.values.col(d);
        env.env_id = t.label;
        out.envs.push_back(std::move(env));
    }
    return out;
}

void write_table_csv(const std::filesystem::path& file, const std::vector<std::string>& columns,
                     const Eigen::MatrixXd& values) {
    if (static_cast<Eigen::Index>(columns.size()) != values.cols())
        throw std::invalid_argument("write_table_csv: header and column count differ");
    std::ofstream out(file);
    if (!out) throw IngestError("cannot write " + file.string());
    out << join(columns) << '\n';
    out.precision(17);
    for (Eigen::Index r = 0; r < values.rows(); ++r) {
        for (Eigen::Index c = 0; c < values.cols(); ++c) out << (c ? "," : "") << values(r, c);
        out << '\n';
    }
}

void write_environments(const std::filesystem::path& dir, const std::vector<std::string>& covariates,
                        const std::string& response, const std::vector<EnvironmentData>& envs,
                        const nlohmann::json& extra) {
    std::filesystem::create_directories(dir);
    std::vector<std::string> header = covariates;
    header.push_back(response);
    nlohmann::json manifest = extra;
    manifest["response"] = response;
    manifest["environments"] = nlohmann::json::array();
    for (std::size_t e = 0; e < envs.size(); ++e) {
        const auto& env = envs[e];
        const std::string label = env.env_id.empty() ? "env" + std::to_string(e) : env.env_id;
        const std::string file = label + ".csv";
        Eigen::MatrixXd table(env.n(), env.d() + 1);
        table << env.x, env.y;
        write_table_csv(dir / file, header, table);
        manifest["environments"].push_back({{"label", label}, {"file", file}});
    }
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

std::vector<std::string> default_covariate_names(Eigen::Index d) {
    std::vector<std::string> names;
    for (Eigen::Index j = 0; j < d; ++j) names.push_back("x" + std::to_string(j + 1));
    return names;
}

}  // namespace klreg
