#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include <Eigen/Dense>

#include "klreg/sem_model.hpp"

// Directory layout:
//   manifest.json  {"response": "y", "environments": [{"label": "e0", "file": "e0.csv"}, ...]}
//   e0.csv         header "x1,x2,...,y", then one numeric row per sample
// Gene tables for edge ranking use the same layout without "response"; the
// manifest instead lists "regulators", "targets" and optionally "truth" as
// [regulator, target] pairs.
namespace klreg {

struct EnvironmentTable {
    std::string label;
    std::filesystem::path file;
    std::vector<std::string> columns;
    Eigen::MatrixXd values;  // rows x columns
};

/// Reads every CSV named in the manifest and checks that all share the same
/// ordered header. Throws IngestError (file and line in the message).
std::vector<EnvironmentTable> read_environment_tables(const std::filesystem::path& dir,
                                                      nlohmann::json* manifest_out = nullptr);

struct IngestedData {
    std::vector<std::string> covariates;
    std::string response;
    std::vector<EnvironmentData> envs;
};

/// Splits each table into covariates and the response column named in the
/// manifest (which must be the last column). Environments with n <= D raise
/// SingularCovarianceError naming the file.
IngestedData ingest_environments(const std::filesystem::path& dir);

/// Writes a CSV with the given header and rows.
void write_table_csv(const std::filesystem::path& file, const std::vector<std::string>& columns,
                     const Eigen::MatrixXd& values);

/// Writes one CSV per environment plus manifest.json; `extra` is merged into the manifest.
void write_environments(const std::filesystem::path& dir, const std::vector<std::string>& covariates,
                        const std::string& response, const std::vector<EnvironmentData>& envs,
                        const nlohmann::json& extra = nlohmann::json::object());

std::vector<std::string> default_covariate_names(Eigen::Index d);

}  // namespace klreg
