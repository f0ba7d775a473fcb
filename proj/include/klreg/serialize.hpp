#pragma once

#include <json.hpp>

#include <Eigen/Dense>

#include "klreg/kl_core.hpp"
#include "klreg/moments.hpp"
#include "klreg/sem_model.hpp"

// JSON documents: field names follow the C++ members; matrices are row-major
// nested arrays, vectors are flat arrays.
namespace klreg {

using json = nlohmann::json;

json matrix_to_json(const Eigen::MatrixXd& m);
Eigen::MatrixXd matrix_from_json(const json& j);
json vector_to_json(const Eigen::VectorXd& v);
Eigen::VectorXd vector_from_json(const json& j);

void to_json(json& j, const SemModel& m);
void from_json(const json& j, SemModel& m);

void to_json(json& j, const NoiseKind& k);
void from_json(const json& j, NoiseKind& k);

void to_json(json& j, const EnvironmentNoiseSpec& s);
void from_json(const json& j, EnvironmentNoiseSpec& s);

void to_json(json& j, const EnvironmentMoments& m);
void from_json(const json& j, EnvironmentMoments& m);

void to_json(json& j, const KlFit& f);

}  // namespace klreg
