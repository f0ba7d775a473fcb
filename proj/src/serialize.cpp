#include "klreg/serialize.hpp"

#include <cmath>
#include <stdexcept>

namespace klreg {

namespace {

// JSON has no infinity; store non-finite diagnostics as null.
json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace

json matrix_to_json(const Eigen::MatrixXd& m) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        json row = json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

Eigen::MatrixXd matrix_from_json(const json& j) {
    if (!j.is_array()) throw std::invalid_argument("matrix must be a nested array");
    const auto rows = static_cast<Eigen::Index>(j.size());
    const Eigen::Index cols = rows > 0 ? static_cast<Eigen::Index>(j.front().size()) : 0;
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        const auto& row = j[static_cast<std::size_t>(i)];
        if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
            throw std::invalid_argument("matrix rows must be arrays of equal length");
        for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = row[static_cast<std::size_t>(c)].get<double>();
    }
    return m;
}

json vector_to_json(const Eigen::VectorXd& v) {
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
    return a;
}

Eigen::VectorXd vector_from_json(const json& j) {
    if (!j.is_array()) throw std::invalid_argument("vector must be an array");
    Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
    return v;
}

void to_json(json& j, const SemModel& m) {
    j = json{{"d", m.d()},
             {"q", m.q()},
             {"b_xx", matrix_to_json(m.b_xx)},
             {"b_xh", matrix_to_json(m.b_xh)},
             {"beta_star", vector_to_json(m.beta_star)},
             {"eta0", vector_to_json(m.eta0)},
             {"sigma_h", matrix_to_json(m.sigma_h)}};
}

void from_json(const json& j, SemModel& m) {
    const auto d = j.at("d").get<Eigen::Index>();
    const auto q = j.at("q").get<Eigen::Index>();
    Eigen::MatrixXd b_xh = matrix_from_json(j.at("b_xh"));
    Eigen::MatrixXd sigma_h = matrix_from_json(j.at("sigma_h"));
    if (q == 0) {
        b_xh.resize(d, 0);
        sigma_h.resize(0, 0);
    }
    m = SemModel(matrix_from_json(j.at("b_xx")), std::move(b_xh), vector_from_json(j.at("beta_star")),
                 vector_from_json(j.at("eta0")), std::move(sigma_h));
    if (m.d() != d || m.q() != q) throw std::invalid_argument("SemModel JSON: d/q do not match the arrays");
}

void to_json(json& j, const NoiseKind& k) {
    if (k.family == NoiseKind::Family::Gaussian)
        j = json{{"family", "gaussian"}};
    else
        j = json{{"family", "student_t"}, {"dof", k.dof}};
}

void from_json(const json& j, NoiseKind& k) {
    const auto fam = j.at("family").get<std::string>();
    if (fam == "gaussian")
        k = NoiseKind::gaussian();
    else if (fam == "student_t")
        k = NoiseKind::student_t(j.at("dof").get<double>());
    else
        throw std::invalid_argument("unknown noise family: " + fam);
}

void to_json(json& j, const EnvironmentNoiseSpec& s) {
    j = json{{"sigma_ex", matrix_to_json(s.sigma_ex)}, {"sigma_ey", s.sigma_ey}, {"noise_kind", s.kind}};
}

void from_json(const json& j, EnvironmentNoiseSpec& s) {
    s.sigma_ex = matrix_from_json(j.at("sigma_ex"));
    s.sigma_ey = j.at("sigma_ey").get<double>();
    s.kind = j.contains("noise_kind") ? j.at("noise_kind").get<NoiseKind>() : NoiseKind::gaussian();
    s.validate();
}

void to_json(json& j, const EnvironmentMoments& m) {
    j = json{{"env_id", m.env_id},
             {"n", m.n},
             {"sigma_x", matrix_to_json(m.sigma_x)},
             {"sigma_xy", vector_to_json(m.sigma_xy)},
             {"sigma_y", m.sigma_y},
             {"beta_e", vector_to_json(m.beta_e)},
             {"resid_var", m.resid_var},
             {"condition", finite_or_null(m.condition)}};
}

void from_json(const json& j, EnvironmentMoments& m) {
    m.env_id = j.value("env_id", std::string{});
    m.n = j.value("n", Eigen::Index{0});
    m.sigma_x = matrix_from_json(j.at("sigma_x"));
    m.sigma_xy = vector_from_json(j.at("sigma_xy"));
    m.sigma_y = j.at("sigma_y").get<double>();
    m.beta_e = vector_from_json(j.at("beta_e"));
    m.resid_var = j.at("resid_var").get<double>();
    m.condition = j.contains("condition") && !j.at("condition").is_null() ? j.at("condition").get<double>()
                                                                           : 1.0;
}

void to_json(json& j, const KlFit& f) {
    j = json{{"beta", vector_to_json(f.beta)},
             {"eta", vector_to_json(f.eta)},
             {"s_beta", matrix_to_json(f.s_beta)},
             {"cond_s_beta", finite_or_null(f.cond_s_beta)},
             {"loss_at_opt", f.loss_at_opt},
             {"stationarity_residual", f.stationarity_residual}};
    if (f.cov) {
        j["cov"] = matrix_to_json(*f.cov);
        j["cov_source"] = f.cov_plugin ? "plug-in residual variances (approximation)" : "known residual variances";
    }
    if (f.lambda > 0.0 || f.iterations > 0) {
        j["lambda"] = f.lambda;
        j["iterations"] = f.iterations;
        j["kkt_residual"] = f.kkt_residual;
    }
}

}  // namespace klreg
