#pragma once

#include <stdexcept>
#include <string>

namespace klreg {

/// Base of all numerical failures raised by the library. Argument validation
/// uses std::invalid_argument directly.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// An environment covariance is singular or too ill-conditioned to invert.
class SingularCovarianceError : public NumericalError {
public:
    SingularCovarianceError(std::string env_id, double condition, const std::string& what)
        : NumericalError(what), env_id_(std::move(env_id)), condition_(condition) {}

    const std::string& env_id() const { return env_id_; }
    double condition() const { return condition_; }

private:
    std::string env_id_;
    double condition_;
};

/// S_beta is not (numerically) invertible: the environments are not diverse enough.
class IllPosedError : public NumericalError {
public:
    IllPosedError(double condition, const std::string& what)
        : NumericalError(what), condition_(condition) {}
    double condition() const { return condition_; }

private:
    double condition_;
};

class ConvergenceError : public NumericalError {
public:
    ConvergenceError(double kkt_residual, const std::string& what)
        : NumericalError(what), kkt_residual_(kkt_residual) {}
    double kkt_residual() const { return kkt_residual_; }

private:
    double kkt_residual_;
};

/// Random perturbation could not produce an admissible model within the retry budget.
class ResampleExhaustedError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

/// Malformed input files (header mismatch, bad cells, missing manifest entries).
class IngestError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class EmptyRankingError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

}  // namespace klreg
