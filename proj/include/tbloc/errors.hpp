#pragma once

#include <stdexcept>
#include <string>

namespace tbloc {

// Base of all library errors. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

class UndefinedQuantity : public Error {
public:
    using Error::Error;
};

class GeometryError : public Error {
public:
    using Error::Error;
};

class NumericalError : public Error {
public:
    using Error::Error;
};

class DomainError : public Error {
public:
    using Error::Error;
};

class GapError : public Error {
public:
    GapError(const std::string& what, double gap) : Error(what), gap_(gap) {}
    double gap() const { return gap_; }

private:
    double gap_;
};

class ContourError : public Error {
public:
    using Error::Error;
};

class NearSingularError : public Error {
public:
    using Error::Error;
};

class ConvergenceError : public Error {
public:
    ConvergenceError(const std::string& what, double residual, int iterations)
        : Error(what), residual_(residual), iterations_(iterations) {}
    double residual() const { return residual_; }
    int iterations() const { return iterations_; }

private:
    double residual_;
    int iterations_;
};

class StabilityError : public Error {
public:
    using Error::Error;
};

class FitError : public Error {
public:
    using Error::Error;
};

class UpdateError : public Error {
public:
    using Error::Error;
};

class OracleError : public Error {
public:
    using Error::Error;
};

class RelaxationError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    ConfigError(const std::string& key, const std::string& what)
        : Error(key.empty() ? what : key + ": " + what), key_(key) {}
    const std::string& key() const { return key_; }

private:
    std::string key_;
};

}  // namespace tbloc
