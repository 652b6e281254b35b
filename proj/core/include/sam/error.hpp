#pragma once

#include <stdexcept>
#include <string>

namespace sam {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Raised when an iterative solver fails to reach its tolerance.
class SolveError : public Error {
public:
    SolveError(const std::string& what, double achieved_residual)
        : Error(what), residual(achieved_residual) {}
    double residual;
};

} // namespace sam
