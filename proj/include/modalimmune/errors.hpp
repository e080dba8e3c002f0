#pragma once

#include <stdexcept>
#include <string>

namespace modalimmune {

// Malformed shapes, empty inputs, invalid modes.
class StructuralError : public std::invalid_argument {
public:
    explicit StructuralError(const std::string& what) : std::invalid_argument(what) {}
};

// Iteration caps, divergence, non-finite values, ill-conditioning.
class NumericalError : public std::runtime_error {
public:
    explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

// Inputs that make the requested quantity undefined (e.g. zero covariance).
class DegenerateInputError : public std::domain_error {
public:
    explicit DegenerateInputError(const std::string& what) : std::domain_error(what) {}
};

}  // namespace modalimmune
