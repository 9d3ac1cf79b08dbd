#pragma once

#include <stdexcept>
#include <string>

namespace stmvr {

// Malformed or inconsistent input data (shapes, files, values).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Factorization failures, singular systems, non-finite results.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace stmvr
