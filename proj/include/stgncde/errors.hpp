#pragma once

#include <stdexcept>
#include <string>

namespace stgncde {

/// Bad or inconsistent run configuration (unknown key, value out of range).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Dataset ingestion failure (dimension mismatch, unparsable cell, missing file).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

/// Non-finite state encountered during integration or training.
struct DivergenceError : std::runtime_error {
    explicit DivergenceError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace stgncde
