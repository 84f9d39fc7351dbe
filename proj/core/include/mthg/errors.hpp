#pragma once

#include <stdexcept>
#include <string>

namespace mthg {

// Shape/ordering violations: mismatched dimensions, unknown channels, bad
// topology references.
class StructuralError : public std::runtime_error {
public:
    explicit StructuralError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid argument values (empty lists, non-odd windows, lo >= hi, ...).
class ParameterError : public std::invalid_argument {
public:
    explicit ParameterError(const std::string& msg) : std::invalid_argument(msg) {}
};

// A metric that has no defined value for the given inputs.
class UndefinedMetricError : public std::runtime_error {
public:
    explicit UndefinedMetricError(const std::string& msg) : std::runtime_error(msg) {}
};

// On-disk data that cannot be parsed (bad magic, truncation, missing files).
class FormatError : public std::runtime_error {
public:
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid run/engine configuration (empty labeled set, missing artifacts).
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// A fit that cannot proceed (undefined objective, no valid target cells).
class TrainingError : public std::runtime_error {
public:
    explicit TrainingError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace mthg
