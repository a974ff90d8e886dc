#pragma once

#include <stdexcept>
#include <string>

namespace mmboot {

/// Base class for all library errors.
class error : public std::runtime_error {
public:
    explicit error(const std::string& what) : std::runtime_error(what) {}
};

/// Invalid user input: bad parameter values, malformed files, unusable
/// configurations.  Maps to process exit code 2 in the CLI.
class config_error : public error {
public:
    explicit config_error(const std::string& what) : error(what) {}
};

/// A requested operation needs a capability the model does not provide
/// (probability oracle, boundary projection, acceleration constant, ...).
/// Maps to process exit code 3 in the CLI.
class capability_error : public error {
public:
    explicit capability_error(const std::string& what) : error(what) {}
};

/// Numerical breakdown: non-convergent iteration, singular system,
/// out-of-range intermediate.  Maps to process exit code 4 in the CLI.
class numerical_error : public error {
public:
    explicit numerical_error(const std::string& what) : error(what) {}
};

} // namespace mmboot
