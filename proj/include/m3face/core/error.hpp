#pragma once

#include <stdexcept>
#include <string>

namespace m3face {

/// Input failed a documented precondition (shape, range, palette, ...).
class ValidationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A pluggable backend (text encoder, upscaler, translator) is not registered
/// or could not run.
class BackendError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Training produced a non-finite or diverging loss.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A required pipeline stage or checkpoint is missing.
class StageError : public std::runtime_error {
public:
    StageError(std::string stage, const std::string& what)
        : std::runtime_error(stage + ": " + what), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

}  // namespace m3face
