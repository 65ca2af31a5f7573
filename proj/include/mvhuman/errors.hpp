#pragma once

#include <stdexcept>
#include <string>

namespace mvhuman {

// Bad configuration values (schedule ranges, network widths, CLI flags).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor/image dimension mismatches.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid domain values (out-of-bounds body parameters, degenerate boxes).
struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Missing keys (memory-box block ids, checkpoint tensors).
struct LookupError : std::runtime_error {
    explicit LookupError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values produced at runtime; carries diagnostics in the message.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// A face-box provider failed outright. Distinct from "no face in this view".
struct DetectionError : std::runtime_error {
    explicit DetectionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem/serialization failures.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace mvhuman
