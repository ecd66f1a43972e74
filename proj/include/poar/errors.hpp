#pragma once

#include <stdexcept>
#include <string>

namespace poar {

struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shapes that do not conform for an operation.
struct shape_error : error {
    using error::error;
};

// NaN/Inf produced or consumed by a numeric routine.
struct numeric_error : error {
    using error::error;
};

// A value violates a documented invariant (catalog, split, mask, labels, config).
struct validation_error : error {
    using error::error;
};

// Training produced a non-finite loss or gradient.
struct divergence_error : numeric_error {
    using numeric_error::numeric_error;
};

struct mask_error : validation_error {
    using validation_error::validation_error;
};

struct split_error : validation_error {
    using validation_error::validation_error;
};

struct annotation_error : validation_error {
    using validation_error::validation_error;
};

// A synthetic sample cannot be rendered (e.g. no render rule for a value).
struct generation_error : error {
    using error::error;
};

// Malformed file content. `line` is 1-based, 0 when not line-oriented.
struct parse_error : error {
    parse_error(const std::string& what, std::size_t line = 0)
        : error(line ? what + " (line " + std::to_string(line) + ")" : what), line(line) {}
    std::size_t line;
};

// Checkpoint and catalog/config do not belong together.
struct compatibility_error : error {
    using error::error;
};

// API used out of order (e.g. attention maps requested without records).
struct usage_error : error {
    using error::error;
};

}  // namespace poar
