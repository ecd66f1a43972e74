#pragma once

#include <cmath>
#include <string>

#include "poar/rng.hpp"
#include "poar/tensor.hpp"

namespace poar::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.storage()) v = rng.normal(0.0, scale);
    return t;
}

inline std::string source_path(const std::string& rel) { return std::string(POAR_SOURCE_DIR) + "/" + rel; }

}  // namespace poar::testing
