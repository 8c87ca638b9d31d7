#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dcswin/tensor.hpp"

namespace dcswin {

struct GradcheckOptions {
    double step = 1e-3;             // central-difference half width
    int64_t max_elements = 64;      // sampled per input tensor; all if fewer
    int64_t total_samples = 0;      // when > 0, sample this many elements across all inputs instead
    uint64_t seed = 0;
};

struct GradcheckReport {
    /// max over checked elements of |analytic - numeric| / (|analytic| + 1e-6)
    double max_rel_error = 0.0;
    std::string worst;  // "<input>[<flat index>]: analytic=..., numeric=..."
    int64_t checked = 0;
};

/// Compares reverse-mode gradients of `loss` (a scalar-valued closure) with
/// central finite differences, perturbing each listed input in place.
GradcheckReport gradcheck(const std::function<Tensor64()>& loss, std::vector<Tensor64> inputs,
                          const std::vector<std::string>& names = {}, GradcheckOptions opt = {});

/// Random projection loss sum(y * r) with a fixed r, so every output element
/// contributes to the checked gradient.
Tensor64 projection_loss(const Tensor64& y, uint64_t seed);

}  // namespace dcswin
