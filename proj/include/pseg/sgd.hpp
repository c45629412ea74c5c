#pragma once

#include <cstdint>
#include <vector>

#include "pseg/tensor.hpp"

namespace pseg {

struct SgdConfig {
    double base_lr = 1e-3;
    double weight_decay = 0.0;
    double momentum = 0.9;
    std::int64_t total_iters = 1;
    double poly_power = 0.8;
};

// lr(iter) = base_lr * (1 - iter/total_iters)^poly_power; valid for iter in [0, total_iters]
double poly_lr(const SgdConfig& cfg, std::int64_t iter);

// one velocity buffer per parameter, matched by position
struct SgdState {
    std::vector<std::vector<double>> velocity;
};

// v <- momentum*v + (grad + weight_decay*p);  p <- p - lr(iter)*v
// Parameters with no gradient buffer are stepped with a zero gradient.
// Throws std::out_of_range when iter is outside [0, total_iters).
void sgd_step(std::vector<Tensor>& params, SgdState& state, const SgdConfig& cfg, std::int64_t iter);

}  // namespace pseg
