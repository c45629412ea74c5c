#include "pseg/sgd.hpp"

#include <cmath>
#include <stdexcept>

namespace pseg {

double poly_lr(const SgdConfig& cfg, std::int64_t iter) {
    if (iter < 0 || iter > cfg.total_iters) throw std::out_of_range("poly_lr: iter outside [0, total_iters]");
    const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(cfg.total_iters);
    return cfg.base_lr * std::pow(frac, cfg.poly_power);
}

void sgd_step(std::vector<Tensor>& params, SgdState& state, const SgdConfig& cfg, std::int64_t iter) {
    if (iter < 0 || iter >= cfg.total_iters) throw std::out_of_range("sgd_step: iter outside [0, total_iters)");
    const double lr = poly_lr(cfg, iter);
    if (state.velocity.size() != params.size()) state.velocity.resize(params.size());

    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        auto& v = state.velocity[i];
        if (v.size() != static_cast<std::size_t>(p.size())) v.assign(static_cast<std::size_t>(p.size()), 0.0);
        const bool has_grad = p.has_grad();
        double* pv = p.data();
        const std::size_t n = v.size();
        for (std::size_t k = 0; k < n; ++k) {
            const double g = (has_grad ? p.grad()[k] : 0.0) + cfg.weight_decay * pv[k];
            v[k] = cfg.momentum * v[k] + g;
            pv[k] -= lr * v[k];
        }
    }
}

}  // namespace pseg
