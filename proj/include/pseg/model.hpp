#pragma once

#include <string>
#include <utility>
#include <vector>

#include "pseg/ops.hpp"
#include "pseg/tensor.hpp"

namespace pseg {

struct PrototypeBank;

// Fixed architecture: conv3x3(3->16) / relu / conv3x3(16->32, stride 2) /
// relu / conv3x3(32->32) / relu / bilinear resize back to input size /
// conv1x1(32->D). The feature map keeps the input's spatial resolution.
struct ModelConfig {
    int classes = 4;
    int feature_dim = 16;
    int c1 = 16;
    int c2 = 32;
    int c3 = 32;
};

struct Model {
    ModelConfig cfg;
    Tensor conv1_w, conv1_b;
    Tensor conv2_w, conv2_b;
    Tensor conv3_w, conv3_b;
    Tensor proj_w, proj_b;  // 1x1 projection to feature_dim
    Tensor head_w;          // [classes, feature_dim], no bias

    static Model init(const ModelConfig& cfg, Rng& rng, bool requires_grad = true);

    // deep copy; requires_grad of the copy is set as given
    Model clone(bool requires_grad) const;

    std::vector<Tensor> params() const;
    std::vector<std::pair<std::string, Tensor>> named_params() const;

    // image: [n,3,h,w] -> features [n,feature_dim,h,w]
    Tensor features(const Tensor& image) const;

    void zero_grads() const;
    std::uint64_t checksum() const;
};

// per-pixel softmax over the linear head's logits; rows sum to 1
Tensor linear_posterior(const Model& m, const Tensor& fmap);

// per-pixel softmax over max-cosine class similarities at temperature t;
// gradients reach fmap only, never the bank
Tensor prototype_posterior(const PrototypeBank& bank, const Tensor& fmap, double t,
                           std::int64_t* zero_norm_count = nullptr);

struct TeacherState {
    Model model;           // parameters are never touched by the optimizer
    double ema_momentum = 0.99;
};

// theta_t <- m*theta_t + (1-m)*theta_s, every parameter tensor
void ema_update_teacher(TeacherState& teacher, const Model& student);

}  // namespace pseg
