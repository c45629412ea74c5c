#pragma once

#include <cstdint>
#include <vector>

#include "pseg/tensor.hpp"

namespace pseg::ops {

// Differentiable tensor ops. Each op validates shapes (ShapeError on
// mismatch), runs a kernel, and records a backprop closure when any input is
// tracked. All forward passes are bit-deterministic for fixed inputs.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

// a: [m,k], b: [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);

// x: [n,c_in,h,w], w: [c_out,c_in,kh,kw], bias: [c_out] or undefined
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride = 1, int pad = 0);

Tensor relu(const Tensor& x);

// x: [n,c,h,w] -> [n,c,out_h,out_w], half-pixel-centre bilinear
Tensor resize_bilinear(const Tensor& x, int out_h, int out_w);

// softmax over the given axis
Tensor softmax(const Tensor& x, int axis);

Tensor log(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// both flattened to vectors; zero-norm input yields 0 with zero gradient
Tensor cosine_similarity(const Tensor& a, const Tensor& b);

// fmap: [n,d,h,w], w: [c,d] -> per-pixel logits [n,c,h,w]
Tensor linear_logits(const Tensor& fmap, const Tensor& w);

// fmap: [n,d,h,w], protos: [p,d] (never receives gradient), class_of: size p
// -> per-class max cosine similarity [n,c,h,w]. zero_norm_count, when given,
// is incremented once per zero-norm (prototype, pixel) pair.
Tensor proto_scores(const Tensor& fmap, const Tensor& protos, const std::vector<int>& class_of, int classes,
                    std::int64_t* zero_norm_count = nullptr);

enum class CeNorm {
    MeanAll,     // mean over every pixel of every image in the batch
    MaskedMean,  // sum over mask-selected pixels / max(1, selected count)
};

// prob: [n,c,h,w] per-pixel distributions, labels: n*h*w class ids, mask:
// empty or n*h*w flags. Probabilities are clamped to [1e-9, 1-1e-9]; pixels
// outside the mask are skipped entirely and contribute exactly zero loss and
// gradient.
Tensor cross_entropy(const Tensor& prob, const std::vector<std::uint8_t>& labels,
                     const std::vector<std::uint8_t>& mask, CeNorm norm);

inline Tensor cross_entropy(const Tensor& prob, const std::vector<std::uint8_t>& labels) {
    return cross_entropy(prob, labels, {}, CeNorm::MeanAll);
}

inline constexpr double kProbClampLo = 1e-9;
inline constexpr double kProbClampHi = 1.0 - 1e-9;

}  // namespace pseg::ops
