#pragma once

#include <cstdint>

namespace pseg::kernels {

// Raw-buffer compute kernels behind the tensor ops. The primary entry points
// are OpenMP-parallel; every parallel loop assigns each output element to
// exactly one thread and keeps a fixed per-element summation order, so results
// are bitwise identical for any thread count. kernels::ref holds independent
// serial implementations, written definition-first, used as oracles by the
// tests and by the kernel benchmark.

struct Conv2dDims {
    int n;      // batch
    int c_in;
    int h;
    int w;
    int c_out;
    int kh;
    int kw;
    int stride = 1;
    int pad = 0;

    int h_out() const { return (h + 2 * pad - kh) / stride + 1; }
    int w_out() const { return (w + 2 * pad - kw) / stride + 1; }
};

// y[n,co,oy,ox] = bias[co] + sum_{ci,ky,kx} x[n,ci,oy*s-p+ky,ox*s-p+kx] * w[co,ci,ky,kx]
void conv2d_forward(const double* x, const double* w, const double* bias, double* y, const Conv2dDims& d);
// accumulates into grad_x
void conv2d_backward_input(const double* grad_y, const double* w, double* grad_x, const Conv2dDims& d);
// accumulates into grad_w / grad_bias (either may be null)
void conv2d_backward_weight(const double* grad_y, const double* x, double* grad_w, double* grad_bias,
                            const Conv2dDims& d);

struct ResizeDims {
    int n;
    int c;
    int h;
    int w;
    int out_h;
    int out_w;
};

// Bilinear resize, half-pixel-centre sampling (source = (dst + 0.5)/scale - 0.5).
void resize_bilinear_forward(const double* x, double* y, const ResizeDims& d);
void resize_bilinear_backward(const double* grad_y, double* grad_x, const ResizeDims& d);

// logits[n,c,p] = sum_d w[c,d] * fmap[n,d,p]    (p ranges over h*w pixels)
void linear_logits_forward(const double* fmap, const double* w, double* logits, int n, int dfeat, int classes,
                           std::int64_t pixels);
void linear_logits_backward_fmap(const double* grad_logits, const double* w, double* grad_fmap, int n, int dfeat,
                                 int classes, std::int64_t pixels);
void linear_logits_backward_weight(const double* grad_logits, const double* fmap, double* grad_w, int n, int dfeat,
                                   int classes, std::int64_t pixels);

// feature vectors are staged on the stack inside the pixel loops
inline constexpr int kMaxFeatureDim = 64;

// scores[n,c,p] = max over prototypes j with class_of[j]==c of cosine(proto_j, fmap[n,:,p]).
// argmax[n,c,p] records the winning prototype (ties resolved to the lowest
// index); zero-norm pairs contribute similarity 0 and are counted.
void proto_scores_forward(const double* fmap, const double* protos, const int* class_of, int n_protos, double* scores,
                          int* argmax, std::int64_t* zero_norm_count, int n, int dfeat, int classes,
                          std::int64_t pixels);
// accumulates into grad_fmap, routing through the recorded argmax prototype
void proto_scores_backward(const double* grad_scores, const double* fmap, const double* protos, int n_protos,
                           const int* argmax, double* grad_fmap, int n, int dfeat, int classes, std::int64_t pixels);

// softmax over the axis with extent `axis_n`, where the tensor is viewed as
// [outer, axis_n, inner]; lanes are independent.
void softmax_forward(const double* x, double* y, std::int64_t outer, int axis_n, std::int64_t inner);
void softmax_backward(const double* grad_y, const double* y, double* grad_x, std::int64_t outer, int axis_n,
                      std::int64_t inner);

void relu_forward(const double* x, double* y, std::int64_t n);
void relu_backward(const double* grad_y, const double* x, double* grad_x, std::int64_t n);

// y[m,n] = sum_k a[m,k] b[k,n]
void matmul_forward(const double* a, const double* b, double* y, int m, int k, int n);
void matmul_backward_a(const double* grad_y, const double* b, double* grad_a, int m, int k, int n);
void matmul_backward_b(const double* grad_y, const double* a, double* grad_b, int m, int k, int n);

namespace ref {

void conv2d_forward(const double* x, const double* w, const double* bias, double* y, const Conv2dDims& d);
void conv2d_backward_input(const double* grad_y, const double* w, double* grad_x, const Conv2dDims& d);
void conv2d_backward_weight(const double* grad_y, const double* x, double* grad_w, double* grad_bias,
                            const Conv2dDims& d);
void resize_bilinear_forward(const double* x, double* y, const ResizeDims& d);
void resize_bilinear_backward(const double* grad_y, double* grad_x, const ResizeDims& d);
void linear_logits_forward(const double* fmap, const double* w, double* logits, int n, int dfeat, int classes,
                           std::int64_t pixels);
void proto_scores_forward(const double* fmap, const double* protos, const int* class_of, int n_protos, double* scores,
                          int* argmax, std::int64_t* zero_norm_count, int n, int dfeat, int classes,
                          std::int64_t pixels);
void softmax_forward(const double* x, double* y, std::int64_t outer, int axis_n, std::int64_t inner);

}  // namespace ref

int max_threads();

}  // namespace pseg::kernels
