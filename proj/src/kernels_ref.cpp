#include <algorithm>
#include <cmath>
#include <vector>

#include "pseg/kernels.hpp"

namespace pseg::kernels::ref {

namespace {

inline std::int64_t idx4(int a, int b, int c, int d, int nb, int nc, int nd) {
    return ((static_cast<std::int64_t>(a) * nb + b) * nc + c) * nd + d;
}

inline double at_padded(const double* x, int n, int ci, int iy, int ix, const Conv2dDims& d) {
    if (iy < 0 || iy >= d.h || ix < 0 || ix >= d.w) return 0.0;
    return x[idx4(n, ci, iy, ix, d.c_in, d.h, d.w)];
}

}  // namespace

void conv2d_forward(const double* x, const double* w, const double* bias, double* y, const Conv2dDims& d) {
    const int oh = d.h_out(), ow = d.w_out();
    for (int n = 0; n < d.n; ++n)
        for (int co = 0; co < d.c_out; ++co)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    double acc = bias ? bias[co] : 0.0;
                    for (int ci = 0; ci < d.c_in; ++ci)
                        for (int ky = 0; ky < d.kh; ++ky)
                            for (int kx = 0; kx < d.kw; ++kx)
                                acc += at_padded(x, n, ci, oy * d.stride - d.pad + ky, ox * d.stride - d.pad + kx, d) *
                                       w[idx4(co, ci, ky, kx, d.c_in, d.kh, d.kw)];
                    y[idx4(n, co, oy, ox, d.c_out, oh, ow)] = acc;
                }
}

void conv2d_backward_input(const double* grad_y, const double* w, double* grad_x, const Conv2dDims& d) {
    const int oh = d.h_out(), ow = d.w_out();
    // scatter every output's gradient to the inputs it read
    for (int n = 0; n < d.n; ++n)
        for (int co = 0; co < d.c_out; ++co)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    const double g = grad_y[idx4(n, co, oy, ox, d.c_out, oh, ow)];
                    for (int ci = 0; ci < d.c_in; ++ci)
                        for (int ky = 0; ky < d.kh; ++ky)
                            for (int kx = 0; kx < d.kw; ++kx) {
                                const int iy = oy * d.stride - d.pad + ky;
                                const int ix = ox * d.stride - d.pad + kx;
                                if (iy < 0 || iy >= d.h || ix < 0 || ix >= d.w) continue;
                                grad_x[idx4(n, ci, iy, ix, d.c_in, d.h, d.w)] +=
                                    g * w[idx4(co, ci, ky, kx, d.c_in, d.kh, d.kw)];
                            }
                }
}

void conv2d_backward_weight(const double* grad_y, const double* x, double* grad_w, double* grad_bias,
                            const Conv2dDims& d) {
    const int oh = d.h_out(), ow = d.w_out();
    for (int n = 0; n < d.n; ++n)
        for (int co = 0; co < d.c_out; ++co)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    const double g = grad_y[idx4(n, co, oy, ox, d.c_out, oh, ow)];
                    if (grad_bias) grad_bias[co] += g;
                    if (!grad_w) continue;
                    for (int ci = 0; ci < d.c_in; ++ci)
                        for (int ky = 0; ky < d.kh; ++ky)
                            for (int kx = 0; kx < d.kw; ++kx)
                                grad_w[idx4(co, ci, ky, kx, d.c_in, d.kh, d.kw)] +=
                                    g * at_padded(x, n, ci, oy * d.stride - d.pad + ky, ox * d.stride - d.pad + kx, d);
                }
}

namespace {

struct Tap {
    int lo, hi;
    double w_hi;
};

Tap tap_at(int o, int in_n, int out_n) {
    double s = (o + 0.5) * (static_cast<double>(in_n) / out_n) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in_n - 1));
    Tap t;
    t.lo = static_cast<int>(s);
    t.hi = std::min(t.lo + 1, in_n - 1);
    t.w_hi = s - t.lo;
    return t;
}

}  // namespace

void resize_bilinear_forward(const double* x, double* y, const ResizeDims& d) {
    for (int n = 0; n < d.n; ++n)
        for (int c = 0; c < d.c; ++c)
            for (int oy = 0; oy < d.out_h; ++oy)
                for (int ox = 0; ox < d.out_w; ++ox) {
                    const Tap ty = tap_at(oy, d.h, d.out_h);
                    const Tap tx = tap_at(ox, d.w, d.out_w);
                    const double v =
                        (1.0 - ty.w_hi) * ((1.0 - tx.w_hi) * x[idx4(n, c, ty.lo, tx.lo, d.c, d.h, d.w)] +
                                           tx.w_hi * x[idx4(n, c, ty.lo, tx.hi, d.c, d.h, d.w)]) +
                        ty.w_hi * ((1.0 - tx.w_hi) * x[idx4(n, c, ty.hi, tx.lo, d.c, d.h, d.w)] +
                                   tx.w_hi * x[idx4(n, c, ty.hi, tx.hi, d.c, d.h, d.w)]);
                    y[idx4(n, c, oy, ox, d.c, d.out_h, d.out_w)] = v;
                }
}

void resize_bilinear_backward(const double* grad_y, double* grad_x, const ResizeDims& d) {
    for (int n = 0; n < d.n; ++n)
        for (int c = 0; c < d.c; ++c)
            for (int oy = 0; oy < d.out_h; ++oy)
                for (int ox = 0; ox < d.out_w; ++ox) {
                    const Tap ty = tap_at(oy, d.h, d.out_h);
                    const Tap tx = tap_at(ox, d.w, d.out_w);
                    const double g = grad_y[idx4(n, c, oy, ox, d.c, d.out_h, d.out_w)];
                    grad_x[idx4(n, c, ty.lo, tx.lo, d.c, d.h, d.w)] += g * (1.0 - ty.w_hi) * (1.0 - tx.w_hi);
                    grad_x[idx4(n, c, ty.lo, tx.hi, d.c, d.h, d.w)] += g * (1.0 - ty.w_hi) * tx.w_hi;
                    grad_x[idx4(n, c, ty.hi, tx.lo, d.c, d.h, d.w)] += g * ty.w_hi * (1.0 - tx.w_hi);
                    grad_x[idx4(n, c, ty.hi, tx.hi, d.c, d.h, d.w)] += g * ty.w_hi * tx.w_hi;
                }
}

void linear_logits_forward(const double* fmap, const double* w, double* logits, int n, int dfeat, int classes,
                           std::int64_t pixels) {
    for (int ni = 0; ni < n; ++ni)
        for (int c = 0; c < classes; ++c)
            for (std::int64_t p = 0; p < pixels; ++p) {
                double acc = 0.0;
                for (int dd = 0; dd < dfeat; ++dd)
                    acc += w[static_cast<std::int64_t>(c) * dfeat + dd] *
                           fmap[(static_cast<std::int64_t>(ni) * dfeat + dd) * pixels + p];
                logits[(static_cast<std::int64_t>(ni) * classes + c) * pixels + p] = acc;
            }
}

void proto_scores_forward(const double* fmap, const double* protos, const int* class_of, int n_protos, double* scores,
                          int* argmax, std::int64_t* zero_norm_count, int n, int dfeat, int classes,
                          std::int64_t pixels) {
    for (int ni = 0; ni < n; ++ni)
        for (std::int64_t p = 0; p < pixels; ++p) {
            std::vector<double> x(static_cast<std::size_t>(dfeat));
            for (int dd = 0; dd < dfeat; ++dd)
                x[static_cast<std::size_t>(dd)] = fmap[(static_cast<std::int64_t>(ni) * dfeat + dd) * pixels + p];
            double xn = 0.0;
            for (double v : x) xn += v * v;
            xn = std::sqrt(xn);

            for (int c = 0; c < classes; ++c) {
                double best = -2.0;
                int best_j = -1;
                for (int j = 0; j < n_protos; ++j) {
                    if (class_of[j] != c) continue;
                    double pn = 0.0, dot = 0.0;
                    for (int dd = 0; dd < dfeat; ++dd) {
                        const double pv = protos[static_cast<std::int64_t>(j) * dfeat + dd];
                        pn += pv * pv;
                        dot += pv * x[static_cast<std::size_t>(dd)];
                    }
                    pn = std::sqrt(pn);
                    double sim = 0.0;
                    if (pn == 0.0 || xn == 0.0) {
                        if (zero_norm_count) *zero_norm_count += 1;
                    } else {
                        sim = dot / (pn * xn);
                    }
                    if (sim > best) {
                        best = sim;
                        best_j = j;
                    }
                }
                scores[(static_cast<std::int64_t>(ni) * classes + c) * pixels + p] = best;
                argmax[(static_cast<std::int64_t>(ni) * classes + c) * pixels + p] = best_j;
            }
        }
}

void softmax_forward(const double* x, double* y, std::int64_t outer, int axis_n, std::int64_t inner) {
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < inner; ++i) {
            const double* xp = x + o * axis_n * inner + i;
            double* yp = y + o * axis_n * inner + i;
            double mx = xp[0];
            for (int c = 1; c < axis_n; ++c) mx = std::max(mx, xp[static_cast<std::int64_t>(c) * inner]);
            double sum = 0.0;
            for (int c = 0; c < axis_n; ++c) sum += std::exp(xp[static_cast<std::int64_t>(c) * inner] - mx);
            for (int c = 0; c < axis_n; ++c)
                yp[static_cast<std::int64_t>(c) * inner] = std::exp(xp[static_cast<std::int64_t>(c) * inner] - mx) / sum;
        }
}

}  // namespace pseg::kernels::ref
