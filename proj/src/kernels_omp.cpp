#include "pseg/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace pseg::kernels {

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

void conv2d_forward(const double* x, const double* w, const double* bias, double* y, const Conv2dDims& d) {
    const int oh = d.h_out(), ow = d.w_out();
    const std::int64_t x_plane = static_cast<std::int64_t>(d.h) * d.w;
    const std::int64_t y_plane = static_cast<std::int64_t>(oh) * ow;

#pragma omp parallel for collapse(2) schedule(static) if (d.n* d.c_out > 1)
    for (int n = 0; n < d.n; ++n) {
        for (int co = 0; co < d.c_out; ++co) {
            double* yp = y + (static_cast<std::int64_t>(n) * d.c_out + co) * y_plane;
            const double b = bias ? bias[co] : 0.0;
            for (int oy = 0; oy < oh; ++oy) {
                const int iy0 = oy * d.stride - d.pad;
                const int ky_lo = std::max(0, -iy0);
                const int ky_hi = std::min(d.kh, d.h - iy0);
                for (int ox = 0; ox < ow; ++ox) {
                    const int ix0 = ox * d.stride - d.pad;
                    const int kx_lo = std::max(0, -ix0);
                    const int kx_hi = std::min(d.kw, d.w - ix0);
                    double acc = b;
                    for (int ci = 0; ci < d.c_in; ++ci) {
                        const double* xp = x + (static_cast<std::int64_t>(n) * d.c_in + ci) * x_plane;
                        const double* wp = w + ((static_cast<std::int64_t>(co) * d.c_in + ci) * d.kh) * d.kw;
                        for (int ky = ky_lo; ky < ky_hi; ++ky) {
                            const double* xrow = xp + static_cast<std::int64_t>(iy0 + ky) * d.w + ix0;
                            const double* wrow = wp + static_cast<std::int64_t>(ky) * d.kw;
                            for (int kx = kx_lo; kx < kx_hi; ++kx) acc += xrow[kx] * wrow[kx];
                        }
                    }
                    yp[static_cast<std::int64_t>(oy) * ow + ox] = acc;
                }
            }
        }
    }
}

void conv2d_backward_input(const double* grad_y, const double* w, double* grad_x, const Conv2dDims& d) {
    const int oh = d.h_out(), ow = d.w_out();
    const std::int64_t x_plane = static_cast<std::int64_t>(d.h) * d.w;
    const std::int64_t y_plane = static_cast<std::int64_t>(oh) * ow;

    // gather formulation: each input element is owned by one iteration
#pragma omp parallel for collapse(2) schedule(static) if (d.n* d.c_in > 1)
    for (int n = 0; n < d.n; ++n) {
        for (int ci = 0; ci < d.c_in; ++ci) {
            double* gxp = grad_x + (static_cast<std::int64_t>(n) * d.c_in + ci) * x_plane;
            for (int iy = 0; iy < d.h; ++iy) {
                for (int ix = 0; ix < d.w; ++ix) {
                    double acc = 0.0;
                    for (int co = 0; co < d.c_out; ++co) {
                        const double* gyp = grad_y + (static_cast<std::int64_t>(n) * d.c_out + co) * y_plane;
                        const double* wp = w + ((static_cast<std::int64_t>(co) * d.c_in + ci) * d.kh) * d.kw;
                        for (int ky = 0; ky < d.kh; ++ky) {
                            const int ty = iy + d.pad - ky;
                            if (ty < 0 || ty % d.stride != 0) continue;
                            const int oy = ty / d.stride;
                            if (oy >= oh) continue;
                            for (int kx = 0; kx < d.kw; ++kx) {
                                const int tx = ix + d.pad - kx;
                                if (tx < 0 || tx % d.stride != 0) continue;
                                const int ox = tx / d.stride;
                                if (ox >= ow) continue;
                                acc += wp[static_cast<std::int64_t>(ky) * d.kw + kx] *
                                       gyp[static_cast<std::int64_t>(oy) * ow + ox];
                            }
                        }
                    }
                    gxp[static_cast<std::int64_t>(iy) * d.w + ix] += acc;
                }
            }
        }
    }
}

void conv2d_backward_weight(const double* grad_y, const double* x, double* grad_w, double* grad_bias,
                            const Conv2dDims& d) {
    const int oh = d.h_out(), ow = d.w_out();
    const std::int64_t x_plane = static_cast<std::int64_t>(d.h) * d.w;
    const std::int64_t y_plane = static_cast<std::int64_t>(oh) * ow;

    // each thread owns the gradient slice of one output channel
#pragma omp parallel for schedule(static) if (d.c_out > 1)
    for (int co = 0; co < d.c_out; ++co) {
        double* gwp = grad_w ? grad_w + (static_cast<std::int64_t>(co) * d.c_in) * d.kh * d.kw : nullptr;
        double bacc = 0.0;
        for (int n = 0; n < d.n; ++n) {
            const double* gyp = grad_y + (static_cast<std::int64_t>(n) * d.c_out + co) * y_plane;
            for (int oy = 0; oy < oh; ++oy) {
                const int iy0 = oy * d.stride - d.pad;
                const int ky_lo = std::max(0, -iy0);
                const int ky_hi = std::min(d.kh, d.h - iy0);
                for (int ox = 0; ox < ow; ++ox) {
                    const double g = gyp[static_cast<std::int64_t>(oy) * ow + ox];
                    bacc += g;
                    if (!gwp) continue;
                    const int ix0 = ox * d.stride - d.pad;
                    const int kx_lo = std::max(0, -ix0);
                    const int kx_hi = std::min(d.kw, d.w - ix0);
                    for (int ci = 0; ci < d.c_in; ++ci) {
                        const double* xp = x + (static_cast<std::int64_t>(n) * d.c_in + ci) * x_plane;
                        double* gwrow = gwp + static_cast<std::int64_t>(ci) * d.kh * d.kw;
                        for (int ky = ky_lo; ky < ky_hi; ++ky) {
                            const double* xrow = xp + static_cast<std::int64_t>(iy0 + ky) * d.w + ix0;
                            for (int kx = kx_lo; kx < kx_hi; ++kx)
                                gwrow[static_cast<std::int64_t>(ky) * d.kw + kx] += g * xrow[kx];
                        }
                    }
                }
            }
        }
        if (grad_bias) grad_bias[co] += bacc;
    }
}

namespace {

struct TapTable {
    std::vector<int> lo, hi;      // the two source indices per output index
    std::vector<double> w_hi;     // weight of the hi tap; lo gets 1 - w_hi
};

TapTable make_taps(int in_n, int out_n) {
    TapTable t;
    t.lo.resize(static_cast<std::size_t>(out_n));
    t.hi.resize(static_cast<std::size_t>(out_n));
    t.w_hi.resize(static_cast<std::size_t>(out_n));
    const double scale = static_cast<double>(in_n) / out_n;
    for (int o = 0; o < out_n; ++o) {
        double s = (o + 0.5) * scale - 0.5;
        if (s < 0.0) s = 0.0;
        if (s > in_n - 1) s = in_n - 1;
        const int lo = static_cast<int>(s);
        t.lo[static_cast<std::size_t>(o)] = lo;
        t.hi[static_cast<std::size_t>(o)] = std::min(lo + 1, in_n - 1);
        t.w_hi[static_cast<std::size_t>(o)] = s - lo;
    }
    return t;
}

}  // namespace

void resize_bilinear_forward(const double* x, double* y, const ResizeDims& d) {
    const TapTable ty = make_taps(d.h, d.out_h);
    const TapTable tx = make_taps(d.w, d.out_w);
    const std::int64_t planes = static_cast<std::int64_t>(d.n) * d.c;
    const std::int64_t in_plane = static_cast<std::int64_t>(d.h) * d.w;
    const std::int64_t out_plane = static_cast<std::int64_t>(d.out_h) * d.out_w;

#pragma omp parallel for schedule(static) if (planes > 1)
    for (std::int64_t p = 0; p < planes; ++p) {
        const double* xp = x + p * in_plane;
        double* yp = y + p * out_plane;
        for (int oy = 0; oy < d.out_h; ++oy) {
            const double* r0 = xp + static_cast<std::int64_t>(ty.lo[oy]) * d.w;
            const double* r1 = xp + static_cast<std::int64_t>(ty.hi[oy]) * d.w;
            const double fy = ty.w_hi[oy];
            for (int ox = 0; ox < d.out_w; ++ox) {
                const int x0 = tx.lo[ox], x1 = tx.hi[ox];
                const double fx = tx.w_hi[ox];
                const double top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
                const double bot = r1[x0] * (1.0 - fx) + r1[x1] * fx;
                yp[static_cast<std::int64_t>(oy) * d.out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
}

void resize_bilinear_backward(const double* grad_y, double* grad_x, const ResizeDims& d) {
    const TapTable ty = make_taps(d.h, d.out_h);
    const TapTable tx = make_taps(d.w, d.out_w);
    const std::int64_t planes = static_cast<std::int64_t>(d.n) * d.c;
    const std::int64_t in_plane = static_cast<std::int64_t>(d.h) * d.w;
    const std::int64_t out_plane = static_cast<std::int64_t>(d.out_h) * d.out_w;

    // scatter is race-free because each thread owns whole planes
#pragma omp parallel for schedule(static) if (planes > 1)
    for (std::int64_t p = 0; p < planes; ++p) {
        const double* gyp = grad_y + p * out_plane;
        double* gxp = grad_x + p * in_plane;
        for (int oy = 0; oy < d.out_h; ++oy) {
            const std::int64_t y0 = ty.lo[oy], y1 = ty.hi[oy];
            const double fy = ty.w_hi[oy];
            for (int ox = 0; ox < d.out_w; ++ox) {
                const double g = gyp[static_cast<std::int64_t>(oy) * d.out_w + ox];
                const int x0 = tx.lo[ox], x1 = tx.hi[ox];
                const double fx = tx.w_hi[ox];
                gxp[y0 * d.w + x0] += g * (1.0 - fy) * (1.0 - fx);
                gxp[y0 * d.w + x1] += g * (1.0 - fy) * fx;
                gxp[y1 * d.w + x0] += g * fy * (1.0 - fx);
                gxp[y1 * d.w + x1] += g * fy * fx;
            }
        }
    }
}

void linear_logits_forward(const double* fmap, const double* w, double* logits, int n, int dfeat, int classes,
                           std::int64_t pixels) {
#pragma omp parallel for collapse(2) schedule(static) if (n* classes > 1)
    for (int ni = 0; ni < n; ++ni) {
        for (int c = 0; c < classes; ++c) {
            double* out = logits + (static_cast<std::int64_t>(ni) * classes + c) * pixels;
            std::fill(out, out + pixels, 0.0);
            for (int dd = 0; dd < dfeat; ++dd) {
                const double wv = w[static_cast<std::int64_t>(c) * dfeat + dd];
                const double* in = fmap + (static_cast<std::int64_t>(ni) * dfeat + dd) * pixels;
                for (std::int64_t p = 0; p < pixels; ++p) out[p] += wv * in[p];
            }
        }
    }
}

void linear_logits_backward_fmap(const double* grad_logits, const double* w, double* grad_fmap, int n, int dfeat,
                                 int classes, std::int64_t pixels) {
#pragma omp parallel for collapse(2) schedule(static) if (n* dfeat > 1)
    for (int ni = 0; ni < n; ++ni) {
        for (int dd = 0; dd < dfeat; ++dd) {
            double* out = grad_fmap + (static_cast<std::int64_t>(ni) * dfeat + dd) * pixels;
            for (int c = 0; c < classes; ++c) {
                const double wv = w[static_cast<std::int64_t>(c) * dfeat + dd];
                const double* in = grad_logits + (static_cast<std::int64_t>(ni) * classes + c) * pixels;
                for (std::int64_t p = 0; p < pixels; ++p) out[p] += wv * in[p];
            }
        }
    }
}

void linear_logits_backward_weight(const double* grad_logits, const double* fmap, double* grad_w, int n, int dfeat,
                                   int classes, std::int64_t pixels) {
#pragma omp parallel for collapse(2) schedule(static) if (classes* dfeat > 1)
    for (int c = 0; c < classes; ++c) {
        for (int dd = 0; dd < dfeat; ++dd) {
            double acc = 0.0;
            for (int ni = 0; ni < n; ++ni) {
                const double* g = grad_logits + (static_cast<std::int64_t>(ni) * classes + c) * pixels;
                const double* f = fmap + (static_cast<std::int64_t>(ni) * dfeat + dd) * pixels;
                for (std::int64_t p = 0; p < pixels; ++p) acc += g[p] * f[p];
            }
            grad_w[static_cast<std::int64_t>(c) * dfeat + dd] += acc;
        }
    }
}

void proto_scores_forward(const double* fmap, const double* protos, const int* class_of, int n_protos, double* scores,
                          int* argmax, std::int64_t* zero_norm_count, int n, int dfeat, int classes,
                          std::int64_t pixels) {
    std::vector<double> pnorm(static_cast<std::size_t>(n_protos));
    for (int j = 0; j < n_protos; ++j) {
        double s = 0.0;
        for (int dd = 0; dd < dfeat; ++dd) {
            const double v = protos[static_cast<std::int64_t>(j) * dfeat + dd];
            s += v * v;
        }
        pnorm[static_cast<std::size_t>(j)] = std::sqrt(s);
    }

    std::int64_t zeros = 0;
    const std::int64_t total = static_cast<std::int64_t>(n) * pixels;

#pragma omp parallel for schedule(static) reduction(+ : zeros) if (total > 64)
    for (std::int64_t t = 0; t < total; ++t) {
        const std::int64_t ni = t / pixels;
        const std::int64_t p = t % pixels;
        const double* fbase = fmap + ni * dfeat * pixels + p;

        double xs[kMaxFeatureDim];
        double xn2 = 0.0;
        for (int dd = 0; dd < dfeat; ++dd) {
            const double v = fbase[static_cast<std::int64_t>(dd) * pixels];
            xs[dd] = v;
            xn2 += v * v;
        }
        const double xnorm = std::sqrt(xn2);

        double* srow = scores + ni * classes * pixels + p;
        int* arow = argmax + ni * classes * pixels + p;
        for (int c = 0; c < classes; ++c) {
            srow[static_cast<std::int64_t>(c) * pixels] = -2.0;  // below any cosine
            arow[static_cast<std::int64_t>(c) * pixels] = -1;
        }
        for (int j = 0; j < n_protos; ++j) {
            const int c = class_of[j];
            double sim = 0.0;
            if (xnorm == 0.0 || pnorm[static_cast<std::size_t>(j)] == 0.0) {
                zeros += 1;
            } else {
                double dot = 0.0;
                const double* pj = protos + static_cast<std::int64_t>(j) * dfeat;
                for (int dd = 0; dd < dfeat; ++dd) dot += pj[dd] * xs[dd];
                sim = dot / (pnorm[static_cast<std::size_t>(j)] * xnorm);
            }
            if (sim > srow[static_cast<std::int64_t>(c) * pixels]) {
                srow[static_cast<std::int64_t>(c) * pixels] = sim;
                arow[static_cast<std::int64_t>(c) * pixels] = j;
            }
        }
    }
    if (zero_norm_count) *zero_norm_count += zeros;
}

void proto_scores_backward(const double* grad_scores, const double* fmap, const double* protos, int n_protos,
                           const int* argmax, double* grad_fmap, int n, int dfeat, int classes, std::int64_t pixels) {
    std::vector<double> pnorm(static_cast<std::size_t>(n_protos));
    for (int j = 0; j < n_protos; ++j) {
        double s = 0.0;
        for (int dd = 0; dd < dfeat; ++dd) {
            const double v = protos[static_cast<std::int64_t>(j) * dfeat + dd];
            s += v * v;
        }
        pnorm[static_cast<std::size_t>(j)] = std::sqrt(s);
    }

    const std::int64_t total = static_cast<std::int64_t>(n) * pixels;
#pragma omp parallel for schedule(static) if (total > 64)
    for (std::int64_t t = 0; t < total; ++t) {
        const std::int64_t ni = t / pixels;
        const std::int64_t p = t % pixels;
        const double* fbase = fmap + ni * dfeat * pixels + p;

        double xs[kMaxFeatureDim];
        double xn2 = 0.0;
        for (int dd = 0; dd < dfeat; ++dd) {
            const double v = fbase[static_cast<std::int64_t>(dd) * pixels];
            xs[dd] = v;
            xn2 += v * v;
        }
        const double xnorm = std::sqrt(xn2);
        if (xnorm == 0.0) continue;  // similarity was pinned to 0, no gradient

        double gx[kMaxFeatureDim] = {0.0};
        bool any = false;
        const double* grow = grad_scores + ni * classes * pixels + p;
        const int* arow = argmax + ni * classes * pixels + p;
        for (int c = 0; c < classes; ++c) {
            const double g = grow[static_cast<std::int64_t>(c) * pixels];
            if (g == 0.0) continue;
            const int j = arow[static_cast<std::int64_t>(c) * pixels];
            if (j < 0 || pnorm[static_cast<std::size_t>(j)] == 0.0) continue;
            const double pn = pnorm[static_cast<std::size_t>(j)];
            const double* pj = protos + static_cast<std::int64_t>(j) * dfeat;
            double dot = 0.0;
            for (int dd = 0; dd < dfeat; ++dd) dot += pj[dd] * xs[dd];
            const double inv = 1.0 / (pn * xnorm);
            const double cos = dot * inv;
            const double xscale = cos / (xnorm * xnorm);
            for (int dd = 0; dd < dfeat; ++dd) gx[dd] += g * (pj[dd] * inv - xscale * xs[dd]);
            any = true;
        }
        if (!any) continue;
        double* gbase = grad_fmap + ni * dfeat * pixels + p;
        for (int dd = 0; dd < dfeat; ++dd) gbase[static_cast<std::int64_t>(dd) * pixels] += gx[dd];
    }
}

void softmax_forward(const double* x, double* y, std::int64_t outer, int axis_n, std::int64_t inner) {
    const std::int64_t lanes = outer * inner;
#pragma omp parallel for schedule(static) if (lanes > 64)
    for (std::int64_t t = 0; t < lanes; ++t) {
        const std::int64_t o = t / inner;
        const std::int64_t i = t % inner;
        const double* xp = x + o * axis_n * inner + i;
        double* yp = y + o * axis_n * inner + i;
        double mx = xp[0];
        for (int c = 1; c < axis_n; ++c) mx = std::max(mx, xp[static_cast<std::int64_t>(c) * inner]);
        double sum = 0.0;
        for (int c = 0; c < axis_n; ++c) {
            const double e = std::exp(xp[static_cast<std::int64_t>(c) * inner] - mx);
            yp[static_cast<std::int64_t>(c) * inner] = e;
            sum += e;
        }
        const double invsum = 1.0 / sum;
        for (int c = 0; c < axis_n; ++c) yp[static_cast<std::int64_t>(c) * inner] *= invsum;
    }
}

void softmax_backward(const double* grad_y, const double* y, double* grad_x, std::int64_t outer, int axis_n,
                      std::int64_t inner) {
    const std::int64_t lanes = outer * inner;
#pragma omp parallel for schedule(static) if (lanes > 64)
    for (std::int64_t t = 0; t < lanes; ++t) {
        const std::int64_t o = t / inner;
        const std::int64_t i = t % inner;
        const double* gyp = grad_y + o * axis_n * inner + i;
        const double* yp = y + o * axis_n * inner + i;
        double* gxp = grad_x + o * axis_n * inner + i;
        double dot = 0.0;
        for (int c = 0; c < axis_n; ++c)
            dot += gyp[static_cast<std::int64_t>(c) * inner] * yp[static_cast<std::int64_t>(c) * inner];
        for (int c = 0; c < axis_n; ++c) {
            const std::int64_t k = static_cast<std::int64_t>(c) * inner;
            gxp[k] += yp[k] * (gyp[k] - dot);
        }
    }
}

void relu_forward(const double* x, double* y, std::int64_t n) {
#pragma omp parallel for schedule(static) if (n > 4096)
    for (std::int64_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_backward(const double* grad_y, const double* x, double* grad_x, std::int64_t n) {
#pragma omp parallel for schedule(static) if (n > 4096)
    for (std::int64_t i = 0; i < n; ++i) grad_x[i] += x[i] > 0.0 ? grad_y[i] : 0.0;
}

void matmul_forward(const double* a, const double* b, double* y, int m, int k, int n) {
#pragma omp parallel for schedule(static) if (m > 1)
    for (int i = 0; i < m; ++i) {
        double* yrow = y + static_cast<std::int64_t>(i) * n;
        std::fill(yrow, yrow + n, 0.0);
        for (int kk = 0; kk < k; ++kk) {
            const double av = a[static_cast<std::int64_t>(i) * k + kk];
            const double* brow = b + static_cast<std::int64_t>(kk) * n;
            for (int j = 0; j < n; ++j) yrow[j] += av * brow[j];
        }
    }
}

void matmul_backward_a(const double* grad_y, const double* b, double* grad_a, int m, int k, int n) {
#pragma omp parallel for schedule(static) if (m > 1)
    for (int i = 0; i < m; ++i) {
        const double* gyrow = grad_y + static_cast<std::int64_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const double* brow = b + static_cast<std::int64_t>(kk) * n;
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += gyrow[j] * brow[j];
            grad_a[static_cast<std::int64_t>(i) * k + kk] += acc;
        }
    }
}

void matmul_backward_b(const double* grad_y, const double* a, double* grad_b, int m, int k, int n) {
#pragma omp parallel for schedule(static) if (k > 1)
    for (int kk = 0; kk < k; ++kk) {
        double* gbrow = grad_b + static_cast<std::int64_t>(kk) * n;
        for (int i = 0; i < m; ++i) {
            const double av = a[static_cast<std::int64_t>(i) * k + kk];
            const double* gyrow = grad_y + static_cast<std::int64_t>(i) * n;
            for (int j = 0; j < n; ++j) gbrow[j] += av * gyrow[j];
        }
    }
}

}  // namespace pseg::kernels
