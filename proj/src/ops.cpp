#include "pseg/ops.hpp"

#include <algorithm>
#include <cmath>

#include "pseg/kernels.hpp"

namespace pseg::ops {

namespace {

bool wants_grad(const std::shared_ptr<TensorNode>& n) { return n && n->tracked; }

// Wires the node into the graph when any parent is tracked.
void record(Tensor& out, std::vector<std::shared_ptr<TensorNode>> parents,
            std::function<void(TensorNode&)> backprop) {
    bool tracked = false;
    for (const auto& p : parents) tracked = tracked || wants_grad(p);
    if (!tracked) return;
    out.node->tracked = true;
    out.node->parents = std::move(parents);
    out.node->backprop = std::move(backprop);
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ShapeError(op, a.shape(), b.shape());
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape("add", a, b);
    Tensor y = Tensor::zeros(a.shape());
    for (std::int64_t i = 0; i < a.size(); ++i) y.data()[i] = a.data()[i] + b.data()[i];
    auto an = a.node, bn = b.node;
    record(y, {an, bn}, [an, bn](TensorNode& self) {
        for (auto& n : {an, bn}) {
            if (!wants_grad(n)) continue;
            n->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) n->grad[i] += self.grad[i];
        }
    });
    return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape("sub", a, b);
    Tensor y = Tensor::zeros(a.shape());
    for (std::int64_t i = 0; i < a.size(); ++i) y.data()[i] = a.data()[i] - b.data()[i];
    auto an = a.node, bn = b.node;
    record(y, {an, bn}, [an, bn](TensorNode& self) {
        if (wants_grad(an)) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        }
        if (wants_grad(bn)) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
        }
    });
    return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape("mul", a, b);
    Tensor y = Tensor::zeros(a.shape());
    for (std::int64_t i = 0; i < a.size(); ++i) y.data()[i] = a.data()[i] * b.data()[i];
    auto an = a.node, bn = b.node;
    record(y, {an, bn}, [an, bn](TensorNode& self) {
        if (wants_grad(an)) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * bn->values[i];
        }
        if (wants_grad(bn)) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i] * an->values[i];
        }
    });
    return y;
}

Tensor scale(const Tensor& a, double s) {
    Tensor y = Tensor::zeros(a.shape());
    for (std::int64_t i = 0; i < a.size(); ++i) y.data()[i] = a.data()[i] * s;
    auto an = a.node;
    record(y, {an}, [an, s](TensorNode& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * s;
    });
    return y;
}

Tensor add_scalar(const Tensor& a, double s) {
    Tensor y = Tensor::zeros(a.shape());
    for (std::int64_t i = 0; i < a.size(); ++i) y.data()[i] = a.data()[i] + s;
    auto an = a.node;
    record(y, {an}, [an](TensorNode& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    });
    return y;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) throw ShapeError("matmul", a.shape(), b.shape());
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor y = Tensor::zeros({m, n});
    kernels::matmul_forward(a.data(), b.data(), y.data(), m, k, n);
    auto an = a.node, bn = b.node;
    record(y, {an, bn}, [an, bn, m, k, n](TensorNode& self) {
        if (wants_grad(an)) {
            an->ensure_grad();
            kernels::matmul_backward_a(self.grad.data(), bn->values.data(), an->grad.data(), m, k, n);
        }
        if (wants_grad(bn)) {
            bn->ensure_grad();
            kernels::matmul_backward_b(self.grad.data(), an->values.data(), bn->grad.data(), m, k, n);
        }
    });
    return y;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
    if (x.ndim() != 4 || w.ndim() != 4 || x.dim(1) != w.dim(1)) throw ShapeError("conv2d", x.shape(), w.shape());
    if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != w.dim(0)))
        throw ShapeError("conv2d_bias", bias.shape(), {w.dim(0)});
    kernels::Conv2dDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3), stride, pad};
    if (d.h_out() <= 0 || d.w_out() <= 0) throw ShapeError("conv2d_output", x.shape(), w.shape());

    Tensor y = Tensor::zeros({d.n, d.c_out, d.h_out(), d.w_out()});
    kernels::conv2d_forward(x.data(), w.data(), bias.defined() ? bias.data() : nullptr, y.data(), d);

    auto xn = x.node, wn = w.node, bn = bias.defined() ? bias.node : nullptr;
    std::vector<std::shared_ptr<TensorNode>> parents{xn, wn};
    if (bn) parents.push_back(bn);
    record(y, std::move(parents), [xn, wn, bn, d](TensorNode& self) {
        if (wants_grad(xn)) {
            xn->ensure_grad();
            kernels::conv2d_backward_input(self.grad.data(), wn->values.data(), xn->grad.data(), d);
        }
        const bool gw = wants_grad(wn);
        const bool gb = bn && wants_grad(bn);
        if (gw || gb) {
            if (gw) wn->ensure_grad();
            if (gb) bn->ensure_grad();
            kernels::conv2d_backward_weight(self.grad.data(), xn->values.data(), gw ? wn->grad.data() : nullptr,
                                            gb ? bn->grad.data() : nullptr, d);
        }
    });
    return y;
}

Tensor relu(const Tensor& x) {
    Tensor y = Tensor::zeros(x.shape());
    kernels::relu_forward(x.data(), y.data(), x.size());
    auto xn = x.node;
    record(y, {xn}, [xn](TensorNode& self) {
        xn->ensure_grad();
        kernels::relu_backward(self.grad.data(), xn->values.data(), xn->grad.data(),
                               static_cast<std::int64_t>(self.values.size()));
    });
    return y;
}

Tensor resize_bilinear(const Tensor& x, int out_h, int out_w) {
    if (x.ndim() != 4 || out_h < 1 || out_w < 1) throw ShapeError("resize_bilinear", x.shape(), {out_h, out_w});
    kernels::ResizeDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), out_h, out_w};
    Tensor y = Tensor::zeros({d.n, d.c, out_h, out_w});
    kernels::resize_bilinear_forward(x.data(), y.data(), d);
    auto xn = x.node;
    record(y, {xn}, [xn, d](TensorNode& self) {
        xn->ensure_grad();
        kernels::resize_bilinear_backward(self.grad.data(), xn->grad.data(), d);
    });
    return y;
}

Tensor softmax(const Tensor& x, int axis) {
    if (axis < 0 || axis >= x.ndim()) throw ShapeError("softmax_axis", x.shape(), {axis});
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < x.ndim(); ++i) inner *= x.dim(i);
    const int axis_n = x.dim(axis);

    Tensor y = Tensor::zeros(x.shape());
    kernels::softmax_forward(x.data(), y.data(), outer, axis_n, inner);
    auto xn = x.node;
    auto yn = y.node;
    record(y, {xn}, [xn, yn, outer, axis_n, inner](TensorNode& self) {
        xn->ensure_grad();
        kernels::softmax_backward(self.grad.data(), yn->values.data(), xn->grad.data(), outer, axis_n, inner);
    });
    return y;
}

Tensor log(const Tensor& x) {
    Tensor y = Tensor::zeros(x.shape());
    for (std::int64_t i = 0; i < x.size(); ++i) y.data()[i] = std::log(x.data()[i]);
    auto xn = x.node;
    record(y, {xn}, [xn](TensorNode& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i] / xn->values[i];
    });
    return y;
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < x.size(); ++i) acc += x.data()[i];
    Tensor y = Tensor::scalar(acc);
    auto xn = x.node;
    record(y, {xn}, [xn](TensorNode& self) {
        xn->ensure_grad();
        const double g = self.grad[0];
        for (double& v : xn->grad) v += g;
    });
    return y;
}

Tensor mean(const Tensor& x) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < x.size(); ++i) acc += x.data()[i];
    const double inv = 1.0 / static_cast<double>(x.size());
    Tensor y = Tensor::scalar(acc * inv);
    auto xn = x.node;
    record(y, {xn}, [xn, inv](TensorNode& self) {
        xn->ensure_grad();
        const double g = self.grad[0] * inv;
        for (double& v : xn->grad) v += g;
    });
    return y;
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size()) throw ShapeError("cosine_similarity", a.shape(), b.shape());
    const std::int64_t n = a.size();
    double dot = 0.0, na2 = 0.0, nb2 = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        dot += a.data()[i] * b.data()[i];
        na2 += a.data()[i] * a.data()[i];
        nb2 += b.data()[i] * b.data()[i];
    }
    const double na = std::sqrt(na2), nb = std::sqrt(nb2);
    const bool degenerate = (na == 0.0 || nb == 0.0);
    const double cos = degenerate ? 0.0 : dot / (na * nb);
    Tensor y = Tensor::scalar(cos);
    auto an = a.node, bn = b.node;
    record(y, {an, bn}, [an, bn, na, nb, cos, degenerate, n](TensorNode& self) {
        if (degenerate) return;
        const double g = self.grad[0];
        if (wants_grad(an)) {
            an->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i)
                an->grad[i] += g * (bn->values[i] / (na * nb) - cos * an->values[i] / (na * na));
        }
        if (wants_grad(bn)) {
            bn->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i)
                bn->grad[i] += g * (an->values[i] / (na * nb) - cos * bn->values[i] / (nb * nb));
        }
    });
    return y;
}

Tensor linear_logits(const Tensor& fmap, const Tensor& w) {
    if (fmap.ndim() != 4 || w.ndim() != 2 || fmap.dim(1) != w.dim(1))
        throw ShapeError("linear_logits", fmap.shape(), w.shape());
    const int n = fmap.dim(0), dfeat = fmap.dim(1), h = fmap.dim(2), ww = fmap.dim(3);
    const int classes = w.dim(0);
    const std::int64_t pixels = static_cast<std::int64_t>(h) * ww;

    Tensor y = Tensor::zeros({n, classes, h, ww});
    kernels::linear_logits_forward(fmap.data(), w.data(), y.data(), n, dfeat, classes, pixels);
    auto fn = fmap.node, wn = w.node;
    record(y, {fn, wn}, [fn, wn, n, dfeat, classes, pixels](TensorNode& self) {
        if (wants_grad(fn)) {
            fn->ensure_grad();
            kernels::linear_logits_backward_fmap(self.grad.data(), wn->values.data(), fn->grad.data(), n, dfeat,
                                                 classes, pixels);
        }
        if (wants_grad(wn)) {
            wn->ensure_grad();
            kernels::linear_logits_backward_weight(self.grad.data(), fn->values.data(), wn->grad.data(), n, dfeat,
                                                   classes, pixels);
        }
    });
    return y;
}

Tensor proto_scores(const Tensor& fmap, const Tensor& protos, const std::vector<int>& class_of, int classes,
                    std::int64_t* zero_norm_count) {
    if (fmap.ndim() != 4 || protos.ndim() != 2 || fmap.dim(1) != protos.dim(1))
        throw ShapeError("proto_scores", fmap.shape(), protos.shape());
    if (static_cast<int>(class_of.size()) != protos.dim(0))
        throw ShapeError("proto_scores_tags", {static_cast<int>(class_of.size())}, {protos.dim(0)});
    if (fmap.dim(1) > kernels::kMaxFeatureDim)
        throw ShapeError("proto_scores_dim", fmap.shape(), {kernels::kMaxFeatureDim});
    const int n = fmap.dim(0), dfeat = fmap.dim(1), h = fmap.dim(2), w = fmap.dim(3);
    const int n_protos = protos.dim(0);
    const std::int64_t pixels = static_cast<std::int64_t>(h) * w;

    Tensor y = Tensor::zeros({n, classes, h, w});
    auto argmax = std::make_shared<std::vector<int>>(static_cast<std::size_t>(y.size()));
    kernels::proto_scores_forward(fmap.data(), protos.data(), class_of.data(), n_protos, y.data(), argmax->data(),
                                  zero_norm_count, n, dfeat, classes, pixels);

    // prototypes are non-learnable: gradient flows into fmap only
    auto fn = fmap.node, pn = protos.node;
    record(y, {fn}, [fn, pn, argmax, n_protos, n, dfeat, classes, pixels](TensorNode& self) {
        fn->ensure_grad();
        kernels::proto_scores_backward(self.grad.data(), fn->values.data(), pn->values.data(), n_protos,
                                       argmax->data(), fn->grad.data(), n, dfeat, classes, pixels);
    });
    return y;
}

Tensor cross_entropy(const Tensor& prob, const std::vector<std::uint8_t>& labels,
                     const std::vector<std::uint8_t>& mask, CeNorm norm) {
    if (prob.ndim() != 4) throw ShapeError("cross_entropy", prob.shape(), {-1, -1, -1, -1});
    const int n = prob.dim(0), classes = prob.dim(1), h = prob.dim(2), w = prob.dim(3);
    const std::int64_t pixels = static_cast<std::int64_t>(h) * w;
    const std::int64_t total = static_cast<std::int64_t>(n) * pixels;
    if (static_cast<std::int64_t>(labels.size()) != total)
        throw ShapeError("cross_entropy_labels", prob.shape(), {static_cast<int>(labels.size())});
    if (!mask.empty() && static_cast<std::int64_t>(mask.size()) != total)
        throw ShapeError("cross_entropy_mask", prob.shape(), {static_cast<int>(mask.size())});

    std::int64_t counted = 0;
    double acc = 0.0;
    for (std::int64_t t = 0; t < total; ++t) {
        if (!mask.empty() && !mask[static_cast<std::size_t>(t)]) continue;
        const std::int64_t ni = t / pixels, p = t % pixels;
        const int c = labels[static_cast<std::size_t>(t)];
        const double pv = prob.data()[(ni * classes + c) * pixels + p];
        acc += -std::log(std::clamp(pv, kProbClampLo, kProbClampHi));
        ++counted;
    }
    const double denom = (norm == CeNorm::MeanAll) ? static_cast<double>(total)
                                                   : static_cast<double>(std::max<std::int64_t>(1, counted));
    Tensor y = Tensor::scalar(acc / denom);

    auto pnode = prob.node;
    auto lab = std::make_shared<std::vector<std::uint8_t>>(labels);
    auto msk = std::make_shared<std::vector<std::uint8_t>>(mask);
    record(y, {pnode}, [pnode, lab, msk, denom, n, classes, pixels](TensorNode& self) {
        pnode->ensure_grad();
        const double g = self.grad[0] / denom;
        const std::int64_t total = static_cast<std::int64_t>(n) * pixels;
        for (std::int64_t t = 0; t < total; ++t) {
            if (!msk->empty() && !(*msk)[static_cast<std::size_t>(t)]) continue;
            const std::int64_t ni = t / pixels, p = t % pixels;
            const int c = (*lab)[static_cast<std::size_t>(t)];
            const std::int64_t k = (ni * classes + c) * pixels + p;
            const double pv = pnode->values[static_cast<std::size_t>(k)];
            // clamp has zero slope outside its range
            if (pv < kProbClampLo || pv > kProbClampHi) continue;
            pnode->grad[static_cast<std::size_t>(k)] += -g / pv;
        }
    });
    return y;
}

}  // namespace pseg::ops
