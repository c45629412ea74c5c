#pragma once

#include <functional>
#include <memory>
#include <span>

#include "pseg/base.hpp"

namespace pseg {

// One node of the reverse-mode graph. Ops allocate a node per output, record
// parents and a backprop closure, and backward() replays the closures in
// reverse topological order.
struct TensorNode {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty until first needed
    bool requires_grad = false;  // set on leaves only
    bool tracked = false;        // true if this node can reach a requires_grad leaf
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backprop;  // null on leaves

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    }
};

// Value-semantic handle to a shared graph node.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return make(std::move(shape), {}, requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (double& v : t.node->values) v = value;
        return t;
    }

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (numel(shape) != static_cast<std::int64_t>(values.size()))
            throw ShapeError("tensor_from", shape, {static_cast<int>(values.size())});
        Tensor t;
        t.node = std::make_shared<TensorNode>();
        t.node->shape = std::move(shape);
        t.node->values = std::move(values);
        t.node->requires_grad = requires_grad;
        t.node->tracked = requires_grad;
        return t;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    bool defined() const { return node != nullptr; }
    const Shape& shape() const { return node->shape; }
    int ndim() const { return static_cast<int>(node->shape.size()); }
    int dim(int i) const { return node->shape[static_cast<std::size_t>(i)]; }
    std::int64_t size() const { return static_cast<std::int64_t>(node->values.size()); }

    std::span<double> values() { return node->values; }
    std::span<const double> values() const { return node->values; }
    double* data() { return node->values.data(); }
    const double* data() const { return node->values.data(); }

    bool requires_grad() const { return node->requires_grad; }
    bool tracked() const { return node->tracked; }
    bool has_grad() const { return !node->grad.empty(); }
    std::span<const double> grad() const { return node->grad; }
    std::span<double> grad() { return node->grad; }

    double item() const {
        if (size() != 1) throw ShapeError("item", shape(), {1});
        return node->values[0];
    }

    void zero_grad() {
        if (!node->grad.empty()) std::fill(node->grad.begin(), node->grad.end(), 0.0);
    }

    // Copy of the values with no graph history.
    Tensor detach() const {
        Tensor t;
        t.node = std::make_shared<TensorNode>();
        t.node->shape = node->shape;
        t.node->values = node->values;
        return t;
    }

    std::uint64_t checksum() const { return fnv1a(node->values); }

    std::shared_ptr<TensorNode> node;

private:
    static Tensor make(Shape shape, std::vector<double> values, bool requires_grad) {
        Tensor t;
        t.node = std::make_shared<TensorNode>();
        const auto n = static_cast<std::size_t>(numel(shape));
        t.node->shape = std::move(shape);
        if (values.empty())
            t.node->values.assign(n, 0.0);
        else
            t.node->values = std::move(values);
        t.node->requires_grad = requires_grad;
        t.node->tracked = requires_grad;
        return t;
    }
};

// Runs reverse-mode accumulation from a scalar loss. Gradients of
// requires_grad leaves accumulate across calls; intermediate node gradients
// are reset per call. A loss with no tracked ancestors is a no-op.
void backward(const Tensor& scalar_loss);

}  // namespace pseg
