#include "pseg/tensor.hpp"

#include <unordered_set>

namespace pseg {

void backward(const Tensor& scalar_loss) {
    if (!scalar_loss.defined() || scalar_loss.size() != 1)
        throw ShapeError("backward", scalar_loss.defined() ? scalar_loss.shape() : Shape{}, {1});
    if (!scalar_loss.node->tracked) return;  // detached from every leaf

    // iterative post-order DFS over parent edges; reverse post-order then
    // runs every consumer before its producers
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    std::vector<std::pair<TensorNode*, std::size_t>> stack;
    stack.emplace_back(scalar_loss.node.get(), 0);
    seen.insert(scalar_loss.node.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorNode* p = node->parents[next++].get();
            if (p->tracked && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    // interior gradients are per-call scratch; leaf gradients accumulate
    for (TensorNode* n : order) {
        if (n->backprop) {
            n->ensure_grad();
            std::fill(n->grad.begin(), n->grad.end(), 0.0);
        }
    }
    scalar_loss.node->ensure_grad();
    scalar_loss.node->grad[0] += 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backprop) n->backprop(*n);
    }
}

}  // namespace pseg
