#include "pseg/model.hpp"

#include <cmath>

#include "pseg/protobank.hpp"

namespace pseg {

namespace {

Tensor he_init(Shape shape, int fan_in, Rng& rng, bool requires_grad) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    const double std = std::sqrt(2.0 / fan_in);
    for (double& v : t.values()) v = rng.normal(0.0, std);
    return t;
}

}  // namespace

Model Model::init(const ModelConfig& cfg, Rng& rng, bool requires_grad) {
    Model m;
    m.cfg = cfg;
    m.conv1_w = he_init({cfg.c1, 3, 3, 3}, 3 * 9, rng, requires_grad);
    m.conv1_b = Tensor::zeros({cfg.c1}, requires_grad);
    m.conv2_w = he_init({cfg.c2, cfg.c1, 3, 3}, cfg.c1 * 9, rng, requires_grad);
    m.conv2_b = Tensor::zeros({cfg.c2}, requires_grad);
    m.conv3_w = he_init({cfg.c3, cfg.c2, 3, 3}, cfg.c2 * 9, rng, requires_grad);
    m.conv3_b = Tensor::zeros({cfg.c3}, requires_grad);
    m.proj_w = he_init({cfg.feature_dim, cfg.c3, 1, 1}, cfg.c3, rng, requires_grad);
    m.proj_b = Tensor::zeros({cfg.feature_dim}, requires_grad);
    m.head_w = he_init({cfg.classes, cfg.feature_dim}, cfg.feature_dim, rng, requires_grad);
    return m;
}

Model Model::clone(bool requires_grad) const {
    Model m;
    m.cfg = cfg;
    auto copy = [requires_grad](const Tensor& t) {
        Tensor c = t.detach();
        c.node->requires_grad = requires_grad;
        c.node->tracked = requires_grad;
        return c;
    };
    m.conv1_w = copy(conv1_w);
    m.conv1_b = copy(conv1_b);
    m.conv2_w = copy(conv2_w);
    m.conv2_b = copy(conv2_b);
    m.conv3_w = copy(conv3_w);
    m.conv3_b = copy(conv3_b);
    m.proj_w = copy(proj_w);
    m.proj_b = copy(proj_b);
    m.head_w = copy(head_w);
    return m;
}

std::vector<Tensor> Model::params() const {
    return {conv1_w, conv1_b, conv2_w, conv2_b, conv3_w, conv3_b, proj_w, proj_b, head_w};
}

std::vector<std::pair<std::string, Tensor>> Model::named_params() const {
    return {{"conv1.w", conv1_w}, {"conv1.b", conv1_b}, {"conv2.w", conv2_w},
            {"conv2.b", conv2_b}, {"conv3.w", conv3_w}, {"conv3.b", conv3_b},
            {"proj.w", proj_w},   {"proj.b", proj_b},   {"head.w", head_w}};
}

Tensor Model::features(const Tensor& image) const {
    if (image.ndim() != 4 || image.dim(1) != 3) throw ShapeError("features", image.shape(), {-1, 3, -1, -1});
    const int h = image.dim(2), w = image.dim(3);
    Tensor x = ops::relu(ops::conv2d(image, conv1_w, conv1_b, 1, 1));
    x = ops::relu(ops::conv2d(x, conv2_w, conv2_b, 2, 1));
    x = ops::relu(ops::conv2d(x, conv3_w, conv3_b, 1, 1));
    x = ops::resize_bilinear(x, h, w);
    return ops::conv2d(x, proj_w, proj_b, 1, 0);
}

void Model::zero_grads() const {
    for (const Tensor& t : params()) const_cast<Tensor&>(t).zero_grad();
}

std::uint64_t Model::checksum() const {
    std::uint64_t h = 0x9e3779b97f4a7c15ULL;
    for (const Tensor& t : params()) h = splitmix64(h ^ t.checksum());
    return h;
}

Tensor linear_posterior(const Model& m, const Tensor& fmap) {
    return ops::softmax(ops::linear_logits(fmap, m.head_w), 1);
}

Tensor prototype_posterior(const PrototypeBank& bank, const Tensor& fmap, double t, std::int64_t* zero_norm_count) {
    if (t <= 0.0) throw std::invalid_argument("prototype_posterior: temperature must be positive");
    Tensor scores = ops::proto_scores(fmap, bank.prototypes, bank.class_of, bank.classes, zero_norm_count);
    return ops::softmax(ops::scale(scores, 1.0 / t), 1);
}

void ema_update_teacher(TeacherState& teacher, const Model& student) {
    const double m = teacher.ema_momentum;
    auto tp = teacher.model.params();
    auto sp = student.params();
    for (std::size_t i = 0; i < tp.size(); ++i) {
        if (tp[i].shape() != sp[i].shape()) throw ShapeError("ema_update", tp[i].shape(), sp[i].shape());
        double* t = tp[i].data();
        const double* s = sp[i].data();
        for (std::int64_t k = 0; k < tp[i].size(); ++k) t[k] = m * t[k] + (1.0 - m) * s[k];
    }
}

}  // namespace pseg
