#include "pseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "pseg/checkpoint.hpp"

namespace pseg {

Variant variant_from_string(const std::string& s) {
    if (s == "supervised_only") return Variant::SupervisedOnly;
    if (s == "linear_only") return Variant::LinearOnly;
    if (s == "proto_only") return Variant::ProtoOnly;
    if (s == "no_proto_update") return Variant::NoProtoUpdate;
    if (s == "full") return Variant::Full;
    throw std::invalid_argument("variant: unknown value '" + s + "'");
}

std::string to_string(Variant v) {
    switch (v) {
        case Variant::SupervisedOnly: return "supervised_only";
        case Variant::LinearOnly: return "linear_only";
        case Variant::ProtoOnly: return "proto_only";
        case Variant::NoProtoUpdate: return "no_proto_update";
        case Variant::Full: return "full";
    }
    return "full";
}

VariantFlags flags_for(Variant v) {
    VariantFlags f;
    switch (v) {
        case Variant::SupervisedOnly:
            f.use_linear_loss = true;
            break;
        case Variant::LinearOnly:
            f.use_unlabeled = true;
            f.use_linear_loss = true;
            break;
        case Variant::ProtoOnly:
            f.use_unlabeled = true;
            f.use_proto_loss = true;
            f.use_bank = true;
            f.update_bank = true;
            f.pseudo_source = PseudoSource::Proto;
            break;
        case Variant::NoProtoUpdate:
            f.use_unlabeled = true;
            f.use_linear_loss = true;
            f.use_proto_loss = true;
            f.use_bank = true;
            break;
        case Variant::Full:
            f.use_unlabeled = true;
            f.use_linear_loss = true;
            f.use_proto_loss = true;
            f.use_bank = true;
            f.update_bank = true;
            break;
    }
    return f;
}

void validate(const TrainConfig& cfg) {
    if (!(cfg.tau > 0.0) || cfg.tau > 1.0) throw std::invalid_argument("train.tau must be in (0, 1]");
    if (!(cfg.temperature > 0.0)) throw std::invalid_argument("train.temperature must be positive");
    if (cfg.proto_alpha < 0.0 || cfg.proto_alpha > 1.0)
        throw std::invalid_argument("train.proto_alpha must be in [0, 1]");
    if (cfg.prototypes_per_class < 1) throw std::invalid_argument("train.prototypes_per_class must be at least 1");
    if (cfg.pixels_per_class < 1) throw std::invalid_argument("train.pixels_per_class must be at least 1");
    if (cfg.batch_labeled < 1) throw std::invalid_argument("train.batch_labeled must be at least 1");
    if (cfg.batch_unlabeled < 1) throw std::invalid_argument("train.batch_unlabeled must be at least 1");
    if (cfg.epochs < 0) throw std::invalid_argument("train.epochs must be non-negative");
    if (cfg.warmup_epochs < 1) throw std::invalid_argument("train.warmup_epochs must be at least 1");
    if (cfg.lambda_u < 0.0) throw std::invalid_argument("train.lambda_u must be non-negative");
    if (cfg.ema_momentum < 0.0 || cfg.ema_momentum > 1.0)
        throw std::invalid_argument("train.ema_momentum must be in [0, 1]");
    if (!(cfg.base_lr > 0.0)) throw std::invalid_argument("train.base_lr must be positive");
    if (cfg.weight_decay < 0.0) throw std::invalid_argument("train.weight_decay must be non-negative");
    if (cfg.momentum < 0.0 || cfg.momentum >= 1.0) throw std::invalid_argument("train.momentum must be in [0, 1)");
    if (!(cfg.poly_power > 0.0)) throw std::invalid_argument("train.poly_power must be positive");
    if (cfg.feature_dim < 1 || cfg.feature_dim > 64)
        throw std::invalid_argument("train.feature_dim must be in [1, 64]");
}

Tensor stack_images(const std::vector<SegSample>& samples) {
    if (samples.empty()) throw std::invalid_argument("stack_images: empty batch");
    const int h = samples[0].height, w = samples[0].width;
    Tensor t = Tensor::zeros({static_cast<int>(samples.size()), 3, h, w});
    const std::int64_t per = static_cast<std::int64_t>(3) * h * w;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].height != h || samples[i].width != w)
            throw ShapeError("stack_images", {h, w}, {samples[i].height, samples[i].width});
        std::copy(samples[i].image.begin(), samples[i].image.end(), t.data() + static_cast<std::int64_t>(i) * per);
    }
    return t;
}

std::vector<std::uint8_t> stack_labels(const std::vector<SegSample>& samples) {
    std::vector<std::uint8_t> out;
    for (const auto& s : samples) out.insert(out.end(), s.label.begin(), s.label.end());
    return out;
}

namespace {

std::vector<PseudoLabelMap> posteriors_to_pseudo(const Tensor& post, double tau) {
    const int n = post.dim(0), classes = post.dim(1), h = post.dim(2), w = post.dim(3);
    const std::int64_t pixels = static_cast<std::int64_t>(h) * w;
    std::vector<PseudoLabelMap> maps(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        PseudoLabelMap& m = maps[static_cast<std::size_t>(i)];
        m.h = h;
        m.w = w;
        m.labels.resize(static_cast<std::size_t>(pixels));
        m.confidence.resize(static_cast<std::size_t>(pixels));
        m.valid.resize(static_cast<std::size_t>(pixels));
        const double* base = post.data() + static_cast<std::int64_t>(i) * classes * pixels;
        for (std::int64_t p = 0; p < pixels; ++p) {
            int best = 0;
            double best_v = base[p];
            for (int c = 1; c < classes; ++c) {
                const double v = base[static_cast<std::int64_t>(c) * pixels + p];
                if (v > best_v) {
                    best_v = v;
                    best = c;
                }
            }
            m.labels[static_cast<std::size_t>(p)] = static_cast<std::uint8_t>(best);
            m.confidence[static_cast<std::size_t>(p)] = best_v;
            m.valid[static_cast<std::size_t>(p)] = best_v >= tau ? 1 : 0;
        }
    }
    return maps;
}

// pixel-major copy of a feature map: [n,d,h,w] -> rows of d values per pixel
std::vector<double> pixel_major(const Tensor& fmap) {
    const int n = fmap.dim(0), d = fmap.dim(1);
    const std::int64_t pixels = static_cast<std::int64_t>(fmap.dim(2)) * fmap.dim(3);
    std::vector<double> out(static_cast<std::size_t>(n) * pixels * d);
    for (int i = 0; i < n; ++i)
        for (int dd = 0; dd < d; ++dd) {
            const double* src = fmap.data() + (static_cast<std::int64_t>(i) * d + dd) * pixels;
            double* dst = out.data() + static_cast<std::int64_t>(i) * pixels * d + dd;
            for (std::int64_t p = 0; p < pixels; ++p) dst[static_cast<std::int64_t>(p) * d] = src[p];
        }
    return out;
}

}  // namespace

std::vector<PseudoLabelMap> pseudo_label(const Model& teacher, const Tensor& images, double tau) {
    Tensor fmap = teacher.features(images);
    Tensor post = linear_posterior(teacher, fmap);
    return posteriors_to_pseudo(post, tau);
}

std::vector<PseudoLabelMap> pseudo_label_proto(const Model& teacher, const PrototypeBank& bank, double temperature,
                                               const Tensor& images, double tau) {
    Tensor fmap = teacher.features(images);
    Tensor post = prototype_posterior(bank, fmap, temperature);
    return posteriors_to_pseudo(post, tau);
}

Tensor labeled_loss(const Model& student, const PrototypeBank* bank, const Tensor& images,
                    const std::vector<std::uint8_t>& labels, const TrainConfig& cfg, const VariantFlags& flags,
                    Tensor* fmap_out, double* linear_part, double* proto_part, std::int64_t* zero_norm) {
    Tensor fmap = student.features(images);
    if (fmap_out) *fmap_out = fmap;

    Tensor total;
    if (flags.use_linear_loss) {
        Tensor ce = ops::cross_entropy(linear_posterior(student, fmap), labels, {}, ops::CeNorm::MeanAll);
        if (linear_part) *linear_part = ce.item();
        total = ce;
    }
    if (flags.use_proto_loss) {
        if (!bank) throw std::invalid_argument("labeled_loss: prototype loss enabled without a bank");
        Tensor post = prototype_posterior(*bank, fmap, cfg.temperature, zero_norm);
        Tensor ce = ops::cross_entropy(post, labels, {}, ops::CeNorm::MeanAll);
        if (proto_part) *proto_part = ce.item();
        total = total.defined() ? ops::add(total, ce) : ce;
    }
    if (!total.defined()) throw std::invalid_argument("labeled_loss: no loss head enabled");
    return total;
}

Tensor unlabeled_loss(const Model& student, const PrototypeBank* bank, const Tensor& mixed_images,
                      const std::vector<std::uint8_t>& mixed_labels, const std::vector<std::uint8_t>& mixed_valid,
                      const TrainConfig& cfg, const VariantFlags& flags, Tensor* fmap_out, double* linear_part,
                      double* proto_part, std::int64_t* zero_norm) {
    Tensor fmap = student.features(mixed_images);
    if (fmap_out) *fmap_out = fmap;

    Tensor total;
    if (flags.use_linear_loss) {
        Tensor ce = ops::cross_entropy(linear_posterior(student, fmap), mixed_labels, mixed_valid,
                                       ops::CeNorm::MaskedMean);
        if (linear_part) *linear_part = ce.item();
        total = ce;
    }
    if (flags.use_proto_loss) {
        if (!bank) throw std::invalid_argument("unlabeled_loss: prototype loss enabled without a bank");
        Tensor post = prototype_posterior(*bank, fmap, cfg.temperature, zero_norm);
        Tensor ce = ops::cross_entropy(post, mixed_labels, mixed_valid, ops::CeNorm::MaskedMean);
        if (proto_part) *proto_part = ce.item();
        total = total.defined() ? ops::add(total, ce) : ce;
    }
    if (!total.defined()) throw std::invalid_argument("unlabeled_loss: no loss head enabled");
    return total;
}

EvalResult evaluate(const Model& model, const PrototypeBank* bank, const DatasetSpec& spec,
                    const std::vector<std::int64_t>& ids, const TrainConfig& cfg, std::uint64_t sample_seed) {
    ConfusionMatrix cm_linear(spec.classes);
    ConfusionMatrix cm_proto(spec.classes);

    const int max_per_class = 2000;
    const int d = model.cfg.feature_dim;
    std::vector<std::vector<double>> class_feats(static_cast<std::size_t>(spec.classes));
    std::vector<std::int64_t> seen(static_cast<std::size_t>(spec.classes), 0);
    std::vector<Rng> samplers;
    for (int c = 0; c < spec.classes; ++c)
        samplers.emplace_back(mix_seed(sample_seed, 0xD15CULL, static_cast<std::uint64_t>(c)));

    std::uint64_t pq_valid = 0, pq_correct = 0, pq_total = 0;

    const std::size_t chunk = 8;
    for (std::size_t at = 0; at < ids.size(); at += chunk) {
        std::vector<SegSample> samples;
        for (std::size_t i = at; i < std::min(ids.size(), at + chunk); ++i)
            samples.push_back(generate(spec, ids[i]));
        Tensor images = stack_images(samples);
        Tensor fmap = model.features(images);
        const std::int64_t pixels = static_cast<std::int64_t>(fmap.dim(2)) * fmap.dim(3);
        const std::vector<std::uint8_t> truth = stack_labels(samples);

        Tensor post_lin = linear_posterior(model, fmap);
        auto pseudo = posteriors_to_pseudo(post_lin, cfg.tau);
        for (std::size_t i = 0; i < samples.size(); ++i) {
            const auto& m = pseudo[i];
            const std::uint8_t* t = truth.data() + static_cast<std::int64_t>(i) * pixels;
            for (std::int64_t p = 0; p < pixels; ++p) {
                cm_linear.add(t[p], m.labels[static_cast<std::size_t>(p)]);
                ++pq_total;
                if (m.valid[static_cast<std::size_t>(p)]) {
                    ++pq_valid;
                    if (m.labels[static_cast<std::size_t>(p)] == t[p]) ++pq_correct;
                }
            }
        }

        if (bank) {
            Tensor post_proto = prototype_posterior(*bank, fmap, cfg.temperature);
            auto pred = posteriors_to_pseudo(post_proto, 0.0);
            for (std::size_t i = 0; i < samples.size(); ++i) {
                const std::uint8_t* t = truth.data() + static_cast<std::int64_t>(i) * pixels;
                for (std::int64_t p = 0; p < pixels; ++p)
                    cm_proto.add(t[p], pred[i].labels[static_cast<std::size_t>(p)]);
            }
        }

        // reservoir-sample per-class pixel features for the discrimination stats
        const std::vector<double> pm = pixel_major(fmap);
        for (std::size_t i = 0; i < samples.size(); ++i) {
            const std::uint8_t* t = truth.data() + static_cast<std::int64_t>(i) * pixels;
            for (std::int64_t p = 0; p < pixels; ++p) {
                const int c = t[p];
                auto& feats = class_feats[static_cast<std::size_t>(c)];
                auto& cnt = seen[static_cast<std::size_t>(c)];
                std::int64_t slot = -1;
                if (cnt < max_per_class) {
                    feats.resize(feats.size() + static_cast<std::size_t>(d));
                    slot = cnt;
                } else {
                    const std::int64_t r = samplers[static_cast<std::size_t>(c)].uniform_int(0, cnt);
                    if (r < max_per_class) slot = r;
                }
                ++cnt;
                if (slot < 0) continue;
                const double* src = pm.data() + (static_cast<std::int64_t>(i) * pixels + p) * d;
                std::copy_n(src, d, feats.data() + slot * d);
            }
        }
    }

    EvalResult res;
    res.miou_linear = miou(cm_linear);
    res.miou_proto = bank ? miou(cm_proto) : std::numeric_limits<double>::quiet_NaN();

    std::vector<double> feats;
    std::vector<int> feat_class;
    for (int c = 0; c < spec.classes; ++c) {
        const auto& f = class_feats[static_cast<std::size_t>(c)];
        feats.insert(feats.end(), f.begin(), f.end());
        feat_class.insert(feat_class.end(), f.size() / static_cast<std::size_t>(d), c);
    }
    res.discrim = discrimination(feats, static_cast<int>(feat_class.size()), d, feat_class);

    res.pseudo_quality.coverage = pq_total ? static_cast<double>(pq_valid) / pq_total : 0.0;
    res.pseudo_quality.recall = pq_total ? static_cast<double>(pq_correct) / pq_total : 0.0;
    res.pseudo_quality.precision =
        pq_valid ? static_cast<double>(pq_correct) / pq_valid : std::numeric_limits<double>::quiet_NaN();
    return res;
}

Trainer::Trainer(DatasetSpec spec, TrainConfig cfg, Variant variant, std::uint64_t seed)
    : spec_(spec),
      cfg_(cfg),
      variant_(variant),
      flags_(flags_for(variant)),
      seed_(seed),
      rng_batch_(mix_seed(seed, 0xBA7CULL)),
      rng_aug_(mix_seed(seed, 0xA000ULL)),
      rng_cutmix_(mix_seed(seed, 0xC07ULL)) {
    pseg::validate(spec_);
    pseg::validate(cfg_);
    if (spec_.n_unlabeled < 1 && flags_.use_unlabeled)
        throw std::invalid_argument("trainer: variant needs unlabeled data but n_unlabeled is 0");

    for (std::int64_t id : split_ids(spec_, Split::Labeled)) labeled_.push_back(generate(spec_, id));
    for (std::int64_t id : split_ids(spec_, Split::Unlabeled)) unlabeled_.push_back(generate(spec_, id));
    val_ids_ = split_ids(spec_, Split::Val);

    Rng rng_init(mix_seed(seed, 0x1417ULL));
    ModelConfig mc;
    mc.classes = spec_.classes;
    mc.feature_dim = cfg_.feature_dim;
    state_.student = Model::init(mc, rng_init, true);
    state_.teacher = TeacherState{state_.student.clone(false), cfg_.ema_momentum};
    state_.variant = variant_;
    state_.cfg = cfg_;

    labeled_cycle_.resize(labeled_.size());
    std::iota(labeled_cycle_.begin(), labeled_cycle_.end(), 0);
    rng_batch_.shuffle(labeled_cycle_);
}

std::vector<SegSample> Trainer::take_labeled_batch() {
    std::vector<SegSample> batch;
    for (int i = 0; i < cfg_.batch_labeled; ++i) {
        if (labeled_pos_ >= labeled_cycle_.size()) {
            rng_batch_.shuffle(labeled_cycle_);
            labeled_pos_ = 0;
        }
        batch.push_back(labeled_[labeled_cycle_[labeled_pos_++]]);
    }
    return batch;
}

void Trainer::append_epoch_metrics(int epoch, double l_l, double l_u, double valid_frac, double pseudo_acc,
                                   const Model& eval_model) {
    const PrototypeBank* bank = state_.bank ? &*state_.bank : nullptr;
    EvalResult ev = evaluate(eval_model, bank, spec_, val_ids_, cfg_, mix_seed(seed_, 0xEFA1ULL));
    EpochMetrics m;
    m.epoch = epoch;
    m.l_l = l_l;
    m.l_u = l_u;
    m.val_miou_linear = ev.miou_linear;
    m.val_miou_proto = ev.miou_proto;
    m.valid_pixel_fraction = valid_frac;
    m.pseudo_label_accuracy = pseudo_acc;
    m.intra_var = ev.discrim.intra_trace;
    m.inter_var = ev.discrim.inter_trace;
    log_.push_back(m);
}

void Trainer::run_warmup() {
    if (labeled_.empty()) throw std::invalid_argument("warmup: empty labeled set");
    const int steps_per_epoch =
        static_cast<int>((labeled_.size() + cfg_.batch_labeled - 1) / static_cast<std::size_t>(cfg_.batch_labeled));
    const int total_epochs =
        variant_ == Variant::SupervisedOnly ? cfg_.warmup_epochs + cfg_.epochs : cfg_.warmup_epochs;

    sched_ = SgdConfig{cfg_.base_lr, cfg_.weight_decay, cfg_.momentum,
                       static_cast<std::int64_t>(total_epochs) * steps_per_epoch, cfg_.poly_power};
    state_.opt = SgdState{};
    state_.iter = 0;

    VariantFlags warm_flags;  // linear head only, regardless of variant
    warm_flags.use_linear_loss = true;

    auto params = state_.student.params();
    const double nan = std::numeric_limits<double>::quiet_NaN();
    for (int epoch = 0; epoch < total_epochs; ++epoch) {
        double loss_sum = 0.0;
        for (int s = 0; s < steps_per_epoch; ++s) {
            std::vector<SegSample> batch = take_labeled_batch();
            for (auto& b : batch) b = weak_augment(b, rng_aug_.next_u64());
            Tensor images = stack_images(batch);
            Tensor loss = labeled_loss(state_.student, nullptr, images, stack_labels(batch), cfg_, warm_flags);
            state_.student.zero_grads();
            backward(loss);
            sgd_step(params, state_.opt, sched_, state_.iter++);
            loss_sum += loss.item();
        }
        append_epoch_metrics(epochs_done_, loss_sum / steps_per_epoch, 0.0, 0.0, nan, state_.student);
        ++epochs_done_;
        if (on_epoch_) on_epoch_(epochs_done_ - 1, *this);
    }

    // the teacher starts as an exact copy of the warmed-up student
    state_.teacher = TeacherState{state_.student.clone(false), cfg_.ema_momentum};
}

void Trainer::init_prototypes() {
    if (!flags_.use_bank) return;
    state_.bank = init_bank(state_.student, spec_, labeled_, cfg_.prototypes_per_class, cfg_.pixels_per_class,
                            cfg_.proto_alpha, mix_seed(seed_, 0xBA9CULL));
}

Trainer::StepResult Trainer::semi_step(const std::vector<SegSample>& labeled,
                                       const std::vector<SegSample>& unlabeled) {
    const int h = spec_.height, w = spec_.width;
    const std::int64_t pixels = static_cast<std::int64_t>(h) * w;
    PrototypeBank* bank = state_.bank ? &*state_.bank : nullptr;

    // weak views; teacher and student share the same view of each unlabeled image
    std::vector<SegSample> weak_l = labeled;
    for (auto& s : weak_l) s = weak_augment(s, rng_aug_.next_u64());
    std::vector<SegSample> weak_u = unlabeled;
    for (auto& s : weak_u) s = weak_augment(s, rng_aug_.next_u64());

    // teacher pseudo-labels on the weak views
    Tensor images_u = stack_images(weak_u);
    std::vector<PseudoLabelMap> maps =
        flags_.pseudo_source == PseudoSource::Proto
            ? pseudo_label_proto(state_.teacher.model, *bank, cfg_.temperature, images_u, cfg_.tau)
            : pseudo_label(state_.teacher.model, images_u, cfg_.tau);

    // epoch diagnostics against the weak views' ground truth
    for (std::size_t i = 0; i < weak_u.size(); ++i) {
        for (std::int64_t p = 0; p < pixels; ++p) {
            ++epoch_pl_total_;
            if (maps[i].valid[static_cast<std::size_t>(p)]) {
                ++epoch_pl_valid_;
                if (maps[i].labels[static_cast<std::size_t>(p)] == weak_u[i].label[static_cast<std::size_t>(p)])
                    ++epoch_pl_correct_;
            }
        }
    }

    // CutMix: one rectangle mixes image, pseudo-labels, confidence, validity
    const int bu = static_cast<int>(weak_u.size());
    std::vector<CutMixPlan> plans = make_cutmix_plans(bu, h, w, rng_cutmix_);
    Tensor mixed_images = Tensor::zeros({bu, 3, h, w});
    std::vector<std::uint8_t> mixed_labels(static_cast<std::size_t>(bu) * pixels);
    std::vector<double> mixed_conf(static_cast<std::size_t>(bu) * pixels);
    std::vector<std::uint8_t> mixed_valid(static_cast<std::size_t>(bu) * pixels);
    for (int i = 0; i < bu; ++i) {
        const CutMixPlan& plan = plans[static_cast<std::size_t>(i)];
        validate_plan(plan, h, w, bu);
        const auto& ia = weak_u[static_cast<std::size_t>(plan.src_a)].image;
        const auto& ib = weak_u[static_cast<std::size_t>(plan.src_b)].image;
        mix_plane(plan, h, w, 3, ia.data(), ib.data(), mixed_images.data() + static_cast<std::int64_t>(i) * 3 * pixels);
        const auto& ma = maps[static_cast<std::size_t>(plan.src_a)];
        const auto& mb = maps[static_cast<std::size_t>(plan.src_b)];
        mix_plane(plan, h, w, ma.labels.data(), mb.labels.data(),
                  mixed_labels.data() + static_cast<std::int64_t>(i) * pixels);
        mix_plane(plan, h, w, 1, ma.confidence.data(), mb.confidence.data(),
                  mixed_conf.data() + static_cast<std::int64_t>(i) * pixels);
        mix_plane(plan, h, w, ma.valid.data(), mb.valid.data(),
                  mixed_valid.data() + static_cast<std::int64_t>(i) * pixels);
    }

    if (cfg_.indicator == IndicatorMode::Literal) {
        // literal reading: the gate re-evaluates teacher confidence on the mixed image
        Tensor fmap_t = state_.teacher.model.features(mixed_images);
        Tensor post = flags_.pseudo_source == PseudoSource::Proto
                          ? prototype_posterior(*bank, fmap_t, cfg_.temperature)
                          : linear_posterior(state_.teacher.model, fmap_t);
        for (int i = 0; i < bu; ++i)
            for (std::int64_t p = 0; p < pixels; ++p) {
                const std::size_t at = static_cast<std::size_t>(i) * pixels + p;
                const int c = mixed_labels[at];
                const double conf =
                    post.data()[(static_cast<std::int64_t>(i) * spec_.classes + c) * pixels + p];
                mixed_conf[at] = conf;
                mixed_valid[at] = conf >= cfg_.tau ? 1 : 0;
            }
    }

    // dual losses
    Tensor images_l = stack_images(weak_l);
    const std::vector<std::uint8_t> labels_l = stack_labels(weak_l);
    Tensor fmap_l, fmap_u;
    Tensor l_l = labeled_loss(state_.student, bank, images_l, labels_l, cfg_, flags_, &fmap_l, nullptr, nullptr,
                              &counters_.zero_norm_pairs);
    StepResult out;
    out.l_l = l_l.item();

    Tensor total = l_l;
    if (flags_.use_unlabeled) {
        Tensor l_u = unlabeled_loss(state_.student, bank, mixed_images, mixed_labels, mixed_valid, cfg_, flags_,
                                    &fmap_u, nullptr, nullptr, &counters_.zero_norm_pairs);
        out.l_u = l_u.item();
        total = ops::add(l_l, ops::scale(l_u, cfg_.lambda_u));
        ++counters_.unlabeled_steps;
    }

    auto params = state_.student.params();
    state_.student.zero_grads();
    backward(total);
    sgd_step(params, state_.opt, sched_, state_.iter++);

    // prototype maintenance: labeled ground-truth pixels plus confidence-gated
    // unlabeled pixels, both using the student features of this step
    if (bank && flags_.update_bank) {
        const int d = bank->feature_dim();
        const std::vector<double> pm_l = pixel_major(fmap_l);
        std::vector<PixelFeatureSample> samples;
        samples.reserve(labels_l.size() + mixed_labels.size());
        for (std::size_t i = 0; i < labels_l.size(); ++i)
            samples.push_back({pm_l.data() + i * static_cast<std::size_t>(d), labels_l[i], true});

        std::vector<double> pm_u;
        if (flags_.use_unlabeled) {
            pm_u = pixel_major(fmap_u);
            for (std::size_t i = 0; i < mixed_labels.size(); ++i) {
                ++counters_.gated_total;
                if (!mixed_valid[i]) {
                    ++counters_.gated_out;
                    continue;
                }
                ++counters_.gated_in;
                samples.push_back({pm_u.data() + i * static_cast<std::size_t>(d), mixed_labels[i], true});
            }
        }
        update(*bank, samples, cfg_.proto_update_per_pixel);
    }

    ema_update_teacher(state_.teacher, state_.student);
    return out;
}

void Trainer::run_semi() {
    if (cfg_.epochs == 0) return;
    const int bu = cfg_.batch_unlabeled;
    const int steps_per_epoch = static_cast<int>((unlabeled_.size() + bu - 1) / static_cast<std::size_t>(bu));
    sched_ = SgdConfig{cfg_.base_lr, cfg_.weight_decay, cfg_.momentum,
                       static_cast<std::int64_t>(cfg_.epochs) * steps_per_epoch, cfg_.poly_power};
    state_.opt = SgdState{};
    state_.iter = 0;

    std::vector<std::size_t> order(unlabeled_.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
        rng_batch_.shuffle(order);
        epoch_pl_total_ = epoch_pl_valid_ = epoch_pl_correct_ = 0;
        double ll_sum = 0.0, lu_sum = 0.0;
        int steps = 0;
        for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(bu)) {
            std::vector<SegSample> chunk;
            for (std::size_t i = at; i < std::min(order.size(), at + static_cast<std::size_t>(bu)); ++i)
                chunk.push_back(unlabeled_[order[i]]);
            StepResult r = semi_step(take_labeled_batch(), chunk);
            ll_sum += r.l_l;
            lu_sum += r.l_u;
            ++steps;
        }
        const double valid_frac =
            epoch_pl_total_ ? static_cast<double>(epoch_pl_valid_) / static_cast<double>(epoch_pl_total_) : 0.0;
        const double pl_acc = epoch_pl_valid_
                                  ? static_cast<double>(epoch_pl_correct_) / static_cast<double>(epoch_pl_valid_)
                                  : std::numeric_limits<double>::quiet_NaN();
        append_epoch_metrics(epochs_done_, ll_sum / steps, lu_sum / steps, valid_frac, pl_acc, state_.teacher.model);
        ++epochs_done_;
        if (on_epoch_) on_epoch_(epochs_done_ - 1, *this);
    }
}

void Trainer::run(const std::function<void(int epoch, const Trainer&)>& on_epoch) {
    on_epoch_ = on_epoch;
    run_warmup();
    if (variant_ != Variant::SupervisedOnly) {
        init_prototypes();
        run_semi();
    }
    on_epoch_ = nullptr;
}

void save_state(const TrainState& state, const std::string& path) {
    Checkpoint c;
    c.put_scalar_i64("meta/schema", 1);
    c.put_scalar_i64("meta/variant", static_cast<std::int64_t>(state.variant));
    c.put_scalar_i64("meta/iter", state.iter);
    const TrainConfig& t = state.cfg;
    c.put_scalar("cfg/tau", t.tau);
    c.put_scalar("cfg/temperature", t.temperature);
    c.put_scalar("cfg/proto_alpha", t.proto_alpha);
    c.put_scalar_i64("cfg/prototypes_per_class", t.prototypes_per_class);
    c.put_scalar_i64("cfg/pixels_per_class", t.pixels_per_class);
    c.put_scalar_i64("cfg/batch_labeled", t.batch_labeled);
    c.put_scalar_i64("cfg/batch_unlabeled", t.batch_unlabeled);
    c.put_scalar_i64("cfg/epochs", t.epochs);
    c.put_scalar_i64("cfg/warmup_epochs", t.warmup_epochs);
    c.put_scalar("cfg/lambda_u", t.lambda_u);
    c.put_scalar("cfg/ema_momentum", t.ema_momentum);
    c.put_scalar("cfg/base_lr", t.base_lr);
    c.put_scalar("cfg/weight_decay", t.weight_decay);
    c.put_scalar("cfg/momentum", t.momentum);
    c.put_scalar("cfg/poly_power", t.poly_power);
    c.put_scalar_i64("cfg/feature_dim", t.feature_dim);
    c.put_scalar_i64("cfg/indicator", t.indicator == IndicatorMode::Literal ? 1 : 0);
    c.put_scalar_i64("cfg/proto_update_per_pixel", t.proto_update_per_pixel ? 1 : 0);

    for (const auto& [name, tensor] : state.student.named_params()) c.put("student/" + name, tensor);
    for (const auto& [name, tensor] : state.teacher.model.named_params()) c.put("teacher/" + name, tensor);

    const auto& vel = state.opt.velocity;
    c.put_scalar_i64("opt/count", static_cast<std::int64_t>(vel.size()));
    for (std::size_t i = 0; i < vel.size(); ++i)
        c.put_f64("opt/v" + std::to_string(i), {static_cast<int>(vel[i].size())}, vel[i]);

    if (state.bank) {
        const PrototypeBank& b = *state.bank;
        c.put("bank/prototypes", b.prototypes);
        std::vector<std::int64_t> tags(b.class_of.begin(), b.class_of.end());
        c.put_i64("bank/class_of", {static_cast<int>(tags.size())}, std::move(tags));
        c.put_i64("bank/update_counts", {static_cast<int>(b.update_counts.size())},
                  std::vector<std::int64_t>(b.update_counts.begin(), b.update_counts.end()));
        c.put_scalar_i64("bank/k", b.k);
        c.put_scalar("bank/alpha", b.alpha);
        c.put_scalar_i64("bank/classes", b.classes);
    }
    save_checkpoint(path, c);
}

namespace {

Model model_from_checkpoint(const Checkpoint& c, const std::string& prefix, bool requires_grad) {
    Model m;
    auto get = [&](const std::string& name) {
        return Tensor::from(c.shape(prefix + name), c.f64(prefix + name), requires_grad);
    };
    m.conv1_w = get("conv1.w");
    m.conv1_b = get("conv1.b");
    m.conv2_w = get("conv2.w");
    m.conv2_b = get("conv2.b");
    m.conv3_w = get("conv3.w");
    m.conv3_b = get("conv3.b");
    m.proj_w = get("proj.w");
    m.proj_b = get("proj.b");
    m.head_w = get("head.w");
    m.cfg.c1 = m.conv1_w.dim(0);
    m.cfg.c2 = m.conv2_w.dim(0);
    m.cfg.c3 = m.conv3_w.dim(0);
    m.cfg.feature_dim = m.proj_w.dim(0);
    m.cfg.classes = m.head_w.dim(0);
    return m;
}

}  // namespace

TrainState load_state(const std::string& path) {
    Checkpoint c = load_checkpoint(path);
    if (c.scalar_i64("meta/schema") != 1) throw std::runtime_error("checkpoint: unsupported schema");

    TrainState s;
    s.variant = static_cast<Variant>(c.scalar_i64("meta/variant"));
    s.iter = c.scalar_i64("meta/iter");
    TrainConfig& t = s.cfg;
    t.tau = c.scalar("cfg/tau");
    t.temperature = c.scalar("cfg/temperature");
    t.proto_alpha = c.scalar("cfg/proto_alpha");
    t.prototypes_per_class = static_cast<int>(c.scalar_i64("cfg/prototypes_per_class"));
    t.pixels_per_class = static_cast<int>(c.scalar_i64("cfg/pixels_per_class"));
    t.batch_labeled = static_cast<int>(c.scalar_i64("cfg/batch_labeled"));
    t.batch_unlabeled = static_cast<int>(c.scalar_i64("cfg/batch_unlabeled"));
    t.epochs = static_cast<int>(c.scalar_i64("cfg/epochs"));
    t.warmup_epochs = static_cast<int>(c.scalar_i64("cfg/warmup_epochs"));
    t.lambda_u = c.scalar("cfg/lambda_u");
    t.ema_momentum = c.scalar("cfg/ema_momentum");
    t.base_lr = c.scalar("cfg/base_lr");
    t.weight_decay = c.scalar("cfg/weight_decay");
    t.momentum = c.scalar("cfg/momentum");
    t.poly_power = c.scalar("cfg/poly_power");
    t.feature_dim = static_cast<int>(c.scalar_i64("cfg/feature_dim"));
    t.indicator = c.scalar_i64("cfg/indicator") ? IndicatorMode::Literal : IndicatorMode::Dataflow;
    t.proto_update_per_pixel = c.scalar_i64("cfg/proto_update_per_pixel") != 0;

    s.student = model_from_checkpoint(c, "student/", true);
    s.teacher = TeacherState{model_from_checkpoint(c, "teacher/", false), t.ema_momentum};

    const auto n_vel = c.scalar_i64("opt/count");
    for (std::int64_t i = 0; i < n_vel; ++i) s.opt.velocity.push_back(c.f64("opt/v" + std::to_string(i)));

    if (c.has("bank/prototypes")) {
        PrototypeBank b;
        b.prototypes = Tensor::from(c.shape("bank/prototypes"), c.f64("bank/prototypes"));
        const auto& tags = c.i64("bank/class_of");
        b.class_of.assign(tags.begin(), tags.end());
        const auto& counts = c.i64("bank/update_counts");
        b.update_counts.assign(counts.begin(), counts.end());
        b.k = static_cast<int>(c.scalar_i64("bank/k"));
        b.alpha = c.scalar("bank/alpha");
        b.classes = static_cast<int>(c.scalar_i64("bank/classes"));
        s.bank = std::move(b);
    }
    return s;
}

}  // namespace pseg
