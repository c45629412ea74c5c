#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pseg/dataset.hpp"
#include "pseg/metrics.hpp"
#include "pseg/model.hpp"
#include "pseg/protobank.hpp"
#include "pseg/sgd.hpp"

namespace pseg {

// ablation variants; names match the experiment config file values
enum class Variant { SupervisedOnly, LinearOnly, ProtoOnly, NoProtoUpdate, Full };

Variant variant_from_string(const std::string& s);
std::string to_string(Variant v);

enum class IndicatorMode {
    Dataflow,  // mix per-pixel confidences computed on the original weak views
    Literal,   // re-evaluate teacher confidence on the mixed image
};

enum class PseudoSource { Linear, Proto };

struct VariantFlags {
    bool use_unlabeled = false;
    bool use_linear_loss = false;
    bool use_proto_loss = false;
    bool use_bank = false;
    bool update_bank = false;
    PseudoSource pseudo_source = PseudoSource::Linear;
};

VariantFlags flags_for(Variant v);

struct TrainConfig {
    double tau = 0.8;
    double temperature = 0.1;
    double proto_alpha = 0.99;
    int prototypes_per_class = 4;
    int pixels_per_class = 1000;  // prototype-init sampling budget per class
    int batch_labeled = 4;
    int batch_unlabeled = 8;
    int epochs = 10;        // semi-supervised epochs
    int warmup_epochs = 20;
    double lambda_u = 1.0;
    double ema_momentum = 0.99;
    double base_lr = 0.2;
    double weight_decay = 1e-4;
    double momentum = 0.9;
    double poly_power = 0.8;
    int feature_dim = 16;
    IndicatorMode indicator = IndicatorMode::Dataflow;
    bool proto_update_per_pixel = false;
};

// throws std::invalid_argument naming the offending field
void validate(const TrainConfig& cfg);

// Teacher argmax labels with their confidences; valid = confidence >= tau.
struct PseudoLabelMap {
    int h = 0, w = 0;
    std::vector<std::uint8_t> labels;
    std::vector<double> confidence;
    std::vector<std::uint8_t> valid;
};

// per-pixel argmax/max of the model's linear posterior on weakly augmented
// images (the teacher path); images: [n,3,h,w]
std::vector<PseudoLabelMap> pseudo_label(const Model& teacher, const Tensor& images, double tau);

// variant that reads the prototype posterior instead (proto_only ablation)
std::vector<PseudoLabelMap> pseudo_label_proto(const Model& teacher, const PrototypeBank& bank, double temperature,
                                               const Tensor& images, double tau);

struct EpochMetrics {
    int epoch = 0;
    double l_l = 0.0;
    double l_u = 0.0;
    double val_miou_linear = 0.0;
    double val_miou_proto = 0.0;  // NaN when the variant has no bank
    double valid_pixel_fraction = 0.0;
    double pseudo_label_accuracy = 0.0;  // NaN when no pixel was valid
    double intra_var = 0.0;
    double inter_var = 0.0;
};

struct TrainCounters {
    std::int64_t unlabeled_steps = 0;   // executions of the unlabeled loss path
    std::int64_t gated_in = 0;          // unlabeled pixels that reached the bank update
    std::int64_t gated_out = 0;         // unlabeled pixels rejected by the confidence gate
    std::int64_t gated_total = 0;
    std::int64_t zero_norm_pairs = 0;   // zero-norm cosine evaluations
};

struct TrainState {
    Model student;
    TeacherState teacher;
    std::optional<PrototypeBank> bank;
    SgdState opt;
    std::int64_t iter = 0;  // optimizer steps taken in the current phase
    Variant variant = Variant::Full;
    TrainConfig cfg;
};

struct EvalResult {
    double miou_linear = 0.0;
    double miou_proto = 0.0;  // NaN without a bank
    DiscriminationStats discrim;
    PseudoLabelQuality pseudo_quality;  // teacher linear pseudo-labels vs truth at cfg.tau
};

// evaluates both heads over the given sample ids; discrimination features are
// reservoir-sampled at <= 2000 pixels per class
EvalResult evaluate(const Model& model, const PrototypeBank* bank, const DatasetSpec& spec,
                    const std::vector<std::int64_t>& ids, const TrainConfig& cfg, std::uint64_t sample_seed);

// Orchestrates one run: supervised warm-up, prototype initialization, then
// the semi-supervised loop (teacher pseudo-labels, CutMix-mixed dual losses,
// SGD on the student, prototype EMA, teacher EMA). Fully deterministic in
// (spec, cfg, variant, seed).
class Trainer {
public:
    Trainer(DatasetSpec spec, TrainConfig cfg, Variant variant, std::uint64_t seed);

    // epoch hook fires after each epoch's metrics row is appended
    void run(const std::function<void(int epoch, const Trainer&)>& on_epoch = nullptr);

    // phase pieces, exposed for tests
    void run_warmup();
    void init_prototypes();
    void run_semi();

    const TrainState& state() const { return state_; }
    TrainState& state() { return state_; }
    const std::vector<EpochMetrics>& log() const { return log_; }
    const TrainCounters& counters() const { return counters_; }
    const DatasetSpec& dataset_spec() const { return spec_; }

    // one semi-supervised step over explicit batches; returns (L_l, L_u)
    struct StepResult {
        double l_l = 0.0;
        double l_u = 0.0;
    };
    StepResult semi_step(const std::vector<SegSample>& labeled, const std::vector<SegSample>& unlabeled);

private:
    void append_epoch_metrics(int epoch, double l_l, double l_u, double valid_frac, double pseudo_acc,
                              const Model& eval_model);
    std::vector<SegSample> take_labeled_batch();

    DatasetSpec spec_;
    TrainConfig cfg_;
    Variant variant_;
    VariantFlags flags_;
    std::uint64_t seed_;

    std::vector<SegSample> labeled_, unlabeled_;
    std::vector<std::int64_t> val_ids_;

    TrainState state_;
    std::vector<EpochMetrics> log_;
    TrainCounters counters_;

    Rng rng_batch_;
    Rng rng_aug_;
    Rng rng_cutmix_;
    std::vector<std::size_t> labeled_cycle_;
    std::size_t labeled_pos_ = 0;
    SgdConfig sched_;
    int epochs_done_ = 0;
    std::function<void(int epoch, const Trainer&)> on_epoch_;
    std::int64_t epoch_pl_total_ = 0, epoch_pl_valid_ = 0, epoch_pl_correct_ = 0;
};

// builds [n,3,h,w] image tensor from samples (no gradient tracking)
Tensor stack_images(const std::vector<SegSample>& samples);
std::vector<std::uint8_t> stack_labels(const std::vector<SegSample>& samples);

// dual-head labeled loss: mean-over-batch, pixel-mean CE per enabled head
Tensor labeled_loss(const Model& student, const PrototypeBank* bank, const Tensor& images,
                    const std::vector<std::uint8_t>& labels, const TrainConfig& cfg, const VariantFlags& flags,
                    Tensor* fmap_out = nullptr, double* linear_part = nullptr, double* proto_part = nullptr,
                    std::int64_t* zero_norm = nullptr);

// dual-head unlabeled loss over mixed inputs: masked mean across the batch's
// valid pixels (divides by max(1, count))
Tensor unlabeled_loss(const Model& student, const PrototypeBank* bank, const Tensor& mixed_images,
                      const std::vector<std::uint8_t>& mixed_labels, const std::vector<std::uint8_t>& mixed_valid,
                      const TrainConfig& cfg, const VariantFlags& flags, Tensor* fmap_out = nullptr,
                      double* linear_part = nullptr, double* proto_part = nullptr, std::int64_t* zero_norm = nullptr);

// checkpoint glue
void save_state(const TrainState& state, const std::string& path);
TrainState load_state(const std::string& path);

}  // namespace pseg
