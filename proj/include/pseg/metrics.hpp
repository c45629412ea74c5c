#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace pseg {

// rows = ground truth, cols = prediction
struct ConfusionMatrix {
    explicit ConfusionMatrix(int classes) : classes(classes), counts(static_cast<std::size_t>(classes) * classes, 0) {}

    void add(int truth, int pred) { counts[static_cast<std::size_t>(truth) * classes + pred]++; }

    void add_map(std::span<const std::uint8_t> truth, std::span<const std::uint8_t> pred) {
        for (std::size_t i = 0; i < truth.size(); ++i) add(truth[i], pred[i]);
    }

    void merge(const ConfusionMatrix& other) {
        for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
    }

    std::uint64_t at(int truth, int pred) const { return counts[static_cast<std::size_t>(truth) * classes + pred]; }

    std::uint64_t total() const {
        std::uint64_t t = 0;
        for (auto v : counts) t += v;
        return t;
    }

    int classes;
    std::vector<std::uint64_t> counts;
};

// mean over classes of TP/(TP+FP+FN); zero-union classes are excluded.
// Throws std::invalid_argument when no class has a nonzero union.
double miou(const ConfusionMatrix& cm);

struct PseudoLabelQuality {
    double precision = 0.0;  // correct valid / valid; NaN when nothing is valid
    double recall = 0.0;     // correct valid / total
    double coverage = 0.0;   // valid / total
};

PseudoLabelQuality pseudo_label_quality(std::span<const std::uint8_t> pseudo, std::span<const std::uint8_t> valid,
                                        std::span<const std::uint8_t> truth);

struct DiscriminationStats {
    double intra_trace = 0.0;  // mean over classes of tr(within-class covariance)
    double inter_trace = 0.0;  // tr of count-weighted scatter of class means
    double ratio = 0.0;        // inter/intra; NaN when intra == 0
    int skipped_singletons = 0;
};

// features: [n, dim] row-major with a class id per row. Requires >= 2 classes
// present; classes with a single sample are skipped from the intra term.
DiscriminationStats discrimination(const std::vector<double>& features, int n, int dim,
                                   const std::vector<int>& class_ids);

}  // namespace pseg
