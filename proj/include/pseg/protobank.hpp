#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pseg/dataset.hpp"
#include "pseg/tensor.hpp"

namespace pseg {

struct Model;

// C*K class-tagged feature vectors forming the non-parametric classifier.
// Prototypes are stored unnormalized; cosine comparisons normalize at read
// time. They never receive gradients: the EMA update is the only mutator.
struct PrototypeBank {
    Tensor prototypes;            // [classes*k, feature_dim], requires_grad = false
    std::vector<int> class_of;    // class tag per row, fixed after init
    int classes = 0;
    int k = 0;
    double alpha = 0.99;          // EMA rate
    std::vector<std::int64_t> update_counts;  // per prototype, monotone

    int feature_dim() const { return prototypes.dim(1); }
    std::span<const double> prototype(int j) const {
        return {prototypes.data() + static_cast<std::int64_t>(j) * feature_dim(),
                static_cast<std::size_t>(feature_dim())};
    }
};

struct KmeansResult {
    std::vector<double> centroids;  // [k, dim] row-major
    std::vector<int> assignment;    // per input point
    int iters = 0;
    bool padded = false;  // fewer points than k: centroids were duplicate-padded
};

// Lloyd iterations with k-means++ seeding; deterministic in `seed`. Stops when
// assignments stabilize or at max_iters. Empty clusters are re-seeded to the
// point farthest from its current centroid.
KmeansResult kmeans(const std::vector<double>& points, int n, int dim, int k, std::uint64_t seed,
                    int max_iters = 100);

struct PixelFeatureSample {
    const double* feature = nullptr;  // contiguous feature_dim values
    int class_id = 0;
    bool valid = true;
};

// index of the most cosine-similar prototype among those tagged class_id;
// ties resolve to the lowest index
int assign(const PrototypeBank& bank, std::span<const double> feature, int class_id);

// One EMA step per prototype per batch: groups the (already gated) samples by
// assigned prototype and applies p <- alpha*p + (1-alpha)*mean(features).
// per_pixel = true instead applies Eq-style sequential per-sample updates in
// input order.
void update(PrototypeBank& bank, std::span<const PixelFeatureSample> samples, bool per_pixel = false);

// Algorithm: per class, sample up to pixels_per_class ground-truth pixels
// from interpolated feature maps of the labeled set (uniform, seeded), run
// k-means with k clusters, and adopt the centroids as that class's
// prototypes. Throws if a class never occurs in the labeled set.
PrototypeBank init_bank(const Model& warmup_model, const DatasetSpec& spec,
                        const std::vector<SegSample>& labeled_set, int k, int pixels_per_class, double alpha,
                        std::uint64_t seed);

// standalone inspection export: one row per prototype (class_id, proto_index,
// then feature_dim values)
void export_bank_csv(const PrototypeBank& bank, std::ostream& out);

}  // namespace pseg
