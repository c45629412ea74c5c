#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <vector>

#include "pseg/base.hpp"

namespace pseg {

// Synthetic segmentation data: each image holds up to three non-overlapping
// foreground shapes (at most one per foreground class), every class rendered
// in one of `modes_per_class` appearance modes so that one semantic class
// spans several distinct looks.
struct DatasetSpec {
    int height = 64;
    int width = 64;
    int classes = 4;           // class 0 is background
    int modes_per_class = 2;
    int n_labeled = 8;
    int n_unlabeled = 256;
    int n_val = 64;
    double noise_std = 0.05;
    std::uint64_t seed = 0;
};

// throws std::invalid_argument on degenerate specs (H/W < 16, C < 2, ...)
void validate(const DatasetSpec& spec);

struct SegSample {
    int height = 0;
    int width = 0;
    std::vector<double> image;        // [3,H,W] planar, values in [0,1]
    std::vector<std::uint8_t> label;  // [H,W] class ids
    std::int64_t sample_id = -1;
    std::vector<int> mode_of_class;   // per class: rendered mode, -1 if absent
};

// pure function of (spec, sample_id); bit-identical across calls
SegSample generate(const DatasetSpec& spec, std::int64_t sample_id);

enum class Split { Labeled, Unlabeled, Val };

// {labeled, unlabeled, val} ids are disjoint and exhaustive over
// [0, n_labeled + n_unlabeled + n_val)
std::vector<std::int64_t> split_ids(const DatasetSpec& spec, Split split);

// spatial transforms applied identically to image and label
SegSample flip_horizontal(const SegSample& s);
// crops the window and resizes back to the original frame (bilinear image,
// nearest label)
SegSample crop_resize(const SegSample& s, int top, int left, int crop_h, int crop_w);

// random crop at >= 75% linear size plus random horizontal flip; pure in
// (sample, seed)
SegSample weak_augment(const SegSample& s, std::uint64_t seed);

struct CutMixPlan {
    int top = 0;
    int left = 0;
    int height = 0;
    int width = 0;
    int src_a = 0;
    int src_b = 0;
};

// rectangle area ratio uniform in [0.25, 0.5] of the frame; pairing is a
// random derangement-free permutation of the batch
std::vector<CutMixPlan> make_cutmix_plans(int batch, int h, int w, Rng& rng);

// throws std::invalid_argument when the rectangle leaves the frame
void validate_plan(const CutMixPlan& plan, int h, int w, int batch);

// dst = a outside the rectangle, b inside; planes of `channels` maps
void mix_plane(const CutMixPlan& plan, int h, int w, int channels, const double* a, const double* b, double* dst);
void mix_plane(const CutMixPlan& plan, int h, int w, const std::uint8_t* a, const std::uint8_t* b, std::uint8_t* dst);

// cross-implementation fixture format: header H,W,C as little-endian int32,
// then image as float32 [3,H,W], then label bytes [H,W]
void export_sample(const SegSample& s, int classes, std::ostream& out);
SegSample import_sample(std::istream& in, int* classes_out = nullptr);

// per-(class, mode) base colour of the generator, before jitter and noise
std::array<double, 3> mode_color(const DatasetSpec& spec, int class_id, int mode);

}  // namespace pseg
