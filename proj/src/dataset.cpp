#include "pseg/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <bit>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "pseg/kernels.hpp"

namespace pseg {

void validate(const DatasetSpec& spec) {
    if (spec.height < 16 || spec.width < 16)
        throw std::invalid_argument("dataset: height and width must be at least 16");
    if (spec.classes < 2) throw std::invalid_argument("dataset: classes must be at least 2");
    if (spec.modes_per_class < 1) throw std::invalid_argument("dataset: modes_per_class must be at least 1");
    if (spec.n_labeled < 1 || spec.n_unlabeled < 0 || spec.n_val < 0)
        throw std::invalid_argument("dataset: split sizes must be non-negative (n_labeled >= 1)");
    if (spec.noise_std < 0.0) throw std::invalid_argument("dataset: noise_std must be non-negative");
}

namespace {

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
    h = h - std::floor(h);
    const double c = v * s;
    const double hp = h * 6.0;
    const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1)      { r = c; g = x; }
    else if (hp < 2) { r = x; g = c; }
    else if (hp < 3) { g = c; b = x; }
    else if (hp < 4) { g = x; b = c; }
    else if (hp < 5) { r = x; b = c; }
    else             { r = c; b = x; }
    const double m = v - c;
    return {r + m, g + m, b + m};
}

struct ShapeInstance {
    int class_id;
    int kind;  // 0 circle, 1 rectangle, 2 triangle
    int cx, cy;
    int rx, ry;
    int mode;
    std::array<double, 3> color;
};

bool inside_shape(const ShapeInstance& sh, int x, int y) {
    const double dx = x - sh.cx, dy = y - sh.cy;
    switch (sh.kind) {
        case 0:
            return (dx * dx) / double(sh.rx * sh.rx) + (dy * dy) / double(sh.ry * sh.ry) <= 1.0;
        case 1:
            return std::abs(int(dx)) <= sh.rx && std::abs(int(dy)) <= sh.ry;
        default: {
            // upright triangle: apex at (cx, cy-ry), base corners (cx +- rx, cy+ry)
            if (dy < -sh.ry || dy > sh.ry) return false;
            const double half_width = sh.rx * (dy + sh.ry) / (2.0 * sh.ry);
            return std::fabs(dx) <= half_width;
        }
    }
}

bool boxes_overlap(const ShapeInstance& a, const ShapeInstance& b, int margin) {
    return std::abs(a.cx - b.cx) <= a.rx + b.rx + margin && std::abs(a.cy - b.cy) <= a.ry + b.ry + margin;
}

}  // namespace

std::array<double, 3> mode_color(const DatasetSpec& spec, int class_id, int mode) {
    const int m_count = spec.modes_per_class;
    if (class_id == 0) {
        const double v = m_count == 1 ? 0.35 : 0.15 + 0.55 * mode / double(m_count - 1);
        return {v, v, v};
    }
    const int idx = (class_id - 1) * m_count + mode;
    const double hue = 0.07 + 0.61803398875 * idx;
    return hsv_to_rgb(hue, 0.85, 0.9);
}

SegSample generate(const DatasetSpec& spec, std::int64_t sample_id) {
    validate(spec);
    const std::int64_t total = spec.n_labeled + spec.n_unlabeled + spec.n_val;
    if (sample_id < 0 || sample_id >= total) throw std::out_of_range("generate: sample_id outside dataset");

    const int h = spec.height, w = spec.width, c = spec.classes;
    Rng rng(mix_seed(spec.seed, static_cast<std::uint64_t>(sample_id), 0xDA7AULL));
    const double jitter = 1.2 * spec.noise_std;

    SegSample s;
    s.height = h;
    s.width = w;
    s.sample_id = sample_id;
    s.image.assign(static_cast<std::size_t>(3) * h * w, 0.0);
    s.label.assign(static_cast<std::size_t>(h) * w, 0);
    s.mode_of_class.assign(static_cast<std::size_t>(c), -1);

    // background
    const int bg_mode = static_cast<int>(rng.uniform_int(0, spec.modes_per_class - 1));
    s.mode_of_class[0] = bg_mode;
    std::array<double, 3> bg = mode_color(spec, 0, bg_mode);
    for (double& ch : bg) ch += rng.uniform(-jitter, jitter);

    // pick which foreground classes appear
    const int fg_classes = c - 1;
    const int max_shapes = std::min(3, fg_classes);
    const int n_shapes = static_cast<int>(rng.uniform_int(1, max_shapes));
    std::vector<int> candidates(static_cast<std::size_t>(fg_classes));
    std::iota(candidates.begin(), candidates.end(), 1);
    rng.shuffle(candidates);
    std::vector<int> chosen(candidates.begin(), candidates.begin() + n_shapes);
    std::sort(chosen.begin(), chosen.end());

    std::vector<ShapeInstance> shapes;
    for (int cls : chosen) {
        const int mode = static_cast<int>(rng.uniform_int(0, spec.modes_per_class - 1));
        const int base = std::min(h, w);
        ShapeInstance sh;
        sh.class_id = cls;
        sh.kind = (cls - 1) % 3;
        sh.mode = mode;
        bool placed = false;
        for (int attempt = 0; attempt < 50 && !placed; ++attempt) {
            sh.rx = static_cast<int>(rng.uniform_int(base / 8, base / 5));
            sh.ry = static_cast<int>(rng.uniform_int(base / 8, base / 5));
            sh.cx = static_cast<int>(rng.uniform_int(sh.rx + 1, w - 2 - sh.rx));
            sh.cy = static_cast<int>(rng.uniform_int(sh.ry + 1, h - 2 - sh.ry));
            placed = true;
            for (const auto& other : shapes)
                if (boxes_overlap(sh, other, 2)) placed = false;
        }
        if (!placed) continue;  // crowded frame; skip this shape
        sh.color = mode_color(spec, cls, mode);
        for (double& ch : sh.color) ch += rng.uniform(-jitter, jitter);
        shapes.push_back(sh);
        s.mode_of_class[static_cast<std::size_t>(cls)] = mode;
    }

    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const std::int64_t p = static_cast<std::int64_t>(y) * w + x;
            std::array<double, 3> rgb = bg;
            int label = 0;
            int mode = bg_mode;
            for (const auto& sh : shapes) {
                if (inside_shape(sh, x, y)) {
                    rgb = sh.color;
                    label = sh.class_id;
                    mode = sh.mode;
                    break;
                }
            }
            if (mode % 2 == 1) {
                // odd appearance modes carry a diagonal stripe texture
                const double stripe = 1.0 + 0.22 * std::sin(2.0 * 3.14159265358979323846 * (x + y) / 7.0);
                for (double& ch : rgb) ch *= stripe;
            }
            s.label[static_cast<std::size_t>(p)] = static_cast<std::uint8_t>(label);
            for (int ch = 0; ch < 3; ++ch) s.image[static_cast<std::size_t>(ch) * plane + p] = rgb[static_cast<std::size_t>(ch)];
        }
    }

    if (spec.noise_std > 0.0) {
        for (double& v : s.image) v += rng.normal(0.0, spec.noise_std);
    }
    for (double& v : s.image) v = std::clamp(v, 0.0, 1.0);
    return s;
}

std::vector<std::int64_t> split_ids(const DatasetSpec& spec, Split split) {
    std::int64_t lo = 0, n = 0;
    switch (split) {
        case Split::Labeled:   lo = 0;                               n = spec.n_labeled;   break;
        case Split::Unlabeled: lo = spec.n_labeled;                  n = spec.n_unlabeled; break;
        case Split::Val:       lo = spec.n_labeled + spec.n_unlabeled; n = spec.n_val;     break;
    }
    std::vector<std::int64_t> ids(static_cast<std::size_t>(n));
    std::iota(ids.begin(), ids.end(), lo);
    return ids;
}

SegSample flip_horizontal(const SegSample& s) {
    SegSample out = s;
    const std::int64_t plane = static_cast<std::int64_t>(s.height) * s.width;
    for (int ch = 0; ch < 3; ++ch)
        for (int y = 0; y < s.height; ++y)
            for (int x = 0; x < s.width; ++x)
                out.image[ch * plane + static_cast<std::int64_t>(y) * s.width + x] =
                    s.image[ch * plane + static_cast<std::int64_t>(y) * s.width + (s.width - 1 - x)];
    for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x)
            out.label[static_cast<std::size_t>(y) * s.width + x] =
                s.label[static_cast<std::size_t>(y) * s.width + (s.width - 1 - x)];
    return out;
}

SegSample crop_resize(const SegSample& s, int top, int left, int crop_h, int crop_w) {
    if (crop_h < 1 || crop_w < 1 || top < 0 || left < 0 || top + crop_h > s.height || left + crop_w > s.width)
        throw std::invalid_argument("crop_resize: window outside frame");

    const std::int64_t plane = static_cast<std::int64_t>(s.height) * s.width;
    std::vector<double> window(static_cast<std::size_t>(3) * crop_h * crop_w);
    for (int ch = 0; ch < 3; ++ch)
        for (int y = 0; y < crop_h; ++y)
            for (int x = 0; x < crop_w; ++x)
                window[(static_cast<std::size_t>(ch) * crop_h + y) * crop_w + x] =
                    s.image[ch * plane + static_cast<std::int64_t>(top + y) * s.width + (left + x)];

    SegSample out = s;
    kernels::ResizeDims d{1, 3, crop_h, crop_w, s.height, s.width};
    kernels::resize_bilinear_forward(window.data(), out.image.data(), d);

    // nearest-neighbour on the label plane, same half-pixel mapping
    for (int y = 0; y < s.height; ++y) {
        double sy = (y + 0.5) * (static_cast<double>(crop_h) / s.height) - 0.5;
        sy = std::clamp(sy, 0.0, static_cast<double>(crop_h - 1));
        const int iy = static_cast<int>(std::floor(sy + 0.5));
        for (int x = 0; x < s.width; ++x) {
            double sx = (x + 0.5) * (static_cast<double>(crop_w) / s.width) - 0.5;
            sx = std::clamp(sx, 0.0, static_cast<double>(crop_w - 1));
            const int ix = static_cast<int>(std::floor(sx + 0.5));
            out.label[static_cast<std::size_t>(y) * s.width + x] =
                s.label[static_cast<std::size_t>(top + iy) * s.width + (left + ix)];
        }
    }
    return out;
}

SegSample weak_augment(const SegSample& s, std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0xA59ULL));
    const double frac = rng.uniform(0.75, 1.0);
    const int crop_h = std::max(1, static_cast<int>(std::lround(frac * s.height)));
    const int crop_w = std::max(1, static_cast<int>(std::lround(frac * s.width)));
    const int top = static_cast<int>(rng.uniform_int(0, s.height - crop_h));
    const int left = static_cast<int>(rng.uniform_int(0, s.width - crop_w));
    SegSample out = (crop_h == s.height && crop_w == s.width && top == 0 && left == 0)
                        ? s
                        : crop_resize(s, top, left, crop_h, crop_w);
    if (rng.uniform() < 0.5) out = flip_horizontal(out);
    return out;
}

void validate_plan(const CutMixPlan& plan, int h, int w, int batch) {
    if (plan.height < 0 || plan.width < 0 || plan.top < 0 || plan.left < 0 || plan.top + plan.height > h ||
        plan.left + plan.width > w)
        throw std::invalid_argument("cutmix: rectangle outside frame");
    if (plan.src_a < 0 || plan.src_a >= batch || plan.src_b < 0 || plan.src_b >= batch)
        throw std::invalid_argument("cutmix: source index outside batch");
}

std::vector<CutMixPlan> make_cutmix_plans(int batch, int h, int w, Rng& rng) {
    std::vector<int> partner(static_cast<std::size_t>(batch));
    std::iota(partner.begin(), partner.end(), 0);
    rng.shuffle(partner);

    std::vector<CutMixPlan> plans(static_cast<std::size_t>(batch));
    for (int i = 0; i < batch; ++i) {
        const double area_ratio = rng.uniform(0.25, 0.5);
        const double aspect = rng.uniform(2.0 / 3.0, 3.0 / 2.0);
        CutMixPlan& p = plans[static_cast<std::size_t>(i)];
        p.height = std::clamp(static_cast<int>(std::lround(std::sqrt(area_ratio * h * w * aspect))), 1, h);
        p.width = std::clamp(static_cast<int>(std::lround(std::sqrt(area_ratio * h * w / aspect))), 1, w);
        p.top = static_cast<int>(rng.uniform_int(0, h - p.height));
        p.left = static_cast<int>(rng.uniform_int(0, w - p.width));
        p.src_a = i;
        p.src_b = partner[static_cast<std::size_t>(i)];
    }
    return plans;
}

void mix_plane(const CutMixPlan& plan, int h, int w, int channels, const double* a, const double* b, double* dst) {
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    for (int ch = 0; ch < channels; ++ch) {
        const double* ap = a + static_cast<std::int64_t>(ch) * plane;
        const double* bp = b + static_cast<std::int64_t>(ch) * plane;
        double* dp = dst + static_cast<std::int64_t>(ch) * plane;
        std::copy(ap, ap + plane, dp);
        for (int y = plan.top; y < plan.top + plan.height; ++y)
            for (int x = plan.left; x < plan.left + plan.width; ++x)
                dp[static_cast<std::int64_t>(y) * w + x] = bp[static_cast<std::int64_t>(y) * w + x];
    }
}

void mix_plane(const CutMixPlan& plan, int h, int w, const std::uint8_t* a, const std::uint8_t* b,
               std::uint8_t* dst) {
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    std::copy(a, a + plane, dst);
    for (int y = plan.top; y < plan.top + plan.height; ++y)
        for (int x = plan.left; x < plan.left + plan.width; ++x)
            dst[static_cast<std::int64_t>(y) * w + x] = b[static_cast<std::int64_t>(y) * w + x];
}

namespace {

void write_i32(std::ostream& out, std::int32_t v) {
    static_assert(std::endian::native == std::endian::little, "little-endian host required");
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::int32_t read_i32(std::istream& in) {
    std::int32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}

}  // namespace

void export_sample(const SegSample& s, int classes, std::ostream& out) {
    write_i32(out, s.height);
    write_i32(out, s.width);
    write_i32(out, classes);
    for (double v : s.image) {
        const float f = static_cast<float>(v);
        out.write(reinterpret_cast<const char*>(&f), sizeof(f));
    }
    out.write(reinterpret_cast<const char*>(s.label.data()), static_cast<std::streamsize>(s.label.size()));
}

SegSample import_sample(std::istream& in, int* classes_out) {
    SegSample s;
    s.height = read_i32(in);
    s.width = read_i32(in);
    const int classes = read_i32(in);
    if (!in || s.height < 1 || s.width < 1 || classes < 2) throw std::runtime_error("import_sample: bad header");
    if (classes_out) *classes_out = classes;
    const std::size_t pixels = static_cast<std::size_t>(s.height) * s.width;
    s.image.resize(3 * pixels);
    for (double& v : s.image) {
        float f = 0;
        in.read(reinterpret_cast<char*>(&f), sizeof(f));
        v = f;
    }
    s.label.resize(pixels);
    in.read(reinterpret_cast<char*>(s.label.data()), static_cast<std::streamsize>(pixels));
    if (!in) throw std::runtime_error("import_sample: truncated payload");
    s.mode_of_class.assign(static_cast<std::size_t>(classes), -1);
    return s;
}

}  // namespace pseg
