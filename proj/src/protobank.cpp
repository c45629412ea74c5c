#include "pseg/protobank.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <limits>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "pseg/model.hpp"

namespace pseg {

namespace {

double sq_dist(const double* a, const double* b, int dim) {
    double s = 0.0;
    for (int i = 0; i < dim; ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

}  // namespace

KmeansResult kmeans(const std::vector<double>& points, int n, int dim, int k, std::uint64_t seed, int max_iters) {
    if (n < 1 || dim < 1 || k < 1) throw std::invalid_argument("kmeans: empty input");
    if (static_cast<std::int64_t>(points.size()) != static_cast<std::int64_t>(n) * dim)
        throw std::invalid_argument("kmeans: points size does not match n*dim");

    KmeansResult res;
    res.assignment.assign(static_cast<std::size_t>(n), 0);

    if (n < k) {
        // duplicate-pad centroids from the available points
        res.centroids.resize(static_cast<std::size_t>(k) * dim);
        for (int j = 0; j < k; ++j)
            std::copy_n(points.data() + static_cast<std::int64_t>(j % n) * dim, dim,
                        res.centroids.data() + static_cast<std::int64_t>(j) * dim);
        for (int i = 0; i < n; ++i) res.assignment[static_cast<std::size_t>(i)] = i;
        res.padded = true;
        std::cerr << "kmeans: only " << n << " points for k=" << k << ", duplicate-padding centroids\n";
        return res;
    }

    Rng rng(mix_seed(seed, 0x4B4DULL));

    // k-means++ seeding
    std::vector<double> centroids(static_cast<std::size_t>(k) * dim);
    std::vector<double> min_d2(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
    {
        const int first = static_cast<int>(rng.uniform_int(0, n - 1));
        std::copy_n(points.data() + static_cast<std::int64_t>(first) * dim, dim, centroids.data());
        for (int i = 0; i < n; ++i)
            min_d2[static_cast<std::size_t>(i)] = sq_dist(points.data() + static_cast<std::int64_t>(i) * dim,
                                                          centroids.data(), dim);
        for (int j = 1; j < k; ++j) {
            double total = std::accumulate(min_d2.begin(), min_d2.end(), 0.0);
            int pick;
            if (total <= 0.0) {
                pick = static_cast<int>(rng.uniform_int(0, n - 1));  // all points coincide
            } else {
                const double r = rng.uniform() * total;
                double acc = 0.0;
                pick = n - 1;
                for (int i = 0; i < n; ++i) {
                    acc += min_d2[static_cast<std::size_t>(i)];
                    if (r < acc) {
                        pick = i;
                        break;
                    }
                }
            }
            double* cj = centroids.data() + static_cast<std::int64_t>(j) * dim;
            std::copy_n(points.data() + static_cast<std::int64_t>(pick) * dim, dim, cj);
            for (int i = 0; i < n; ++i) {
                const double d2 = sq_dist(points.data() + static_cast<std::int64_t>(i) * dim, cj, dim);
                min_d2[static_cast<std::size_t>(i)] = std::min(min_d2[static_cast<std::size_t>(i)], d2);
            }
        }
    }

    std::vector<int> counts(static_cast<std::size_t>(k));
    std::vector<double> sums(static_cast<std::size_t>(k) * dim);
    for (int it = 0; it < max_iters; ++it) {
        res.iters = it + 1;
        bool changed = false;
        for (int i = 0; i < n; ++i) {
            const double* p = points.data() + static_cast<std::int64_t>(i) * dim;
            int best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (int j = 0; j < k; ++j) {
                const double d = sq_dist(p, centroids.data() + static_cast<std::int64_t>(j) * dim, dim);
                if (d < best_d) {
                    best_d = d;
                    best = j;
                }
            }
            if (res.assignment[static_cast<std::size_t>(i)] != best) changed = true;
            res.assignment[static_cast<std::size_t>(i)] = best;
        }
        if (!changed && it > 0) break;

        std::fill(counts.begin(), counts.end(), 0);
        std::fill(sums.begin(), sums.end(), 0.0);
        for (int i = 0; i < n; ++i) {
            const int j = res.assignment[static_cast<std::size_t>(i)];
            counts[static_cast<std::size_t>(j)]++;
            const double* p = points.data() + static_cast<std::int64_t>(i) * dim;
            double* s = sums.data() + static_cast<std::int64_t>(j) * dim;
            for (int d = 0; d < dim; ++d) s[d] += p[d];
        }
        for (int j = 0; j < k; ++j) {
            if (counts[static_cast<std::size_t>(j)] > 0) {
                const double inv = 1.0 / counts[static_cast<std::size_t>(j)];
                for (int d = 0; d < dim; ++d)
                    centroids[static_cast<std::size_t>(j) * dim + static_cast<std::size_t>(d)] =
                        sums[static_cast<std::size_t>(j) * dim + static_cast<std::size_t>(d)] * inv;
            } else {
                // re-seed an empty cluster to the globally farthest point
                int far = 0;
                double far_d = -1.0;
                for (int i = 0; i < n; ++i) {
                    const int a = res.assignment[static_cast<std::size_t>(i)];
                    const double d = sq_dist(points.data() + static_cast<std::int64_t>(i) * dim,
                                             centroids.data() + static_cast<std::int64_t>(a) * dim, dim);
                    if (d > far_d) {
                        far_d = d;
                        far = i;
                    }
                }
                std::copy_n(points.data() + static_cast<std::int64_t>(far) * dim, dim,
                            centroids.data() + static_cast<std::int64_t>(j) * dim);
            }
        }
    }

    res.centroids = std::move(centroids);
    return res;
}

namespace {

double cosine(std::span<const double> a, std::span<const double> b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace

int assign(const PrototypeBank& bank, std::span<const double> feature, int class_id) {
    int best = -1;
    double best_sim = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < bank.prototypes.dim(0); ++j) {
        if (bank.class_of[static_cast<std::size_t>(j)] != class_id) continue;
        const double sim = cosine(bank.prototype(j), feature);
        if (sim > best_sim) {
            best_sim = sim;
            best = j;
        }
    }
    if (best < 0) throw std::invalid_argument("assign: class has no prototypes");
    return best;
}

void update(PrototypeBank& bank, std::span<const PixelFeatureSample> samples, bool per_pixel) {
    const int dim = bank.feature_dim();
    const double a = bank.alpha;

    if (per_pixel) {
        for (const auto& s : samples) {
            if (!s.valid) continue;
            const int j = assign(bank, {s.feature, static_cast<std::size_t>(dim)}, s.class_id);
            double* p = bank.prototypes.data() + static_cast<std::int64_t>(j) * dim;
            for (int d = 0; d < dim; ++d) p[d] = a * p[d] + (1.0 - a) * s.feature[d];
            bank.update_counts[static_cast<std::size_t>(j)]++;
        }
        return;
    }

    const int n_protos = bank.prototypes.dim(0);
    std::vector<double> sums(static_cast<std::size_t>(n_protos) * dim, 0.0);
    std::vector<std::int64_t> counts(static_cast<std::size_t>(n_protos), 0);
    for (const auto& s : samples) {
        if (!s.valid) continue;
        const int j = assign(bank, {s.feature, static_cast<std::size_t>(dim)}, s.class_id);
        double* acc = sums.data() + static_cast<std::int64_t>(j) * dim;
        for (int d = 0; d < dim; ++d) acc[d] += s.feature[d];
        counts[static_cast<std::size_t>(j)]++;
    }
    for (int j = 0; j < n_protos; ++j) {
        if (counts[static_cast<std::size_t>(j)] == 0) continue;
        const double inv = 1.0 / static_cast<double>(counts[static_cast<std::size_t>(j)]);
        double* p = bank.prototypes.data() + static_cast<std::int64_t>(j) * dim;
        const double* acc = sums.data() + static_cast<std::int64_t>(j) * dim;
        for (int d = 0; d < dim; ++d) p[d] = a * p[d] + (1.0 - a) * (acc[d] * inv);
        bank.update_counts[static_cast<std::size_t>(j)]++;
    }
}

PrototypeBank init_bank(const Model& warmup_model, const DatasetSpec& spec,
                        const std::vector<SegSample>& labeled_set, int k, int pixels_per_class, double alpha,
                        std::uint64_t seed) {
    if (labeled_set.empty()) throw std::invalid_argument("init_bank: empty labeled set");
    const int classes = spec.classes;
    const int dim = warmup_model.cfg.feature_dim;

    // collect per-class pixel features from the labeled images
    std::vector<std::vector<double>> class_feats(static_cast<std::size_t>(classes));
    std::vector<std::int64_t> class_totals(static_cast<std::size_t>(classes), 0);
    for (const auto& s : labeled_set)
        for (std::uint8_t l : s.label) class_totals[l]++;
    for (int c = 0; c < classes; ++c)
        if (class_totals[static_cast<std::size_t>(c)] == 0)
            throw std::runtime_error("init_bank: class " + std::to_string(c) + " absent from the labeled set");

    // reservoir-sample up to pixels_per_class features per class, seeded
    std::vector<Rng> class_rng;
    class_rng.reserve(static_cast<std::size_t>(classes));
    for (int c = 0; c < classes; ++c) class_rng.emplace_back(mix_seed(seed, 0x1B17ULL, static_cast<std::uint64_t>(c)));
    std::vector<std::int64_t> seen(static_cast<std::size_t>(classes), 0);

    for (const auto& s : labeled_set) {
        Tensor image = Tensor::from({1, 3, s.height, s.width}, s.image);
        Tensor fmap = warmup_model.features(image);
        const std::int64_t pixels = static_cast<std::int64_t>(s.height) * s.width;
        for (std::int64_t p = 0; p < pixels; ++p) {
            const int c = s.label[static_cast<std::size_t>(p)];
            auto& feats = class_feats[static_cast<std::size_t>(c)];
            auto& cnt = seen[static_cast<std::size_t>(c)];
            std::int64_t slot = -1;
            if (cnt < pixels_per_class) {
                feats.resize(feats.size() + static_cast<std::size_t>(dim));
                slot = cnt;
            } else {
                const std::int64_t r = class_rng[static_cast<std::size_t>(c)].uniform_int(0, cnt);
                if (r < pixels_per_class) slot = r;
            }
            ++cnt;
            if (slot < 0) continue;
            double* dst = feats.data() + slot * dim;
            for (int d = 0; d < dim; ++d) dst[d] = fmap.data()[static_cast<std::int64_t>(d) * pixels + p];
        }
    }

    PrototypeBank bank;
    bank.classes = classes;
    bank.k = k;
    bank.alpha = alpha;
    bank.prototypes = Tensor::zeros({classes * k, dim});
    bank.class_of.resize(static_cast<std::size_t>(classes) * k);
    bank.update_counts.assign(static_cast<std::size_t>(classes) * k, 0);

    for (int c = 0; c < classes; ++c) {
        const auto& feats = class_feats[static_cast<std::size_t>(c)];
        const int n = static_cast<int>(feats.size()) / dim;
        KmeansResult km = kmeans(feats, n, dim, k, mix_seed(seed, 0x13EAULL, static_cast<std::uint64_t>(c)));
        for (int j = 0; j < k; ++j) {
            const int row = c * k + j;
            bank.class_of[static_cast<std::size_t>(row)] = c;
            std::copy_n(km.centroids.data() + static_cast<std::int64_t>(j) * dim, dim,
                        bank.prototypes.data() + static_cast<std::int64_t>(row) * dim);
        }
    }
    return bank;
}

void export_bank_csv(const PrototypeBank& bank, std::ostream& out) {
    out << "class_id,proto_index";
    for (int d = 0; d < bank.feature_dim(); ++d) out << ",f" << d;
    out << "\n";
    for (int j = 0; j < bank.prototypes.dim(0); ++j) {
        out << bank.class_of[static_cast<std::size_t>(j)] << ',' << j % bank.k;
        const auto p = bank.prototype(j);
        char buf[32];
        for (double v : p) {
            std::snprintf(buf, sizeof(buf), "%.12g", v);
            out << ',' << buf;
        }
        out << "\n";
    }
}

}  // namespace pseg
