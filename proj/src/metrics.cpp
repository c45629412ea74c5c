#include "pseg/metrics.hpp"

#include <cmath>
#include <iostream>
#include <limits>
#include <map>
#include <stdexcept>

namespace pseg {

double miou(const ConfusionMatrix& cm) {
    if (cm.total() == 0) throw std::invalid_argument("miou: empty confusion matrix");
    double sum = 0.0;
    int counted = 0;
    for (int c = 0; c < cm.classes; ++c) {
        const double tp = static_cast<double>(cm.at(c, c));
        double fp = 0.0, fn = 0.0;
        for (int o = 0; o < cm.classes; ++o) {
            if (o == c) continue;
            fp += static_cast<double>(cm.at(o, c));
            fn += static_cast<double>(cm.at(c, o));
        }
        const double uni = tp + fp + fn;
        if (uni == 0.0) continue;
        sum += tp / uni;
        ++counted;
    }
    if (counted == 0) throw std::invalid_argument("miou: every class has zero union");
    return sum / counted;
}

PseudoLabelQuality pseudo_label_quality(std::span<const std::uint8_t> pseudo, std::span<const std::uint8_t> valid,
                                        std::span<const std::uint8_t> truth) {
    if (pseudo.size() != valid.size() || pseudo.size() != truth.size())
        throw std::invalid_argument("pseudo_label_quality: size mismatch");
    std::uint64_t n_valid = 0, n_correct = 0;
    for (std::size_t i = 0; i < pseudo.size(); ++i) {
        if (!valid[i]) continue;
        ++n_valid;
        if (pseudo[i] == truth[i]) ++n_correct;
    }
    PseudoLabelQuality q;
    const double total = static_cast<double>(pseudo.size());
    q.coverage = total > 0 ? static_cast<double>(n_valid) / total : 0.0;
    q.recall = total > 0 ? static_cast<double>(n_correct) / total : 0.0;
    q.precision = n_valid > 0 ? static_cast<double>(n_correct) / static_cast<double>(n_valid)
                              : std::numeric_limits<double>::quiet_NaN();
    return q;
}

DiscriminationStats discrimination(const std::vector<double>& features, int n, int dim,
                                   const std::vector<int>& class_ids) {
    if (n < 1 || static_cast<std::size_t>(n) != class_ids.size() ||
        features.size() != static_cast<std::size_t>(n) * dim)
        throw std::invalid_argument("discrimination: inconsistent sizes");

    std::map<int, std::vector<int>> members;
    for (int i = 0; i < n; ++i) members[class_ids[static_cast<std::size_t>(i)]].push_back(i);
    if (members.size() < 2) throw std::invalid_argument("discrimination: needs at least 2 classes present");

    // class means and the count-weighted global mean
    std::map<int, std::vector<double>> mean;
    std::vector<double> global(static_cast<std::size_t>(dim), 0.0);
    for (const auto& [c, rows] : members) {
        auto& m = mean[c];
        m.assign(static_cast<std::size_t>(dim), 0.0);
        for (int i : rows)
            for (int d = 0; d < dim; ++d) m[static_cast<std::size_t>(d)] += features[static_cast<std::size_t>(i) * dim + d];
        for (int d = 0; d < dim; ++d) {
            m[static_cast<std::size_t>(d)] /= static_cast<double>(rows.size());
            global[static_cast<std::size_t>(d)] += m[static_cast<std::size_t>(d)] * static_cast<double>(rows.size());
        }
    }
    for (double& v : global) v /= static_cast<double>(n);

    DiscriminationStats st;

    // intra: mean over (non-singleton) classes of tr(population covariance)
    double intra_sum = 0.0;
    int intra_classes = 0;
    for (const auto& [c, rows] : members) {
        if (rows.size() < 2) {
            st.skipped_singletons++;
            continue;
        }
        const auto& m = mean[c];
        double tr = 0.0;
        for (int i : rows)
            for (int d = 0; d < dim; ++d) {
                const double r = features[static_cast<std::size_t>(i) * dim + d] - m[static_cast<std::size_t>(d)];
                tr += r * r;
            }
        intra_sum += tr / static_cast<double>(rows.size());
        ++intra_classes;
    }
    st.intra_trace = intra_classes > 0 ? intra_sum / intra_classes : 0.0;
    if (st.skipped_singletons > 0)
        std::cerr << "discrimination: skipped " << st.skipped_singletons << " singleton class(es) in intra term\n";

    // inter: count-weighted scatter of class means around the global mean
    double inter = 0.0;
    for (const auto& [c, rows] : members) {
        const auto& m = mean[c];
        double tr = 0.0;
        for (int d = 0; d < dim; ++d) {
            const double r = m[static_cast<std::size_t>(d)] - global[static_cast<std::size_t>(d)];
            tr += r * r;
        }
        inter += tr * static_cast<double>(rows.size());
    }
    st.inter_trace = inter / static_cast<double>(n);

    st.ratio = st.intra_trace > 0.0 ? st.inter_trace / st.intra_trace : std::numeric_limits<double>::quiet_NaN();
    return st;
}

}  // namespace pseg
