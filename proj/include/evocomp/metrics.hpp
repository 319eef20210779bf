#pragma once

#include <cstddef>
#include <vector>

#include "evocomp/core.hpp"

namespace evocomp {

struct RetentionScores {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

/// Precision/recall/F1 of `predicted` against `reference`; empty sets score 0.
inline RetentionScores retention_scores(const Mask& predicted, const Mask& reference) {
    if (predicted.bits.size() != reference.bits.size()) throw Error(Errc::length_mismatch, "mask lengths differ");
    std::size_t tp = 0, pred = 0, ref = 0;
    for (std::size_t i = 0; i < predicted.bits.size(); ++i) {
        tp += predicted.bits[i] && reference.bits[i];
        pred += predicted.bits[i];
        ref += reference.bits[i];
    }
    RetentionScores s;
    s.precision = pred ? static_cast<double>(tp) / static_cast<double>(pred) : 0.0;
    s.recall = ref ? static_cast<double>(tp) / static_cast<double>(ref) : 0.0;
    s.f1 = (s.precision + s.recall) > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    return s;
}

/// Running macro average over samples.
struct ScoreAverage {
    RetentionScores sum;
    std::size_t count = 0;

    void add(const RetentionScores& s) {
        sum.precision += s.precision;
        sum.recall += s.recall;
        sum.f1 += s.f1;
        ++count;
    }
    RetentionScores mean() const {
        if (count == 0) return {};
        const auto c = static_cast<double>(count);
        return {sum.precision / c, sum.recall / c, sum.f1 / c};
    }
};

/// r random distinct positions out of n.
inline Mask random_top_r(std::size_t n, std::size_t r, Rng& rng) {
    if (r > n) throw Error(Errc::out_of_range, "r exceeds n");
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    Mask m{std::vector<std::uint8_t>(n, 0)};
    for (std::size_t k = 0; k < r; ++k) {
        std::swap(idx[k], idx[k + uniform_index(rng, n - k)]);
        m.bits[idx[k]] = 1;
    }
    return m;
}

}  // namespace evocomp
