#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <span>
#include <variant>

#include "evocomp/core.hpp"

namespace evocomp {

struct NoRestriction {};
struct TopK {
    std::size_t k = 0;
};
struct TopFraction {
    double fraction = 1.0;
};

/// Which groups stay searchable after semantic grouping.
struct GroupingConfig {
    std::variant<NoRestriction, TopK, TopFraction> restriction;
};

/// Cosine similarity; 0 when either vector has zero norm.
inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw Error(Errc::dimension_mismatch,
                    "cosine of vectors with lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

/// argmax_j cos(v, e_j); ties go to the lowest anchor index.
inline std::size_t nearest_anchor(std::span<const double> v, const AnchorSet& anchors) {
    if (anchors.size() == 0) throw Error(Errc::empty_input, "empty anchor set");
    std::size_t best = 0;
    double best_sim = cosine_similarity(v, anchors.anchors.row(0));
    for (std::size_t j = 1; j < anchors.size(); ++j) {
        const double s = cosine_similarity(v, anchors.anchors.row(j));
        if (s > best_sim) {
            best_sim = s;
            best = j;
        }
    }
    return best;
}

inline GroupPartition partition(const Sample& sample, const AnchorSet& anchors) {
    validate_sample(sample);
    validate_anchors(anchors);
    if (anchors.anchors.cols != sample.d())
        throw Error(Errc::dimension_mismatch, "anchor width " + std::to_string(anchors.anchors.cols) +
                                                  " vs sample width " + std::to_string(sample.d()));
    // Visiting tokens in index order makes the first-seen order of anchors equal
    // to the order of each group's smallest member.
    std::map<std::size_t, std::size_t> slot_of_anchor;
    GroupPartition out;
    out.n = sample.n();
    for (std::uint32_t i = 0; i < sample.n(); ++i) {
        const std::size_t a = nearest_anchor(sample.visual.row(i), anchors);
        auto [it, inserted] = slot_of_anchor.try_emplace(a, out.groups.size());
        if (inserted) out.groups.push_back(Group{static_cast<std::uint32_t>(a), {}, true});
        out.groups[it->second].members.push_back(i);
    }
    return out;
}

/// K implied by a restriction for a partition with `s` groups.
inline std::size_t restriction_k(const GroupingConfig& cfg, std::size_t s) {
    return std::visit(
        [s](const auto& r) -> std::size_t {
            using R = std::decay_t<decltype(r)>;
            if constexpr (std::is_same_v<R, NoRestriction>) {
                return s;
            } else if constexpr (std::is_same_v<R, TopK>) {
                if (r.k == 0) throw Error(Errc::invalid_config, "top_k must be positive");
                return r.k;
            } else {
                if (!(r.fraction > 0.0 && r.fraction <= 1.0))
                    throw Error(Errc::invalid_config, "top_fraction must lie in (0, 1]");
                const auto k = static_cast<std::size_t>(std::round(r.fraction * static_cast<double>(s)));
                return std::clamp<std::size_t>(k, 1, std::max<std::size_t>(s, 1));
            }
        },
        cfg.restriction);
}

/// Marks the K largest groups active (size ties: earlier group wins). Membership is untouched.
inline GroupPartition restrict_top_groups(GroupPartition p, const GroupingConfig& cfg) {
    if (std::holds_alternative<NoRestriction>(cfg.restriction)) return p;
    const std::size_t k = restriction_k(cfg, p.groups.size());
    std::vector<std::size_t> order(p.groups.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&p](std::size_t a, std::size_t b) {
        return p.groups[a].members.size() > p.groups[b].members.size();
    });
    for (auto& g : p.groups) g.active = false;
    for (std::size_t r = 0; r < std::min(k, order.size()); ++r) p.groups[order[r]].active = true;
    return p;
}

}  // namespace evocomp
