#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "evocomp/error.hpp"
#include "evocomp/random.hpp"

namespace evocomp {

/// Dense row-major matrix of 64-bit reals.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    static Matrix from_rows(const std::vector<std::vector<double>>& rs) {
        Matrix m(rs.size(), rs.empty() ? 0 : rs.front().size());
        for (std::size_t i = 0; i < rs.size(); ++i) {
            if (rs[i].size() != m.cols) throw Error(Errc::dimension_mismatch, "ragged rows");
            std::copy(rs[i].begin(), rs[i].end(), m.data.begin() + static_cast<std::ptrdiff_t>(i * m.cols));
        }
        return m;
    }

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    bool operator==(const Matrix&) const = default;
};

struct Sample {
    std::string id;
    Matrix visual;  // n x d
    Matrix text;    // m x d
    std::map<std::string, std::string> meta;

    std::size_t n() const { return visual.rows; }
    std::size_t m() const { return text.rows; }
    std::size_t d() const { return visual.cols; }
};

struct AnchorSet {
    Matrix anchors;  // c x d
    std::size_t size() const { return anchors.rows; }
};

struct Group {
    std::uint32_t anchor_id = 0;
    std::vector<std::uint32_t> members;  // ascending visual-token indices
    bool active = true;

    bool operator==(const Group&) const = default;
};

/// Disjoint cover of {0..n-1}; groups ordered by smallest member.
struct GroupPartition {
    std::size_t n = 0;
    std::vector<Group> groups;

    std::size_t active_count() const {
        return static_cast<std::size_t>(
            std::count_if(groups.begin(), groups.end(), [](const Group& g) { return g.active; }));
    }

    /// Indices into `groups` of the active groups, in canonical order.
    std::vector<std::size_t> active_groups() const {
        std::vector<std::size_t> out;
        for (std::size_t j = 0; j < groups.size(); ++j)
            if (groups[j].active) out.push_back(j);
        return out;
    }

    bool operator==(const GroupPartition&) const = default;
};

struct Mask {
    std::vector<std::uint8_t> bits;

    std::size_t size() const { return bits.size(); }
    std::size_t retained() const {
        return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
    }
    bool operator==(const Mask&) const = default;
    auto operator<=>(const Mask&) const = default;
};

/// Position chosen within each active group's member list, in canonical group order.
using Choices = std::vector<std::uint32_t>;

struct LabelRecord {
    std::string sample_id;
    Mask mask;
    double loss = 0.0;
    std::string partition_digest;
    std::string scorer_id;
    std::uint64_t seed = 0;

    bool operator==(const LabelRecord&) const = default;
};

inline void validate_sample(const Sample& s) {
    if (s.visual.rows == 0) throw Error(Errc::empty_input, "sample '" + s.id + "' has no visual tokens");
    if (s.visual.cols == 0) throw Error(Errc::dimension_mismatch, "sample '" + s.id + "' has zero width");
    if (s.visual.data.size() != s.visual.rows * s.visual.cols ||
        s.text.data.size() != s.text.rows * s.text.cols)
        throw Error(Errc::dimension_mismatch, "sample '" + s.id + "' storage does not match its shape");
    if (s.text.rows > 0 && s.text.cols != s.visual.cols)
        throw Error(Errc::dimension_mismatch, "sample '" + s.id + "': visual width " +
                                                  std::to_string(s.visual.cols) + " vs text width " +
                                                  std::to_string(s.text.cols));
    auto finite = [](const Matrix& m) {
        return std::all_of(m.data.begin(), m.data.end(), [](double x) { return std::isfinite(x); });
    };
    if (!finite(s.visual) || !finite(s.text))
        throw Error(Errc::non_finite, "sample '" + s.id + "' contains a non-finite entry");
}

inline void validate_anchors(const AnchorSet& a) {
    if (a.anchors.rows == 0) throw Error(Errc::empty_input, "anchor set is empty");
    for (std::size_t j = 0; j < a.anchors.rows; ++j) {
        auto r = a.anchors.row(j);
        if (std::all_of(r.begin(), r.end(), [](double x) { return x == 0.0; }))
            throw Error(Errc::invalid_config, "anchor " + std::to_string(j) + " is the zero vector");
        if (!std::all_of(r.begin(), r.end(), [](double x) { return std::isfinite(x); }))
            throw Error(Errc::non_finite, "anchor " + std::to_string(j) + " is not finite");
    }
}

inline void validate_partition(const GroupPartition& p) {
    std::vector<std::uint8_t> seen(p.n, 0);
    std::uint32_t prev_first = 0;
    bool any_active = false;
    for (std::size_t j = 0; j < p.groups.size(); ++j) {
        const auto& g = p.groups[j];
        if (g.members.empty()) throw Error(Errc::invalid_config, "empty group");
        if (!std::is_sorted(g.members.begin(), g.members.end()))
            throw Error(Errc::invalid_config, "group members not sorted");
        if (j > 0 && g.members.front() <= prev_first)
            throw Error(Errc::invalid_config, "groups not ordered by smallest member");
        prev_first = g.members.front();
        for (auto i : g.members) {
            if (i >= p.n || seen[i]) throw Error(Errc::invalid_config, "groups overlap or exceed n");
            seen[i] = 1;
        }
        any_active = any_active || g.active;
    }
    if (std::find(seen.begin(), seen.end(), 0) != seen.end())
        throw Error(Errc::invalid_config, "groups do not cover every token");
    if (!any_active) throw Error(Errc::invalid_config, "no active group");
}

/// Stable 64-bit digest of the group structure, rendered as 16 hex digits.
inline std::string partition_digest(const GroupPartition& p) {
    std::uint64_t h = fnv1a64("evocomp-partition");
    auto mix = [&h](std::uint64_t v) {
        for (int b = 0; b < 8; ++b) {
            h ^= (v >> (8 * b)) & 0xffU;
            h *= 0x100000001b3ULL;
        }
    };
    mix(p.n);
    mix(p.groups.size());
    for (const auto& g : p.groups) {
        mix(g.anchor_id);
        mix(g.active ? 1 : 0);
        mix(g.members.size());
        for (auto i : g.members) mix(i);
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline Mask compose_mask(const GroupPartition& p, std::span<const std::uint32_t> choices) {
    const auto active = p.active_groups();
    if (choices.size() != active.size())
        throw Error(Errc::length_mismatch, "expected " + std::to_string(active.size()) +
                                               " choices, got " + std::to_string(choices.size()));
    Mask m{std::vector<std::uint8_t>(p.n, 0)};
    for (std::size_t k = 0; k < active.size(); ++k) {
        const auto& members = p.groups[active[k]].members;
        if (choices[k] >= members.size())
            throw Error(Errc::out_of_range, "choice " + std::to_string(choices[k]) + " for group of size " +
                                                std::to_string(members.size()));
        m.bits[members[choices[k]]] = 1;
    }
    return m;
}

/// Checks the one-hot-per-active-group structure of `m` against `p`.
inline bool mask_valid(const GroupPartition& p, const Mask& m) {
    if (m.bits.size() != p.n) return false;
    for (const auto& g : p.groups) {
        std::size_t ones = 0;
        for (auto i : g.members) {
            if (m.bits[i] > 1) return false;
            ones += m.bits[i];
        }
        if (ones != (g.active ? 1u : 0u)) return false;
    }
    return true;
}

/// Inverse of compose_mask: the position of the retained member in every active group.
inline Choices decompose_mask(const GroupPartition& p, const Mask& m) {
    if (!mask_valid(p, m)) throw Error(Errc::invalid_config, "mask is not one-hot per active group");
    Choices out;
    for (const auto& g : p.groups) {
        if (!g.active) continue;
        for (std::uint32_t k = 0; k < g.members.size(); ++k)
            if (m.bits[g.members[k]]) {
                out.push_back(k);
                break;
            }
    }
    return out;
}

struct ReducedVisual {
    Matrix rows;
    std::vector<std::size_t> kept;
};

inline ReducedVisual apply_mask(const Sample& s, const Mask& m) {
    if (m.bits.size() != s.n())
        throw Error(Errc::length_mismatch, "mask length " + std::to_string(m.bits.size()) + " vs n=" +
                                               std::to_string(s.n()));
    ReducedVisual out;
    for (std::size_t i = 0; i < m.bits.size(); ++i)
        if (m.bits[i]) out.kept.push_back(i);
    out.rows = Matrix(out.kept.size(), s.d());
    for (std::size_t r = 0; r < out.kept.size(); ++r) {
        auto src = s.visual.row(out.kept[r]);
        std::copy(src.begin(), src.end(), out.rows.row(r).begin());
    }
    return out;
}

}  // namespace evocomp
