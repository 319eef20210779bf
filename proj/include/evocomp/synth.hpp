#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "evocomp/core.hpp"
#include "evocomp/grouping.hpp"
#include "evocomp/scorer.hpp"

// Synthetic datasets whose grouping and optimal masks are known by construction.
namespace evocomp::synth {

enum class Family { planted, pooled, text_keyed };

inline std::string_view family_name(Family f) {
    switch (f) {
        case Family::planted: return "planted";
        case Family::pooled: return "pooled";
        case Family::text_keyed: return "text-keyed";
    }
    return "?";
}

inline Family parse_family(std::string_view s) {
    for (auto f : {Family::planted, Family::pooled, Family::text_keyed})
        if (family_name(f) == s) return f;
    throw Error(Errc::invalid_config, "unknown family '" + std::string(s) + "'");
}

struct GenConfig {
    Family family = Family::planted;
    std::size_t samples = 512;
    std::size_t tokens = 24;       // n
    std::size_t groups = 6;        // s
    std::size_t dim = 64;          // d
    std::size_t text_tokens = 8;   // m
    std::size_t anchors = 0;       // c; 0 selects 2 * groups (at least 8)
    double noise = 0.15;           // max norm of the per-token offset from its anchor
    double max_coherence = 0.5;    // max |cos| between any two anchors
    double marker = 0.6;           // planted-token salience along the reserved coordinate
    double marker_jitter = 0.25;   // uniform jitter on every token's reserved coordinate
    std::uint64_t seed = 1;
};

struct Generated {
    AnchorSet anchors;
    std::vector<Sample> samples;
    std::vector<GroupPartition> truth;   // generator's own grouping, all groups active
    std::vector<Mask> planted;           // planted-family optimum per sample (empty for pooled)
};

/// Coordinates reserved for salience/key features; anchors are zero there.
inline std::size_t reserved_coords(Family f) { return f == Family::text_keyed ? 2 : 1; }

inline void validate(const GenConfig& c) {
    if (c.groups == 0) throw Error(Errc::invalid_config, "groups must be >= 1");
    if (c.tokens < c.groups) throw Error(Errc::invalid_config, "tokens must be >= groups");
    if (c.family == Family::text_keyed && c.tokens < 2 * c.groups)
        throw Error(Errc::invalid_config, "text-keyed family needs at least two tokens per group");
    if (c.dim < reserved_coords(c.family) + 2) throw Error(Errc::invalid_config, "dim too small");
    if (c.family != Family::planted && c.text_tokens == 0)
        throw Error(Errc::invalid_config, "this family needs text tokens");
    if (!(c.noise >= 0.0 && c.noise < (1.0 - c.max_coherence) / 2.0))
        throw Error(Errc::invalid_config, "noise must stay below half the anchor separation margin");
}

inline std::size_t anchor_count(const GenConfig& c) { return c.anchors ? c.anchors : std::max<std::size_t>(8, 2 * c.groups); }

/// Unit anchors with pairwise |cos| <= max_coherence, zero on the reserved coordinates.
inline AnchorSet make_anchors(const GenConfig& c) {
    const std::size_t count = anchor_count(c), free = c.dim - reserved_coords(c.family);
    if (count < c.groups) throw Error(Errc::invalid_config, "need at least as many anchors as groups");
    Rng rng(keyed_hash("anchors", c.seed, 0));
    AnchorSet a{Matrix(count, c.dim)};
    for (std::size_t j = 0; j < count; ++j) {
        for (std::size_t attempt = 0;; ++attempt) {
            if (attempt > 10'000)
                throw Error(Errc::invalid_config, "cannot place anchors with the requested coherence");
            double norm = 0.0;
            for (std::size_t e = 0; e < free; ++e) {
                a.anchors(j, e) = standard_normal(rng);
                norm += a.anchors(j, e) * a.anchors(j, e);
            }
            norm = std::sqrt(norm);
            for (std::size_t e = 0; e < free; ++e) a.anchors(j, e) /= norm;
            bool ok = true;
            for (std::size_t k = 0; k < j && ok; ++k)
                ok = std::abs(cosine_similarity(a.anchors.row(j), a.anchors.row(k))) <= c.max_coherence;
            if (ok) break;
        }
    }
    return a;
}

inline std::string sample_id(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "s%06zu", i);
    return buf;
}

/// Random offset of norm <= radius in the first `free` coordinates.
inline void add_ball_noise(std::span<double> row, std::size_t free, double radius, Rng& rng) {
    std::vector<double> dir(free);
    double norm = 0.0;
    for (auto& x : dir) {
        x = standard_normal(rng);
        norm += x * x;
    }
    norm = std::sqrt(norm);
    const double r = radius * uniform01(rng);
    for (std::size_t e = 0; e < free; ++e) row[e] += r * dir[e] / norm;
}

/// Builds one sample: tokens scattered around `groups` distinct anchors.
/// Anchor and noise geometry guarantee that grouping by nearest anchor
/// recovers the generator's groups: cos to the own anchor is at least
/// (1 - noise)/|v| while cos to any other is at most (coherence + noise)/|v|.
inline Generated generate(const GenConfig& c) {
    validate(c);
    Generated out;
    out.anchors = make_anchors(c);
    const std::size_t free = c.dim - reserved_coords(c.family);
    for (std::size_t i = 0; i < c.samples; ++i) {
        Sample s;
        s.id = sample_id(i);
        Rng rng(keyed_hash(s.id, c.seed, 1));

        std::vector<std::size_t> anchor_ids(out.anchors.size());
        std::iota(anchor_ids.begin(), anchor_ids.end(), 0);
        for (std::size_t k = 0; k < c.groups; ++k)
            std::swap(anchor_ids[k], anchor_ids[k + uniform_index(rng, anchor_ids.size() - k)]);

        const std::size_t min_size = c.family == Family::text_keyed ? 2 : 1;
        std::vector<std::size_t> sizes(c.groups, min_size);
        for (std::size_t extra = c.tokens - min_size * c.groups; extra > 0; --extra)
            ++sizes[uniform_index(rng, c.groups)];
        std::vector<std::size_t> owner;
        for (std::size_t g = 0; g < c.groups; ++g) owner.insert(owner.end(), sizes[g], g);
        for (std::size_t k = owner.size(); k > 1; --k) std::swap(owner[k - 1], owner[uniform_index(rng, k)]);

        s.visual = Matrix(c.tokens, c.dim);
        for (std::size_t t = 0; t < c.tokens; ++t) {
            auto row = s.visual.row(t);
            const auto anchor = out.anchors.anchors.row(anchor_ids[owner[t]]);
            std::copy(anchor.begin(), anchor.end(), row.begin());
            add_ball_noise(row, free, c.noise, rng);
            for (std::size_t e = free; e < c.dim; ++e) row[e] = c.marker_jitter * (2.0 * uniform01(rng) - 1.0);
        }
        s.text = Matrix(c.text_tokens, c.dim);
        for (auto& x : s.text.data) x = 0.5 * standard_normal(rng);

        GroupPartition truth;
        truth.n = c.tokens;
        {
            std::vector<std::vector<std::uint32_t>> members(c.groups);
            for (std::uint32_t t = 0; t < c.tokens; ++t) members[owner[t]].push_back(t);
            for (std::size_t g = 0; g < c.groups; ++g)
                truth.groups.push_back(Group{static_cast<std::uint32_t>(anchor_ids[g]), members[g], true});
            std::sort(truth.groups.begin(), truth.groups.end(),
                      [](const Group& a, const Group& b) { return a.members.front() < b.members.front(); });
        }

        if (c.family == Family::planted || c.family == Family::text_keyed) {
            const auto inst = derive_planted_instance(s.id, c.seed, truth);
            const Mask best = planted_mask(truth, inst);
            if (c.family == Family::planted) {
                for (std::size_t t = 0; t < c.tokens; ++t)
                    if (best.bits[t]) s.visual(t, c.dim - 1) += c.marker;
            } else {
                // Two tagged tokens per group; the text names which tag is wanted.
                const bool key_a = bernoulli(rng, 0.5);
                const std::size_t want = key_a ? c.dim - 2 : c.dim - 1, other = key_a ? c.dim - 1 : c.dim - 2;
                for (std::size_t j = 0; j < truth.groups.size(); ++j) {
                    const auto& mem = truth.groups[j].members;
                    s.visual(mem[inst.planted[j]], want) += c.marker;
                    s.visual(mem[(inst.planted[j] + 1) % mem.size()], other) += c.marker;
                }
                for (std::size_t r = 0; r < s.text.rows; ++r) s.text(r, want) += 2.0;
            }
            out.planted.push_back(best);
        }
        out.truth.push_back(std::move(truth));
        out.samples.push_back(std::move(s));
    }
    return out;
}

}  // namespace evocomp::synth
