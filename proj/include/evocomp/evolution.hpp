#pragma once

#include <algorithm>
#include <functional>
#include <numeric>
#include <set>
#include <span>
#include <vector>

#include "evocomp/core.hpp"
#include "evocomp/scorer.hpp"

namespace evocomp {

struct EvoConfig {
    std::size_t population_size = 48;  // q
    std::size_t parent_count = 12;     // p
    std::size_t iterations = 10;       // L
    double crossover_prob = 0.9;
    double mutation_prob = 0.2;
    std::uint64_t seed = 0;
    /// Rejected duplicate children tolerated per generation before duplicates
    /// are accepted; 0 selects 100 * population_size.
    std::size_t max_dedup_attempts = 0;
    /// Concurrent scorer calls per population.
    std::size_t workers = 1;

    std::size_t dedup_cap() const { return max_dedup_attempts ? max_dedup_attempts : 100 * population_size; }
};

inline void validate(const EvoConfig& c) {
    if (c.population_size == 0) throw Error(Errc::invalid_config, "population size must be >= 1");
    if (c.parent_count == 0 || c.parent_count > c.population_size)
        throw Error(Errc::invalid_config, "parent count must satisfy 1 <= p <= q");
    auto prob_ok = [](double x) { return x >= 0.0 && x <= 1.0; };
    if (!prob_ok(c.crossover_prob) || !prob_ok(c.mutation_prob))
        throw Error(Errc::invalid_config, "probabilities must lie in [0, 1]");
}

/// One random member per active group.
inline Choices random_choices(const GroupPartition& p, Rng& rng) {
    Choices c;
    for (const auto& g : p.groups)
        if (g.active) c.push_back(static_cast<std::uint32_t>(uniform_index(rng, g.members.size())));
    return c;
}

inline std::vector<Mask> init_population(const GroupPartition& p, std::size_t q, Rng& rng) {
    std::vector<Mask> out;
    out.reserve(q);
    for (std::size_t i = 0; i < q; ++i) out.push_back(compose_mask(p, random_choices(p, rng)));
    return out;
}

/// First floor(s'/2) sub-masks from `a`, the rest from `b`.
inline Choices crossover_choices(const Choices& a, const Choices& b) {
    if (a.size() != b.size()) throw Error(Errc::length_mismatch, "crossover of incompatible masks");
    Choices child = b;
    std::copy_n(a.begin(), a.size() / 2, child.begin());
    return child;
}

inline Mask crossover(const Mask& a, const Mask& b, const GroupPartition& p) {
    return compose_mask(p, crossover_choices(decompose_mask(p, a), decompose_mask(p, b)));
}

/// Per active group with probability `prob`, shifts the retained position one
/// step left or right; at an end the only valid direction is taken.
inline void mutate_choices(Choices& c, const GroupPartition& p, double prob, Rng& rng) {
    std::size_t k = 0;
    for (const auto& g : p.groups) {
        if (!g.active) continue;
        const auto size = static_cast<std::uint32_t>(g.members.size());
        auto& pos = c[k++];
        if (!bernoulli(rng, prob) || size == 1) continue;
        if (pos == 0)
            pos = 1;
        else if (pos + 1 == size)
            pos = size - 2;
        else
            pos = bernoulli(rng, 0.5) ? pos - 1 : pos + 1;
    }
}

inline Mask mutate(const Mask& m, const GroupPartition& p, double prob, Rng& rng) {
    Choices c = decompose_mask(p, m);
    mutate_choices(c, p, prob, rng);
    return compose_mask(p, c);
}

/// Indices of the `count` smallest losses; ties keep list order.
inline std::vector<std::size_t> lowest_loss_indices(std::span<const double> losses, std::size_t count) {
    std::vector<std::size_t> idx(losses.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return losses[a] < losses[b]; });
    idx.resize(std::min(count, idx.size()));
    return idx;
}

inline std::vector<Mask> select_parents(std::span<const Mask> candidates, std::span<const double> losses,
                                        std::size_t p) {
    if (candidates.empty()) throw Error(Errc::empty_input, "no candidates to select from");
    if (candidates.size() != losses.size()) throw Error(Errc::length_mismatch, "candidates vs losses");
    if (p == 0) throw Error(Errc::invalid_config, "parent count must be >= 1");
    std::vector<Mask> out;
    for (auto i : lowest_loss_indices(losses, p)) out.push_back(candidates[i]);
    return out;
}

struct IterationStats {
    std::size_t iteration = 0;  // 0 = initial population
    double best_parent_loss = 0.0;
    std::size_t evaluations = 0;  // cumulative
};

struct SearchResult {
    LabelRecord record;
    std::vector<IterationStats> history;
    std::size_t evaluations = 0;
    std::size_t duplicates_accepted = 0;
};

using ProgressFn = std::function<void(const std::string& sample_id, const IterationStats&)>;

/// Elitist evolutionary search for the loss-minimising one-hot-per-group mask.
inline SearchResult search(const Sample& sample, const GroupPartition& partition, const Scorer& scorer,
                           const EvoConfig& cfg, const ProgressFn& progress = {}) {
    validate(cfg);
    validate_partition(partition);
    if (partition.n != sample.n()) throw Error(Errc::length_mismatch, "partition does not match sample");

    Rng rng(keyed_hash(sample.id, cfg.seed, 0));
    SearchResult result;

    std::vector<Choices> population;
    population.reserve(cfg.population_size);
    std::set<Choices> seen;
    for (std::size_t i = 0; i < cfg.population_size; ++i) {
        population.push_back(random_choices(partition, rng));
        seen.insert(population.back());
    }

    auto evaluate = [&](const std::vector<Choices>& pop) {
        std::vector<Mask> masks;
        masks.reserve(pop.size());
        for (const auto& c : pop) masks.push_back(compose_mask(partition, c));
        auto losses = scorer.score_batch(sample, partition, masks, cfg.workers);
        result.evaluations += losses.size();
        return losses;
    };

    std::vector<double> pop_losses = evaluate(population);
    std::vector<Choices> parents;
    std::vector<double> parent_losses;
    for (auto i : lowest_loss_indices(pop_losses, cfg.parent_count)) {
        parents.push_back(population[i]);
        parent_losses.push_back(pop_losses[i]);
    }
    auto record_stats = [&](std::size_t iter) {
        IterationStats st{iter, parent_losses.front(), result.evaluations};
        result.history.push_back(st);
        if (progress) progress(sample.id, st);
    };
    record_stats(0);

    for (std::size_t iter = 1; iter <= cfg.iterations; ++iter) {
        std::vector<Choices> children;
        children.reserve(cfg.population_size);
        std::size_t rejected = 0;
        while (children.size() < cfg.population_size) {
            const auto& parent = parents[uniform_index(rng, parents.size())];
            Choices child = parent;
            if (bernoulli(rng, cfg.crossover_prob)) {
                const auto& other = parents[uniform_index(rng, parents.size())];
                child = crossover_choices(parent, other);
            }
            mutate_choices(child, partition, cfg.mutation_prob, rng);
            if (seen.insert(child).second) {
                children.push_back(std::move(child));
            } else if (++rejected > cfg.dedup_cap()) {
                children.push_back(std::move(child));
                ++result.duplicates_accepted;
            }
        }
        const auto child_losses = evaluate(children);

        std::vector<Choices> pool = parents;
        std::vector<double> pool_losses = parent_losses;
        pool.insert(pool.end(), children.begin(), children.end());
        pool_losses.insert(pool_losses.end(), child_losses.begin(), child_losses.end());
        parents.clear();
        parent_losses.clear();
        for (auto i : lowest_loss_indices(pool_losses, cfg.parent_count)) {
            parents.push_back(pool[i]);
            parent_losses.push_back(pool_losses[i]);
        }
        record_stats(iter);
    }

    result.record.sample_id = sample.id;
    result.record.mask = compose_mask(partition, parents.front());
    result.record.loss = parent_losses.front();
    result.record.partition_digest = partition_digest(partition);
    result.record.scorer_id = scorer.id();
    result.record.seed = cfg.seed;
    return result;
}

}  // namespace evocomp
