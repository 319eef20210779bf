#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <limits>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "evocomp/core.hpp"

namespace evocomp {

enum class Concurrency { safe, serialized };

/// Black-box fitness L(m): lower is better. Implementations must be pure in
/// (sample, partition, mask).
class Scorer {
public:
    virtual ~Scorer() = default;

    virtual std::string id() const = 0;
    virtual Concurrency concurrency() const { return Concurrency::safe; }
    virtual double score(const Sample& sample, const GroupPartition& partition, const Mask& mask) const = 0;

    /// Scores every mask; result[i] belongs to masks[i] whatever the completion order.
    virtual std::vector<double> score_batch(const Sample& sample, const GroupPartition& partition,
                                            std::span<const Mask> masks, std::size_t workers) const {
        std::vector<double> out(masks.size());
        std::vector<std::exception_ptr> failures(masks.size());
        auto run_one = [&](std::size_t i) {
            try {
                out[i] = score(sample, partition, masks[i]);
            } catch (...) {
                failures[i] = std::current_exception();
            }
        };
        const std::size_t threads =
            concurrency() == Concurrency::serialized ? 1 : std::min(std::max<std::size_t>(workers, 1), masks.size());
        if (threads <= 1) {
            for (std::size_t i = 0; i < masks.size(); ++i) run_one(i);
        } else {
            std::atomic<std::size_t> next{0};
            std::vector<std::jthread> pool;
            pool.reserve(threads);
            for (std::size_t t = 0; t < threads; ++t)
                pool.emplace_back([&] {
                    for (std::size_t i = next++; i < masks.size(); i = next++) run_one(i);
                });
        }
        for (std::size_t i = 0; i < masks.size(); ++i) {
            if (failures[i]) rethrow_with_context(failures[i], sample.id, i);
            if (!std::isfinite(out[i]))
                throw Error(Errc::scorer_failure,
                            "sample '" + sample.id + "' candidate " + std::to_string(i) + ": non-finite loss");
        }
        return out;
    }

protected:
    [[noreturn]] static void rethrow_with_context(const std::exception_ptr& e, const std::string& sample_id,
                                                  std::size_t candidate) {
        const std::string ctx = "sample '" + sample_id + "' candidate " + std::to_string(candidate) + ": ";
        try {
            std::rethrow_exception(e);
        } catch (const Error& err) {
            throw Error(err.code(), ctx + err.what());
        } catch (const std::exception& err) {
            throw Error(Errc::scorer_failure, ctx + err.what());
        }
    }
};

// ---------------------------------------------------------------------------
// Planted surrogate: one hidden "right" member per group, loss grows linearly
// with the distance (in member positions) from it.

struct PlantedInstance {
    std::vector<std::uint32_t> planted;  // per group, canonical order, position in members
    std::vector<double> weight;          // per group, in (0, 1]
};

inline PlantedInstance derive_planted_instance(const std::string& sample_id, std::uint64_t seed,
                                               const GroupPartition& p) {
    PlantedInstance inst;
    for (std::size_t j = 0; j < p.groups.size(); ++j) {
        const auto nj = p.groups[j].members.size();
        inst.planted.push_back(static_cast<std::uint32_t>(keyed_hash(sample_id, seed, 2 * j) % nj));
        const auto w = (keyed_hash(sample_id, seed, 2 * j + 1) >> 11) % 1000 + 1;
        inst.weight.push_back(static_cast<double>(w) / 1000.0);
    }
    return inst;
}

inline Mask planted_mask(const GroupPartition& p, const PlantedInstance& inst) {
    Choices c;
    for (auto j : p.active_groups()) c.push_back(inst.planted[j]);
    return compose_mask(p, c);
}

inline double planted_score(const GroupPartition& p, const Mask& mask, const PlantedInstance& inst) {
    const Choices sel = decompose_mask(p, mask);
    const auto active = p.active_groups();
    double total = 0.0;
    for (std::size_t k = 0; k < active.size(); ++k) {
        const std::size_t j = active[k];
        const double nj = static_cast<double>(p.groups[j].members.size());
        const double steps = std::abs(static_cast<double>(sel[k]) - static_cast<double>(inst.planted[j]));
        total += inst.weight[j] * steps / std::max(1.0, nj - 1.0);
    }
    return total / static_cast<double>(active.size());
}

class PlantedScorer final : public Scorer {
public:
    explicit PlantedScorer(std::uint64_t seed) : seed_(seed) {}

    std::string id() const override { return "planted:" + std::to_string(seed_); }

    double score(const Sample& sample, const GroupPartition& p, const Mask& mask) const override {
        return planted_score(p, mask, derive_planted_instance(sample.id, seed_, p));
    }

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
};

// ---------------------------------------------------------------------------
// Pooled surrogate: squared distance between the mean retained visual row and
// a fixed linear image of the mean text row.

/// Entry (i, j) of the d x d pooled-scorer map: u / sqrt(d) with u uniform in
/// [-1, 1) taken from keyed_hash("pooled-map", seed, i*d + j).
inline Matrix pooled_map(std::uint64_t seed, std::size_t d) {
    Matrix a(d, d);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            const double u = static_cast<double>(keyed_hash("pooled-map", seed, i * d + j) >> 11) * 0x1.0p-53;
            a(i, j) = (2.0 * u - 1.0) * scale;
        }
    return a;
}

inline std::vector<double> pooled_target(const Sample& sample, const Matrix& map) {
    const std::size_t d = sample.d();
    std::vector<double> mean(d, 0.0), t(d, 0.0);
    for (std::size_t r = 0; r < sample.m(); ++r)
        for (std::size_t c = 0; c < d; ++c) mean[c] += sample.text(r, c);
    for (auto& x : mean) x /= static_cast<double>(sample.m());
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) t[i] += map(i, j) * mean[j];
    return t;
}

inline double pooled_score(const Sample& sample, const Mask& mask, std::span<const double> target) {
    if (mask.bits.size() != sample.n()) throw Error(Errc::length_mismatch, "mask length vs n");
    const std::size_t d = sample.d();
    if (target.size() != d) throw Error(Errc::dimension_mismatch, "target width");
    std::vector<double> mean(d, 0.0);
    std::size_t kept = 0;
    for (std::size_t i = 0; i < sample.n(); ++i) {
        if (!mask.bits[i]) continue;
        ++kept;
        for (std::size_t c = 0; c < d; ++c) mean[c] += sample.visual(i, c);
    }
    if (kept == 0) throw Error(Errc::empty_input, "pooled score of an empty retention set");
    double loss = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
        const double diff = mean[c] / static_cast<double>(kept) - target[c];
        loss += diff * diff;
    }
    return loss;
}

class PooledScorer final : public Scorer {
public:
    explicit PooledScorer(std::uint64_t seed) : seed_(seed) {}

    std::string id() const override { return "pooled:" + std::to_string(seed_); }

    double score(const Sample& sample, const GroupPartition&, const Mask& mask) const override {
        if (sample.m() == 0) throw Error(Errc::empty_input, "pooled score needs at least one text token");
        return pooled_score(sample, mask, pooled_target(sample, map_for(sample.d())));
    }

    std::uint64_t seed() const { return seed_; }

private:
    const Matrix& map_for(std::size_t d) const {
        std::lock_guard lock(mu_);
        if (map_.rows != d) map_ = pooled_map(seed_, d);
        return map_;
    }

    std::uint64_t seed_;
    mutable std::mutex mu_;
    mutable Matrix map_;
};

/// Reference echo scorer: fraction of retained tokens.
class EchoScorer final : public Scorer {
public:
    std::string id() const override { return "echo"; }
    double score(const Sample& sample, const GroupPartition&, const Mask& mask) const override {
        if (mask.bits.size() != sample.n()) throw Error(Errc::length_mismatch, "mask length vs n");
        return static_cast<double>(mask.retained()) / static_cast<double>(sample.n());
    }
};

/// Adds a fixed sleep to every call of an inner scorer; models inference latency.
class LatencyScorer final : public Scorer {
public:
    LatencyScorer(std::shared_ptr<const Scorer> inner, std::chrono::microseconds delay)
        : inner_(std::move(inner)), delay_(delay) {}

    std::string id() const override { return inner_->id(); }
    Concurrency concurrency() const override { return inner_->concurrency(); }
    double score(const Sample& s, const GroupPartition& p, const Mask& m) const override {
        std::this_thread::sleep_for(delay_);
        return inner_->score(s, p, m);
    }

private:
    std::shared_ptr<const Scorer> inner_;
    std::chrono::microseconds delay_;
};

/// Counts calls; used to audit how many evaluations a procedure performs.
class CountingScorer final : public Scorer {
public:
    explicit CountingScorer(std::shared_ptr<const Scorer> inner) : inner_(std::move(inner)) {}

    std::string id() const override { return inner_->id(); }
    Concurrency concurrency() const override { return inner_->concurrency(); }
    double score(const Sample& s, const GroupPartition& p, const Mask& m) const override {
        ++calls_;
        return inner_->score(s, p, m);
    }
    std::size_t calls() const { return calls_.load(); }

private:
    std::shared_ptr<const Scorer> inner_;
    mutable std::atomic<std::size_t> calls_{0};
};

// ---------------------------------------------------------------------------

struct BruteForceResult {
    Mask mask;
    double loss = std::numeric_limits<double>::infinity();
    std::size_t evaluations = 0;
};

inline std::size_t search_space_size(const GroupPartition& p, std::size_t cap) {
    std::size_t total = 1;
    for (auto j : p.active_groups()) {
        total *= p.groups[j].members.size();
        if (total > cap) return total;
    }
    return total;
}

/// Exhaustive minimum over every valid mask in lexicographic choice order
/// (first active group most significant); the first minimiser wins.
inline BruteForceResult brute_force_best(const Sample& sample, const GroupPartition& p, const Scorer& scorer,
                                         std::size_t cap = 10'000) {
    const auto active = p.active_groups();
    if (active.empty()) throw Error(Errc::invalid_config, "no active group");
    const std::size_t space = search_space_size(p, cap);
    if (space > cap)
        throw Error(Errc::search_space_too_large,
                    "search space exceeds cap of " + std::to_string(cap) + " masks");
    std::vector<Mask> all;
    all.reserve(space);
    Choices c(active.size(), 0);
    bool more = true;
    while (more) {
        all.push_back(compose_mask(p, c));
        more = false;
        for (std::size_t k = active.size(); k-- > 0;) {
            if (++c[k] < p.groups[active[k]].members.size()) {
                more = true;
                break;
            }
            c[k] = 0;
        }
    }
    BruteForceResult best;
    const auto losses = scorer.score_batch(sample, p, all, 1);
    best.evaluations = losses.size();
    for (std::size_t i = 0; i < all.size(); ++i)
        if (losses[i] < best.loss) {
            best.loss = losses[i];
            best.mask = all[i];
        }
    return best;
}

}  // namespace evocomp
