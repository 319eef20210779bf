#pragma once

#include <atomic>
#include <exception>
#include <thread>
#include <vector>

#include "evocomp/evolution.hpp"
#include "evocomp/grouping.hpp"
#include "evocomp/scorer.hpp"

namespace evocomp {

struct LabelJob {
    GroupingConfig grouping;
    EvoConfig evo;
    /// Concurrent per-sample searches.
    std::size_t sample_workers = 1;
    /// Exhaustive search instead of evolution (oracle labels).
    bool oracle = false;
    std::size_t oracle_cap = 10'000;
};

struct LabelOutcome {
    LabelRecord record;
    std::vector<IterationStats> history;
    std::size_t evaluations = 0;
};

inline LabelOutcome label_sample(const Sample& s, const AnchorSet& anchors, const Scorer& scorer, const LabelJob& job,
                                 const ProgressFn& progress = {}) {
    const GroupPartition part = restrict_top_groups(partition(s, anchors), job.grouping);
    LabelOutcome out;
    if (job.oracle) {
        const auto best = brute_force_best(s, part, scorer, job.oracle_cap);
        out.record = LabelRecord{s.id, best.mask, best.loss, partition_digest(part), scorer.id(), job.evo.seed};
        out.evaluations = best.evaluations;
        return out;
    }
    auto res = search(s, part, scorer, job.evo, progress);
    out.record = std::move(res.record);
    out.history = std::move(res.history);
    out.evaluations = res.evaluations;
    return out;
}

/// Labels every sample; output order follows input order regardless of worker count.
inline std::vector<LabelOutcome> label_dataset(const std::vector<Sample>& samples, const AnchorSet& anchors,
                                               const Scorer& scorer, const LabelJob& job,
                                               const ProgressFn& progress = {}) {
    std::vector<LabelOutcome> out(samples.size());
    std::vector<std::exception_ptr> failures(samples.size());
    auto run = [&](std::size_t i) {
        try {
            out[i] = label_sample(samples[i], anchors, scorer, job, progress);
        } catch (...) {
            failures[i] = std::current_exception();
        }
    };
    const std::size_t threads = std::min(std::max<std::size_t>(job.sample_workers, 1), samples.size());
    if (threads <= 1) {
        for (std::size_t i = 0; i < samples.size(); ++i) run(i);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < threads; ++t)
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < samples.size(); i = next++) run(i);
            });
    }
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (!failures[i]) continue;
        try {
            std::rethrow_exception(failures[i]);
        } catch (const Error& e) {
            throw Error(e.code(), "labelling sample '" + samples[i].id + "': " + e.what());
        }
    }
    return out;
}

}  // namespace evocomp
