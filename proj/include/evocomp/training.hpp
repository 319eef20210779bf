#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "evocomp/compressor.hpp"
#include "evocomp/losses.hpp"

namespace evocomp {

struct ObjectiveValue {
    double primary = 0.0;  // GHM-C (or CE / focal for the ablation arms)
    double cs = 0.0;
    double total = 0.0;
};

struct ObjectiveOptions {
    /// Density weights to use instead of recomputing them (gradient checks hold beta fixed).
    const std::vector<double>* fixed_beta = nullptr;
    /// Receives the density weights actually used.
    std::vector<double>* beta_out = nullptr;
    /// Running bin counts for unit-region GHM with momentum.
    GhmBinState* bin_state = nullptr;
    BackwardOptions backward;
};

/// Objective over a batch of labelled samples. The classification term pools
/// every visual token of the batch (density computed batch-wide); the cosine
/// term is evaluated per sample and averaged. Gradients are accumulated into
/// `grads` when it is non-null; beta is treated as a constant.
inline ObjectiveValue batch_objective(std::span<const Sample* const> samples,
                                      std::span<const std::vector<int>* const> labels, const CompressorParams& p,
                                      const CompressorConfig& cfg, CompressorParams* grads,
                                      const ObjectiveOptions& opts = {}) {
    if (samples.size() != labels.size()) throw Error(Errc::length_mismatch, "samples vs labels");
    std::vector<ForwardCache> caches;
    caches.reserve(samples.size());
    std::vector<double> raw_probs;
    std::vector<int> all_labels;
    for (std::size_t b = 0; b < samples.size(); ++b) {
        const Sample& s = *samples[b];
        if (labels[b]->size() != s.n())
            throw Error(Errc::length_mismatch, "label length for sample '" + s.id + "'");
        caches.push_back(forward_cached(compressor_input(s, cfg), s.n(), p, cfg));
        for (double z : caches.back().logits) raw_probs.push_back(ops::sigmoid(z));
        all_labels.insert(all_labels.end(), labels[b]->begin(), labels[b]->end());
    }

    ObjectiveValue val;
    std::vector<double> d_probs;
    std::vector<double>* dp = grads ? &d_probs : nullptr;
    switch (cfg.loss) {
        case LossKind::ghm_cs:
        case LossKind::ghm: {
            std::vector<double> beta;
            if (opts.fixed_beta) {
                beta = *opts.fixed_beta;
            } else {
                const auto g = gradient_norms(raw_probs, all_labels);
                const auto* unit = std::get_if<GhmUnitRegion>(&cfg.ghm.mode);
                beta = (opts.bin_state && unit) ? opts.bin_state->weights(g) : ghm_weights(g, cfg.ghm);
            }
            if (opts.beta_out) *opts.beta_out = beta;
            val.primary = weighted_bce(raw_probs, all_labels, beta, dp);
            break;
        }
        case LossKind::ce_cs:
        case LossKind::ce: val.primary = ce_loss(raw_probs, all_labels, dp); break;
        case LossKind::focal_cs:
            val.primary = focal_loss(raw_probs, all_labels, cfg.focal_gamma, cfg.focal_alpha, dp);
            break;
    }

    const bool with_cs = uses_cs(cfg.loss);
    const double cs_scale = samples.empty() ? 0.0 : 1.0 / static_cast<double>(samples.size());
    std::size_t offset = 0;
    for (std::size_t b = 0; b < samples.size(); ++b) {
        const ForwardCache& c = caches[b];
        Matrix d_h;
        if (with_cs) {
            Matrix vis(c.n, cfg.d_model);
            std::copy_n(c.h.data.begin(), vis.data.size(), vis.data.begin());
            Matrix d_vis;
            val.cs += cs_scale * cs_loss(vis, *labels[b], grads ? &d_vis : nullptr);
            if (grads) {
                d_h = Matrix(c.h.rows, c.h.cols);
                const double w = cfg.alpha * cs_scale;
                for (std::size_t i = 0; i < d_vis.data.size(); ++i) d_h.data[i] = w * d_vis.data[i];
            }
        }
        if (grads) {
            std::vector<double> d_logits(c.n);
            for (std::size_t i = 0; i < c.n; ++i) {
                const double pr = raw_probs[offset + i];
                d_logits[i] = d_probs[offset + i] * pr * (1.0 - pr);
            }
            backward(c, p, cfg, d_logits, d_h, *grads, opts.backward);
        }
        offset += c.n;
    }
    val.total = val.primary + (with_cs ? cfg.alpha * val.cs : 0.0);
    return val;
}

inline constexpr double kGradCheckFloor = 1e-6;

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t coordinates = 0;
    std::string worst_param;
};

/// Compares analytic parameter gradients of the training objective with
/// central differences on a random subset of coordinates covering every
/// parameter tensor. Relative error: |ga - gn| / max(|ga|, |gn|, 1e-6); the
/// floor keeps structurally zero gradients (key biases under softmax shift
/// invariance) from turning central-difference roundoff into a relative error.
inline GradCheckResult grad_check(const CompressorParams& params, const Sample& sample, const std::vector<int>& labels,
                                  const CompressorConfig& cfg, double h = 1e-5, std::size_t min_coordinates = 200,
                                  std::uint64_t seed = 0, BackwardOptions bopts = {}) {
    const Sample* sp = &sample;
    const std::vector<int>* lp = &labels;
    std::span<const Sample* const> ss(&sp, 1);
    std::span<const std::vector<int>* const> ls(&lp, 1);

    std::vector<double> beta;
    CompressorParams grads = params.zeros_like();
    ObjectiveOptions base;
    base.beta_out = &beta;
    base.backward = bopts;
    batch_objective(ss, ls, params, cfg, &grads, base);

    // Pick coordinates: a few from every tensor, topped up round-robin.
    std::vector<std::size_t> sizes;
    params.for_each([&](std::string_view, const Matrix& m) { sizes.push_back(m.data.size()); });
    const std::size_t tensors = sizes.size();
    std::vector<std::size_t> quota(tensors);
    std::size_t total = 0, capacity = 0;
    const std::size_t per = (min_coordinates + tensors - 1) / tensors;
    for (std::size_t t = 0; t < tensors; ++t) {
        quota[t] = std::min(sizes[t], per);
        total += quota[t];
        capacity += sizes[t];
    }
    for (std::size_t t = 0; total < std::min(min_coordinates, capacity); t = (t + 1) % tensors)
        if (quota[t] < sizes[t]) {
            ++quota[t];
            ++total;
        }

    Rng rng(keyed_hash("grad-check", seed, 0));
    std::vector<std::vector<std::size_t>> picks(tensors);
    for (std::size_t t = 0; t < tensors; ++t) {
        std::vector<std::size_t> idx(sizes[t]);
        std::iota(idx.begin(), idx.end(), 0);
        for (std::size_t i = 0; i < quota[t]; ++i) std::swap(idx[i], idx[i + uniform_index(rng, sizes[t] - i)]);
        picks[t].assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(quota[t]));
    }

    ObjectiveOptions fixed;
    fixed.fixed_beta = &beta;
    CompressorParams probe = params;
    GradCheckResult result;
    std::vector<std::string> names;
    std::vector<Matrix*> probe_tensors;
    std::vector<const Matrix*> grad_tensors;
    probe.for_each([&](std::string_view name, Matrix& m) {
        names.emplace_back(name);
        probe_tensors.push_back(&m);
    });
    grads.for_each([&](std::string_view, const Matrix& m) { grad_tensors.push_back(&m); });

    for (std::size_t t = 0; t < tensors; ++t)
        for (auto i : picks[t]) {
            double& x = probe_tensors[t]->data[i];
            const double orig = x;
            x = orig + h;
            const double up = batch_objective(ss, ls, probe, cfg, nullptr, fixed).total;
            x = orig - h;
            const double down = batch_objective(ss, ls, probe, cfg, nullptr, fixed).total;
            x = orig;
            const double numeric = (up - down) / (2.0 * h);
            const double analytic = grad_tensors[t]->data[i];
            const double err =
                std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kGradCheckFloor});
            ++result.coordinates;
            if (err > result.max_rel_error) {
                result.max_rel_error = err;
                result.worst_param = names[t] + "[" + std::to_string(i) + "]";
            }
        }
    return result;
}

struct GradCheckCase {
    CompressorConfig config;
    CompressorParams params;
    Sample sample;
    std::vector<int> labels;
};

/// Random small configuration `index` of a seeded family: width, heads,
/// positions, text stream, loss arm and GHM variant all vary.
inline GradCheckCase make_grad_check_case(std::uint64_t seed, std::size_t index) {
    Rng rng(keyed_hash("grad-case", seed, index));
    GradCheckCase c;
    CompressorConfig& cfg = c.config;
    cfg.heads = 1 + uniform_index(rng, 2);
    cfg.d_model = cfg.heads * 2 * (1 + uniform_index(rng, 3));
    cfg.mlp_ratio = 1 + uniform_index(rng, 2);
    cfg.use_positions = bernoulli(rng, 0.5);
    cfg.no_text = bernoulli(rng, 0.25);
    constexpr LossKind kinds[] = {LossKind::ghm_cs, LossKind::ghm, LossKind::ce_cs, LossKind::ce, LossKind::focal_cs};
    cfg.loss = kinds[index % 5];
    cfg.alpha = 0.5 + 1.5 * uniform01(rng);
    if (bernoulli(rng, 0.5)) cfg.ghm.mode = GhmExact{0.05 + 0.2 * uniform01(rng)};
    cfg.init_std = 0.3;
    cfg.seed = keyed_hash("grad-case-init", seed, index);
    c.params = init_params(cfg);
    for (auto* m : {&c.params.bq, &c.params.bk, &c.params.bv, &c.params.b1, &c.params.b2, &c.params.cls_b})
        for (auto& x : m->data) x = 0.1 * standard_normal(rng);
    const std::size_t n = 2 + uniform_index(rng, 5), m = uniform_index(rng, 4);
    c.sample.id = "grad-case-" + std::to_string(index);
    c.sample.visual = Matrix(n, cfg.d_model);
    c.sample.text = Matrix(m, cfg.d_model);
    for (auto& x : c.sample.visual.data) x = standard_normal(rng);
    for (auto& x : c.sample.text.data) x = standard_normal(rng);
    c.labels.resize(n);
    for (auto& y : c.labels) y = bernoulli(rng, 0.4) ? 1 : 0;
    c.labels[uniform_index(rng, n)] = 1;
    return c;
}

struct EpochStats {
    std::size_t epoch = 0;
    std::size_t step = 0;  // optimizer steps taken so far
    double primary = 0.0;
    double cs = 0.0;
    double total = 0.0;
    double lr = 0.0;
    double val_total = 0.0;
};

struct TrainResult {
    CompressorParams params;  // checkpoint with the best validation loss
    std::vector<EpochStats> history;
    std::size_t best_epoch = 0;
    std::size_t train_samples = 0;
    std::size_t val_samples = 0;
};

/// Held-out membership from a hash of the sample id.
inline bool in_validation_split(const std::string& id, double fraction) {
    return static_cast<double>(fnv1a64(id) % 10000) < fraction * 10000.0;
}

inline double cosine_lr(double lr0, std::size_t step, std::size_t total_steps) {
    return lr0 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps))) /
           2.0;
}

class Adam {
public:
    explicit Adam(const CompressorParams& shape, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8)
        : m_(shape.zeros_like()), v_(shape.zeros_like()), b1_(b1), b2_(b2), eps_(eps) {}

    void step(CompressorParams& p, const CompressorParams& g, double lr) {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        std::vector<Matrix*> ps, ms, vs;
        std::vector<const Matrix*> gs;
        p.for_each([&](std::string_view, Matrix& x) { ps.push_back(&x); });
        m_.for_each([&](std::string_view, Matrix& x) { ms.push_back(&x); });
        v_.for_each([&](std::string_view, Matrix& x) { vs.push_back(&x); });
        g.for_each([&](std::string_view, const Matrix& x) { gs.push_back(&x); });
        for (std::size_t t = 0; t < ps.size(); ++t)
            for (std::size_t i = 0; i < ps[t]->data.size(); ++i) {
                const double gi = gs[t]->data[i];
                double& m = ms[t]->data[i];
                double& v = vs[t]->data[i];
                m = b1_ * m + (1.0 - b1_) * gi;
                v = b2_ * v + (1.0 - b2_) * gi * gi;
                ps[t]->data[i] -= lr * (m / c1) / (std::sqrt(v / c2) + eps_);
            }
    }

private:
    CompressorParams m_, v_;
    double b1_, b2_, eps_;
    std::size_t t_ = 0;
};

using EpochCallback = std::function<void(const EpochStats&)>;

/// Adam + cosine decay over the labelled dataset; keeps the epoch with the
/// lowest validation objective (training objective when no sample is held out).
inline TrainResult train(const std::vector<Sample>& data, const std::vector<LabelRecord>& labels,
                         const CompressorConfig& cfg, const CompressorParams* donor = nullptr,
                         const EpochCallback& on_epoch = {}) {
    validate(cfg);
    std::map<std::string, const LabelRecord*> by_id;
    for (const auto& l : labels) by_id[l.sample_id] = &l;

    std::vector<const Sample*> train_set, val_set;
    std::vector<std::vector<int>> label_store(data.size());
    std::map<const Sample*, const std::vector<int>*> label_of;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const Sample& s = data[i];
        const auto it = by_id.find(s.id);
        if (it == by_id.end()) throw Error(Errc::length_mismatch, "no label for sample '" + s.id + "'");
        if (it->second->mask.bits.size() != s.n())
            throw Error(Errc::length_mismatch, "label mask length for sample '" + s.id + "' differs from n");
        if (s.d() != cfg.d_model)
            throw Error(Errc::dimension_mismatch, "sample '" + s.id + "' width differs from d_model");
        label_store[i].assign(it->second->mask.bits.begin(), it->second->mask.bits.end());
        label_of[&s] = &label_store[i];
        (in_validation_split(s.id, cfg.val_fraction) ? val_set : train_set).push_back(&s);
    }
    if (train_set.empty()) throw Error(Errc::empty_input, "no training samples after the validation split");

    TrainResult result;
    result.train_samples = train_set.size();
    result.val_samples = val_set.size();
    CompressorParams params = init_params(cfg, donor);
    Adam adam(params);
    Rng rng(keyed_hash("train-shuffle", cfg.seed, 0));

    std::optional<GhmBinState> bins;
    if (const auto* u = std::get_if<GhmUnitRegion>(&cfg.ghm.mode); u && cfg.ghm.momentum > 0.0)
        bins.emplace(u->bins, cfg.ghm.momentum);

    const std::size_t batches_per_epoch = (train_set.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = batches_per_epoch * cfg.epochs;
    std::size_t step = 0;
    double best = std::numeric_limits<double>::infinity();

    auto run_batches = [&](const std::vector<const Sample*>& set, bool update, double& lr_out) {
        ObjectiveValue mean;
        for (std::size_t start = 0; start < set.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(set.size(), start + cfg.batch_size);
            std::vector<const Sample*> bs(set.begin() + static_cast<std::ptrdiff_t>(start),
                                          set.begin() + static_cast<std::ptrdiff_t>(end));
            std::vector<const std::vector<int>*> bl;
            for (const auto* s : bs) bl.push_back(label_of[s]);
            ObjectiveOptions opts;
            if (update) opts.bin_state = bins ? &*bins : nullptr;
            CompressorParams grads;
            if (update) grads = params.zeros_like();
            const auto v = batch_objective(bs, bl, params, cfg, update ? &grads : nullptr, opts);
            if (!std::isfinite(v.total))
                throw Error(Errc::non_finite, "non-finite loss at step " + std::to_string(step) + " (primary " +
                                                  std::to_string(v.primary) + ", cs " + std::to_string(v.cs) + ")");
            const double w = static_cast<double>(bs.size()) / static_cast<double>(set.size());
            mean.primary += w * v.primary;
            mean.cs += w * v.cs;
            mean.total += w * v.total;
            if (update) {
                lr_out = cosine_lr(cfg.lr0, step, total_steps);
                adam.step(params, grads, lr_out);
                ++step;
            }
        }
        return mean;
    };

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        for (std::size_t i = train_set.size(); i > 1; --i) std::swap(train_set[i - 1], train_set[uniform_index(rng, i)]);
        double lr = 0.0;
        const auto tr = run_batches(train_set, true, lr);
        EpochStats st{epoch, step, tr.primary, tr.cs, tr.total, lr, tr.total};
        if (!val_set.empty()) {
            double unused = 0.0;
            st.val_total = run_batches(val_set, false, unused).total;
        }
        result.history.push_back(st);
        if (on_epoch) on_epoch(st);
        if (st.val_total < best) {
            best = st.val_total;
            result.best_epoch = epoch;
            result.params = params;
        }
    }
    return result;
}

}  // namespace evocomp
