#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <variant>
#include <vector>

#include "evocomp/core.hpp"

namespace evocomp {

inline constexpr double kProbEps = 1e-7;

inline double clamp_prob(double p) { return std::clamp(p, kProbEps, 1.0 - kProbEps); }

/// Binary cross-entropy on a clamped probability.
inline double bce(double p, int y) {
    const double pc = clamp_prob(p);
    return y ? -std::log(pc) : -std::log(1.0 - pc);
}

/// d bce / d p; zero where the clamp is active.
inline double bce_grad(double p, int y) {
    if (p < kProbEps || p > 1.0 - kProbEps) return 0.0;
    return y ? -1.0 / p : 1.0 / (1.0 - p);
}

struct GhmExact {
    double epsilon = 0.01;
};
struct GhmUnitRegion {
    std::size_t bins = 100;
};

struct GhmConfig {
    std::variant<GhmExact, GhmUnitRegion> mode = GhmUnitRegion{};
    double momentum = 0.0;
};

/// Retention probabilities, binary labels and (optionally) the visual representations.
struct LossBatch {
    std::vector<double> probs;
    std::vector<int> labels;
    Matrix reps;
};

inline void check_batch(std::span<const double> probs, std::span<const int> labels) {
    if (probs.size() != labels.size()) throw Error(Errc::length_mismatch, "probs vs labels");
}

inline std::vector<double> gradient_norms(std::span<const double> probs, std::span<const int> labels) {
    check_batch(probs, labels);
    std::vector<double> g(probs.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = std::abs(clamp_prob(probs[i]) - labels[i]);
    return g;
}

/// GD(g_i) = (1 / l_eps(g_i)) * #{k : g_i - eps/2 <= g_k < g_i + eps/2}.
inline std::vector<double> gradient_density_exact(std::span<const double> g, double epsilon) {
    if (!(epsilon > 0.0 && epsilon <= 1.0)) throw Error(Errc::invalid_config, "epsilon must lie in (0, 1]");
    std::vector<double> sorted(g.begin(), g.end());
    std::sort(sorted.begin(), sorted.end());
    std::vector<double> gd(g.size());
    const double half = epsilon / 2.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
        const auto lo = std::lower_bound(sorted.begin(), sorted.end(), g[i] - half);
        const auto hi = std::lower_bound(sorted.begin(), sorted.end(), g[i] + half);
        const double width = std::min(g[i] + half, 1.0) - std::max(g[i] - half, 0.0);
        gd[i] = static_cast<double>(hi - lo) / width;
    }
    return gd;
}

inline std::size_t unit_region(double g, std::size_t bins) {
    const auto r = static_cast<std::size_t>(std::floor(g * static_cast<double>(bins)));
    return std::min(r, bins - 1);
}

/// beta_i = n / (count of g_i's region * M).
inline std::vector<double> ghm_weights_unit_region(std::span<const double> g, std::size_t bins) {
    if (bins == 0) throw Error(Errc::invalid_config, "bin count must be >= 1");
    std::vector<std::size_t> counts(bins, 0);
    for (double x : g) ++counts[unit_region(x, bins)];
    std::vector<double> beta(g.size());
    const auto n = static_cast<double>(g.size());
    for (std::size_t i = 0; i < g.size(); ++i)
        beta[i] = n / (static_cast<double>(counts[unit_region(g[i], bins)]) * static_cast<double>(bins));
    return beta;
}

inline std::vector<double> ghm_weights_exact(std::span<const double> g, double epsilon) {
    auto gd = gradient_density_exact(g, epsilon);
    const auto n = static_cast<double>(g.size());
    for (auto& x : gd) x = n / x;
    return gd;
}

inline std::vector<double> ghm_weights(std::span<const double> g, const GhmConfig& cfg) {
    if (const auto* u = std::get_if<GhmUnitRegion>(&cfg.mode)) return ghm_weights_unit_region(g, u->bins);
    return ghm_weights_exact(g, std::get<GhmExact>(cfg.mode).epsilon);
}

/// Unit-region weights with exponentially averaged bin counts across calls.
/// With momentum 0 this reproduces ghm_weights_unit_region exactly.
class GhmBinState {
public:
    GhmBinState(std::size_t bins, double momentum) : bins_(bins), momentum_(momentum), acc_(bins, 0.0) {
        if (bins == 0) throw Error(Errc::invalid_config, "bin count must be >= 1");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw Error(Errc::invalid_config, "momentum must lie in [0, 1)");
    }

    std::vector<double> weights(std::span<const double> g) {
        if (momentum_ == 0.0) return ghm_weights_unit_region(g, bins_);
        std::vector<double> counts(bins_, 0.0);
        for (double x : g) counts[unit_region(x, bins_)] += 1.0;
        for (std::size_t b = 0; b < bins_; ++b) {
            if (counts[b] == 0.0) continue;
            acc_[b] = primed_ ? momentum_ * acc_[b] + (1.0 - momentum_) * counts[b] : counts[b];
        }
        primed_ = true;
        std::vector<double> beta(g.size());
        const auto n = static_cast<double>(g.size());
        for (std::size_t i = 0; i < g.size(); ++i)
            beta[i] = n / (acc_[unit_region(g[i], bins_)] * static_cast<double>(bins_));
        return beta;
    }

private:
    std::size_t bins_;
    double momentum_;
    std::vector<double> acc_;
    bool primed_ = false;
};

/// (1/n) sum_i beta_i * bce(p_i, y_i); optionally writes d/dp_i into `d_probs`.
inline double weighted_bce(std::span<const double> probs, std::span<const int> labels, std::span<const double> beta,
                           std::vector<double>* d_probs = nullptr) {
    check_batch(probs, labels);
    if (beta.size() != probs.size()) throw Error(Errc::length_mismatch, "beta vs probs");
    const auto n = static_cast<double>(probs.size());
    if (d_probs) d_probs->assign(probs.size(), 0.0);
    if (probs.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        total += beta[i] * bce(probs[i], labels[i]);
        if (d_probs) (*d_probs)[i] = beta[i] * bce_grad(probs[i], labels[i]) / n;
    }
    return total / n;
}

inline double ghm_c_loss(std::span<const double> probs, std::span<const int> labels, const GhmConfig& cfg,
                         std::vector<double>* d_probs = nullptr) {
    const auto beta = ghm_weights(gradient_norms(probs, labels), cfg);
    return weighted_bce(probs, labels, beta, d_probs);
}

inline double ghm_c_loss(const LossBatch& b, const GhmConfig& cfg) { return ghm_c_loss(b.probs, b.labels, cfg); }

inline double ce_loss(std::span<const double> probs, std::span<const int> labels,
                      std::vector<double>* d_probs = nullptr) {
    const std::vector<double> ones(probs.size(), 1.0);
    return weighted_bce(probs, labels, ones, d_probs);
}

inline double ce_loss(const LossBatch& b) { return ce_loss(b.probs, b.labels); }

/// mean alpha_f * (1 - p_t)^gamma * (-log p_t).
inline double focal_loss(std::span<const double> probs, std::span<const int> labels, double gamma, double alpha_f,
                         std::vector<double>* d_probs = nullptr) {
    check_batch(probs, labels);
    if (d_probs) d_probs->assign(probs.size(), 0.0);
    if (probs.empty()) return 0.0;
    const auto n = static_cast<double>(probs.size());
    double total = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        const double pc = clamp_prob(probs[i]);
        const double pt = labels[i] ? pc : 1.0 - pc;
        const double q = 1.0 - pt;
        const double logpt = std::log(pt);
        total += alpha_f * std::pow(q, gamma) * -logpt;
        if (d_probs && probs[i] >= kProbEps && probs[i] <= 1.0 - kProbEps) {
            // d/dpt [-(1-pt)^g log pt] = g (1-pt)^(g-1) log pt - (1-pt)^g / pt
            const double growth = gamma == 0.0 ? 0.0 : gamma * std::pow(q, gamma - 1.0) * logpt;
            const double d_pt = alpha_f * (growth - std::pow(q, gamma) / pt);
            (*d_probs)[i] = (labels[i] ? d_pt : -d_pt) / n;
        }
    }
    return total / n;
}

inline double focal_loss(const LossBatch& b, double gamma, double alpha_f) {
    return focal_loss(b.probs, b.labels, gamma, alpha_f);
}

/// Mean cosine similarity over all (negative, positive) representation pairs;
/// 0 when either class is absent. Optionally accumulates d/d reps into `d_reps`.
inline double cs_loss(const Matrix& reps, std::span<const int> labels, Matrix* d_reps = nullptr) {
    if (reps.rows != labels.size()) throw Error(Errc::length_mismatch, "representations vs labels");
    if (d_reps) *d_reps = Matrix(reps.rows, reps.cols);
    std::vector<std::size_t> neg, pos;
    for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] ? pos : neg).push_back(i);
    if (neg.empty() || pos.empty()) return 0.0;

    const std::size_t d = reps.cols;
    std::vector<double> norm(reps.rows);
    for (std::size_t i = 0; i < reps.rows; ++i) {
        double s = 0.0;
        for (double x : reps.row(i)) s += x * x;
        norm[i] = std::sqrt(s);
    }
    const double scale = 1.0 / (static_cast<double>(neg.size()) * static_cast<double>(pos.size()));
    double total = 0.0;
    for (auto i : neg)
        for (auto j : pos) {
            if (norm[i] == 0.0 || norm[j] == 0.0) continue;
            const auto a = reps.row(i);
            const auto b = reps.row(j);
            double dot = 0.0;
            for (std::size_t c = 0; c < d; ++c) dot += a[c] * b[c];
            const double cosv = dot / (norm[i] * norm[j]);
            total += cosv;
            if (d_reps) {
                auto da = d_reps->row(i);
                auto db = d_reps->row(j);
                for (std::size_t c = 0; c < d; ++c) {
                    da[c] += scale * (b[c] / (norm[i] * norm[j]) - cosv * a[c] / (norm[i] * norm[i]));
                    db[c] += scale * (a[c] / (norm[i] * norm[j]) - cosv * b[c] / (norm[j] * norm[j]));
                }
            }
        }
    return total * scale;
}

inline double cs_loss(const LossBatch& b) { return cs_loss(b.reps, b.labels); }

inline double total_loss(const LossBatch& b, const GhmConfig& cfg, double alpha = 1.0) {
    return ghm_c_loss(b, cfg) + alpha * cs_loss(b);
}

}  // namespace evocomp
