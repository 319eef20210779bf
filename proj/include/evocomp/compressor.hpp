#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "evocomp/core.hpp"
#include "evocomp/losses.hpp"
#include "evocomp/tensor_ops.hpp"

namespace evocomp {

enum class LossKind { ghm_cs, ghm, ce_cs, ce, focal_cs };

inline std::string_view loss_kind_name(LossKind k) {
    switch (k) {
        case LossKind::ghm_cs: return "ghm+cs";
        case LossKind::ghm: return "ghm";
        case LossKind::ce_cs: return "ce+cs";
        case LossKind::ce: return "ce";
        case LossKind::focal_cs: return "focal+cs";
    }
    return "?";
}

inline LossKind parse_loss_kind(std::string_view s) {
    for (auto k : {LossKind::ghm_cs, LossKind::ghm, LossKind::ce_cs, LossKind::ce, LossKind::focal_cs})
        if (loss_kind_name(k) == s) return k;
    throw Error(Errc::invalid_config, "unknown loss '" + std::string(s) + "'");
}

inline bool uses_cs(LossKind k) { return k == LossKind::ghm_cs || k == LossKind::ce_cs || k == LossKind::focal_cs; }

struct CompressorConfig {
    std::size_t d_model = 64;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 4;
    bool use_positions = false;
    std::size_t epochs = 30;
    double lr0 = 0.003;
    std::size_t batch_size = 16;
    double alpha = 1.0;
    GhmConfig ghm;
    LossKind loss = LossKind::ghm_cs;
    double focal_gamma = 2.0;
    double focal_alpha = 1.0;
    /// Replace the text stream with an empty one (visual-only ablation).
    bool no_text = false;
    double init_std = 0.02;
    double val_fraction = 0.1;
    std::uint64_t seed = 0;
};

inline void validate(const CompressorConfig& c) {
    if (c.d_model == 0 || c.heads == 0 || c.d_model % c.heads != 0)
        throw Error(Errc::invalid_config, "d_model must be a positive multiple of heads");
    if (c.use_positions && (c.d_model / c.heads) % 2 != 0)
        throw Error(Errc::invalid_config, "rotary positions need an even head width");
    if (c.mlp_ratio == 0) throw Error(Errc::invalid_config, "mlp_ratio must be >= 1");
    if (c.epochs == 0) throw Error(Errc::invalid_config, "epochs must be >= 1");
    if (!(c.lr0 > 0.0)) throw Error(Errc::invalid_config, "lr0 must be positive");
    if (c.batch_size == 0) throw Error(Errc::invalid_config, "batch size must be >= 1");
    if (!(c.val_fraction >= 0.0 && c.val_fraction < 1.0))
        throw Error(Errc::invalid_config, "validation fraction must lie in [0, 1)");
}

/// Weights of one pre-norm encoder block plus the retention classifier.
/// Projections are stored input-major: y = x * W + b.
struct CompressorParams {
    Matrix ln1_g, ln1_b;
    Matrix wq, bq, wk, bk, wv, bv, wo, bo;
    Matrix ln2_g, ln2_b;
    Matrix w1, b1, w2, b2;
    Matrix cls_w, cls_b;

    template <class Self, class F>
    static void visit(Self& self, F&& f) {
        f("block.ln1.gamma", self.ln1_g);
        f("block.ln1.beta", self.ln1_b);
        f("block.attn.q.weight", self.wq);
        f("block.attn.q.bias", self.bq);
        f("block.attn.k.weight", self.wk);
        f("block.attn.k.bias", self.bk);
        f("block.attn.v.weight", self.wv);
        f("block.attn.v.bias", self.bv);
        f("block.attn.out.weight", self.wo);
        f("block.attn.out.bias", self.bo);
        f("block.ln2.gamma", self.ln2_g);
        f("block.ln2.beta", self.ln2_b);
        f("block.mlp.fc1.weight", self.w1);
        f("block.mlp.fc1.bias", self.b1);
        f("block.mlp.fc2.weight", self.w2);
        f("block.mlp.fc2.bias", self.b2);
        f("classifier.weight", self.cls_w);
        f("classifier.bias", self.cls_b);
    }
    template <class F>
    void for_each(F&& f) { visit(*this, std::forward<F>(f)); }
    template <class F>
    void for_each(F&& f) const { visit(*this, std::forward<F>(f)); }

    std::size_t d_model() const { return wq.rows; }

    /// Same shapes, all zeros.
    CompressorParams zeros_like() const {
        CompressorParams z = *this;
        z.for_each([](std::string_view, Matrix& m) { std::fill(m.data.begin(), m.data.end(), 0.0); });
        return z;
    }

    bool operator==(const CompressorParams&) const = default;
};

inline bool is_classifier_param(std::string_view name) { return name.starts_with("classifier."); }

inline CompressorParams shaped_params(const CompressorConfig& cfg) {
    const std::size_t d = cfg.d_model, hd = cfg.d_model * cfg.mlp_ratio;
    CompressorParams p;
    p.ln1_g = Matrix(1, d, 1.0);
    p.ln1_b = Matrix(1, d);
    p.wq = Matrix(d, d);
    p.bq = Matrix(1, d);
    p.wk = Matrix(d, d);
    p.bk = Matrix(1, d);
    p.wv = Matrix(d, d);
    p.bv = Matrix(1, d);
    p.wo = Matrix(d, d);
    p.bo = Matrix(1, d);
    p.ln2_g = Matrix(1, d, 1.0);
    p.ln2_b = Matrix(1, d);
    p.w1 = Matrix(d, hd);
    p.b1 = Matrix(1, hd);
    p.w2 = Matrix(hd, d);
    p.b2 = Matrix(1, d);
    p.cls_w = Matrix(1, d);
    p.cls_b = Matrix(1, 1);
    return p;
}

inline void init_classifier(CompressorParams& p, const CompressorConfig& cfg, Rng& rng) {
    for (auto& x : p.cls_w.data) x = cfg.init_std * standard_normal(rng);
    p.cls_b.data[0] = 0.0;
}

/// Seeded small-variance initialisation, or a copy of a donor's block weights
/// (the classifier is always fresh).
inline CompressorParams init_params(const CompressorConfig& cfg, const CompressorParams* donor = nullptr) {
    validate(cfg);
    CompressorParams p = shaped_params(cfg);
    Rng rng(keyed_hash("compressor-init", cfg.seed, 0));
    if (donor) {
        bool ok = true;
        p.for_each([&](std::string_view name, Matrix& m) {
            if (is_classifier_param(name)) return;
            const Matrix* src = nullptr;
            donor->for_each([&](std::string_view dn, const Matrix& dm) {
                if (dn == name) src = &dm;
            });
            if (!src || src->rows != m.rows || src->cols != m.cols) {
                ok = false;
                return;
            }
            m = *src;
        });
        if (!ok) throw Error(Errc::dimension_mismatch, "donor parameters do not match the configured shapes");
    } else {
        for (Matrix* w : {&p.wq, &p.wk, &p.wv, &p.wo, &p.w1, &p.w2})
            for (auto& x : w->data) x = cfg.init_std * standard_normal(rng);
    }
    init_classifier(p, cfg, rng);
    return p;
}

inline void check_params(const CompressorParams& p, const CompressorConfig& cfg) {
    const CompressorParams ref = shaped_params(cfg);
    bool ok = true;
    std::vector<std::pair<std::size_t, std::size_t>> shapes;
    ref.for_each([&](std::string_view, const Matrix& m) { shapes.emplace_back(m.rows, m.cols); });
    std::size_t i = 0;
    p.for_each([&](std::string_view, const Matrix& m) {
        ok = ok && m.rows == shapes[i].first && m.cols == shapes[i].second &&
             m.data.size() == m.rows * m.cols &&
             std::all_of(m.data.begin(), m.data.end(), [](double x) { return std::isfinite(x); });
        ++i;
    });
    if (!ok) throw Error(Errc::dimension_mismatch, "parameters do not match the compressor configuration");
}

struct ForwardOutput {
    Matrix visual_reps;  // n x d
    Matrix text_reps;    // m x d
    std::vector<double> probs;
};

/// Intermediate activations kept for the backward pass.
struct ForwardCache {
    std::size_t n = 0;
    Matrix x, xhat1, a1, q, k, v, o, x1, xhat2, a2, u, g, h;
    std::vector<double> rstd1, rstd2;
    std::vector<Matrix> attn;  // per head, rows x rows softmax
    std::vector<double> logits, probs;
};

namespace detail {

inline constexpr double kLayerNormEps = 1e-5;

inline Matrix layer_norm(const Matrix& x, const Matrix& gamma, const Matrix& beta, Matrix& xhat,
                         std::vector<double>& rstd) {
    xhat = Matrix(x.rows, x.cols);
    rstd.assign(x.rows, 0.0);
    Matrix y(x.rows, x.cols);
    const auto d = static_cast<double>(x.cols);
    for (std::size_t i = 0; i < x.rows; ++i) {
        const auto r = x.row(i);
        const double mean = std::accumulate(r.begin(), r.end(), 0.0) / d;
        double var = 0.0;
        for (double v : r) var += (v - mean) * (v - mean);
        var /= d;
        rstd[i] = 1.0 / std::sqrt(var + kLayerNormEps);
        for (std::size_t c = 0; c < x.cols; ++c) {
            xhat(i, c) = (r[c] - mean) * rstd[i];
            y(i, c) = gamma.data[c] * xhat(i, c) + beta.data[c];
        }
    }
    return y;
}

/// Accumulates gamma/beta gradients and returns d/dx.
inline Matrix layer_norm_backward(const Matrix& dy, const Matrix& xhat, const std::vector<double>& rstd,
                                  const Matrix& gamma, Matrix& dgamma, Matrix& dbeta) {
    Matrix dx(dy.rows, dy.cols);
    const auto d = static_cast<double>(dy.cols);
    std::vector<double> dxhat(dy.cols);
    for (std::size_t i = 0; i < dy.rows; ++i) {
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (std::size_t c = 0; c < dy.cols; ++c) {
            dgamma.data[c] += dy(i, c) * xhat(i, c);
            dbeta.data[c] += dy(i, c);
            dxhat[c] = dy(i, c) * gamma.data[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xhat(i, c);
        }
        mean_dxhat /= d;
        mean_dxhat_xhat /= d;
        for (std::size_t c = 0; c < dy.cols; ++c)
            dx(i, c) = rstd[i] * (dxhat[c] - mean_dxhat - xhat(i, c) * mean_dxhat_xhat);
    }
    return dx;
}

/// Rotates each (2i, 2i+1) pair inside every head by position * base^(-2i/head_dim).
/// `inverse` applies the transpose rotation (used for gradients).
inline void apply_rotary(Matrix& m, std::size_t heads, bool inverse) {
    const std::size_t hd = m.cols / heads;
    for (std::size_t t = 0; t < m.rows; ++t)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i + 1 < hd; i += 2) {
                const double theta = static_cast<double>(t) *
                                     std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(hd));
                const double c = std::cos(theta), s = inverse ? -std::sin(theta) : std::sin(theta);
                double& a = m(t, h * hd + i);
                double& b = m(t, h * hd + i + 1);
                const double a0 = a, b0 = b;
                a = a0 * c - b0 * s;
                b = a0 * s + b0 * c;
            }
}

}  // namespace detail

/// Stacks visual rows then (unless no_text) text rows into the block input.
inline Matrix compressor_input(const Sample& s, const CompressorConfig& cfg) {
    const std::size_t m = cfg.no_text ? 0 : s.m();
    Matrix x(s.n() + m, s.d());
    std::copy(s.visual.data.begin(), s.visual.data.end(), x.data.begin());
    if (m > 0) std::copy(s.text.data.begin(), s.text.data.end(), x.data.begin() + static_cast<std::ptrdiff_t>(s.visual.data.size()));
    return x;
}

/// Full forward pass over a stacked input whose first `n` rows are visual tokens.
inline ForwardCache forward_cached(const Matrix& x, std::size_t n, const CompressorParams& p,
                                   const CompressorConfig& cfg) {
    using namespace ops;
    if (n == 0) throw Error(Errc::empty_input, "no visual tokens");
    if (x.cols != cfg.d_model || p.d_model() != cfg.d_model)
        throw Error(Errc::dimension_mismatch, "input width " + std::to_string(x.cols) + " vs d_model " +
                                                  std::to_string(cfg.d_model));
    const std::size_t rows = x.rows, d = cfg.d_model, heads = cfg.heads, hd = d / heads;
    ForwardCache c;
    c.n = n;
    c.x = x;
    c.a1 = detail::layer_norm(x, p.ln1_g, p.ln1_b, c.xhat1, c.rstd1);
    c.q = matmul(c.a1, p.wq);
    add_row_bias(c.q, p.bq);
    c.k = matmul(c.a1, p.wk);
    add_row_bias(c.k, p.bk);
    c.v = matmul(c.a1, p.wv);
    add_row_bias(c.v, p.bv);
    if (cfg.use_positions) {
        detail::apply_rotary(c.q, heads, false);
        detail::apply_rotary(c.k, heads, false);
    }

    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    c.o = Matrix(rows, d);
    c.attn.assign(heads, Matrix(rows, rows));
    for (std::size_t h = 0; h < heads; ++h) {
        Matrix& a = c.attn[h];
        for (std::size_t i = 0; i < rows; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < rows; ++j) {
                double s = 0.0;
                for (std::size_t e = 0; e < hd; ++e) s += c.q(i, h * hd + e) * c.k(j, h * hd + e);
                a(i, j) = s * scale;
                mx = std::max(mx, a(i, j));
            }
            double z = 0.0;
            for (std::size_t j = 0; j < rows; ++j) {
                a(i, j) = std::exp(a(i, j) - mx);
                z += a(i, j);
            }
            for (std::size_t j = 0; j < rows; ++j) {
                a(i, j) /= z;
                for (std::size_t e = 0; e < hd; ++e) c.o(i, h * hd + e) += a(i, j) * c.v(j, h * hd + e);
            }
        }
    }
    Matrix attn_out = matmul(c.o, p.wo);
    add_row_bias(attn_out, p.bo);
    c.x1 = x;
    add_inplace(c.x1, attn_out);

    c.a2 = detail::layer_norm(c.x1, p.ln2_g, p.ln2_b, c.xhat2, c.rstd2);
    c.u = matmul(c.a2, p.w1);
    add_row_bias(c.u, p.b1);
    c.g = c.u;
    for (auto& e : c.g.data) e = gelu(e);
    Matrix mlp_out = matmul(c.g, p.w2);
    add_row_bias(mlp_out, p.b2);
    // Skip path: the raw input reaches the output through x1, so a block with
    // zeroed weights is the identity.
    c.h = c.x1;
    add_inplace(c.h, mlp_out);

    c.logits.resize(n);
    c.probs.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        double z = p.cls_b.data[0];
        for (std::size_t e = 0; e < d; ++e) z += c.h(i, e) * p.cls_w.data[e];
        c.logits[i] = z;
        c.probs[i] = clamp_prob(sigmoid(z));
    }
    return c;
}

inline ForwardOutput forward(const Sample& s, const CompressorParams& p, const CompressorConfig& cfg) {
    if (s.n() == 0) throw Error(Errc::empty_input, "sample '" + s.id + "' has no visual tokens");
    if (s.d() != cfg.d_model)
        throw Error(Errc::dimension_mismatch, "sample width " + std::to_string(s.d()) + " vs d_model " +
                                                  std::to_string(cfg.d_model));
    const auto c = forward_cached(compressor_input(s, cfg), s.n(), p, cfg);
    ForwardOutput out;
    out.visual_reps = Matrix(s.n(), cfg.d_model);
    std::copy_n(c.h.data.begin(), out.visual_reps.data.size(), out.visual_reps.data.begin());
    out.text_reps = Matrix(c.h.rows - s.n(), cfg.d_model);
    std::copy(c.h.data.begin() + static_cast<std::ptrdiff_t>(out.visual_reps.data.size()), c.h.data.end(),
              out.text_reps.data.begin());
    out.probs = c.probs;
    return out;
}

struct BackwardOptions {
    /// Drops the softmax Jacobian's row-sum term; a deliberately wrong gradient
    /// used only as a negative control for gradient checking.
    bool corrupt_attention = false;
};

/// Accumulates parameter gradients into `grads` given d(loss)/d(logit_i) for
/// visual rows and d(loss)/d(h) for all rows (may be empty).
inline void backward(const ForwardCache& c, const CompressorParams& p, const CompressorConfig& cfg,
                     std::span<const double> d_logits, const Matrix& d_h_extra, CompressorParams& grads,
                     BackwardOptions opts = {}) {
    using namespace ops;
    const std::size_t rows = c.x.rows, d = cfg.d_model, heads = cfg.heads, hd = d / heads;

    Matrix dh = d_h_extra.rows ? d_h_extra : Matrix(rows, d);
    for (std::size_t i = 0; i < c.n; ++i) {
        grads.cls_b.data[0] += d_logits[i];
        for (std::size_t e = 0; e < d; ++e) {
            grads.cls_w.data[e] += d_logits[i] * c.h(i, e);
            dh(i, e) += d_logits[i] * p.cls_w.data[e];
        }
    }

    // MLP branch: h = x1 + gelu(a2 W1 + b1) W2 + b2
    add_matmul_at_b(grads.w2, c.g, dh);
    add_column_sums(grads.b2, dh);
    Matrix du = matmul_a_bt(dh, p.w2);
    for (std::size_t i = 0; i < du.data.size(); ++i) du.data[i] *= gelu_grad(c.u.data[i]);
    add_matmul_at_b(grads.w1, c.a2, du);
    add_column_sums(grads.b1, du);
    const Matrix da2 = matmul_a_bt(du, p.w1);
    Matrix dx1 = dh;
    add_inplace(dx1, detail::layer_norm_backward(da2, c.xhat2, c.rstd2, p.ln2_g, grads.ln2_g, grads.ln2_b));

    // Attention branch: x1 = x + attn(a1) Wo + bo
    add_matmul_at_b(grads.wo, c.o, dx1);
    add_column_sums(grads.bo, dx1);
    const Matrix d_o = matmul_a_bt(dx1, p.wo);
    Matrix dq(rows, d), dk(rows, d), dv(rows, d);
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<double> dp(rows);
    for (std::size_t h = 0; h < heads; ++h) {
        const Matrix& a = c.attn[h];
        for (std::size_t i = 0; i < rows; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < rows; ++j) {
                double s = 0.0;
                for (std::size_t e = 0; e < hd; ++e) s += d_o(i, h * hd + e) * c.v(j, h * hd + e);
                dp[j] = s;
                dot += s * a(i, j);
                for (std::size_t e = 0; e < hd; ++e) dv(j, h * hd + e) += a(i, j) * d_o(i, h * hd + e);
            }
            if (opts.corrupt_attention) dot = 0.0;
            for (std::size_t j = 0; j < rows; ++j) {
                const double ds = a(i, j) * (dp[j] - dot) * scale;
                if (ds == 0.0) continue;
                for (std::size_t e = 0; e < hd; ++e) {
                    dq(i, h * hd + e) += ds * c.k(j, h * hd + e);
                    dk(j, h * hd + e) += ds * c.q(i, h * hd + e);
                }
            }
        }
    }
    if (cfg.use_positions) {
        detail::apply_rotary(dq, heads, true);
        detail::apply_rotary(dk, heads, true);
    }
    add_matmul_at_b(grads.wq, c.a1, dq);
    add_column_sums(grads.bq, dq);
    add_matmul_at_b(grads.wk, c.a1, dk);
    add_column_sums(grads.bk, dk);
    add_matmul_at_b(grads.wv, c.a1, dv);
    add_column_sums(grads.bv, dv);
    Matrix da1 = matmul_a_bt(dq, p.wq);
    add_inplace(da1, matmul_a_bt(dk, p.wk));
    add_inplace(da1, matmul_a_bt(dv, p.wv));
    detail::layer_norm_backward(da1, c.xhat1, c.rstd1, p.ln1_g, grads.ln1_g, grads.ln1_b);
}

/// out[k] = mean of in[floor(k*din/dout) .. ceil((k+1)*din/dout) - 1], per row.
inline Matrix adapt_dim(const Matrix& in, std::size_t d_out) {
    if (in.cols == 0 || d_out == 0) throw Error(Errc::invalid_config, "adapt_dim widths must be >= 1");
    if (in.cols == d_out) return in;
    Matrix out(in.rows, d_out);
    for (std::size_t k = 0; k < d_out; ++k) {
        const std::size_t lo = k * in.cols / d_out;
        const std::size_t hi = ((k + 1) * in.cols + d_out - 1) / d_out;
        for (std::size_t r = 0; r < in.rows; ++r) {
            double s = 0.0;
            for (std::size_t c = lo; c < hi; ++c) s += in(r, c);
            out(r, k) = s / static_cast<double>(hi - lo);
        }
    }
    return out;
}

inline Sample adapt_sample(const Sample& s, std::size_t d_out) {
    Sample out = s;
    out.visual = adapt_dim(s.visual, d_out);
    out.text = s.text.rows ? adapt_dim(s.text, d_out) : Matrix(0, d_out);
    return out;
}

/// r = round(ratio * n) (half away from zero), clamped to [0, n].
inline std::size_t r_from_ratio(double ratio, std::size_t n) {
    const double r = std::round(ratio * static_cast<double>(n));
    if (r <= 0.0) return 0;
    return std::min(static_cast<std::size_t>(r), n);
}

/// Bits at the r largest probabilities; equal probabilities favour the lower index.
inline Mask select_top_r(std::span<const double> probs, std::size_t r) {
    if (r > probs.size())
        throw Error(Errc::out_of_range, "r=" + std::to_string(r) + " exceeds n=" + std::to_string(probs.size()));
    std::vector<std::size_t> idx(probs.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
    Mask m{std::vector<std::uint8_t>(probs.size(), 0)};
    for (std::size_t k = 0; k < r; ++k) m.bits[idx[k]] = 1;
    return m;
}

}  // namespace evocomp
