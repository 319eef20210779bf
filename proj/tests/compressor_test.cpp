#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <thread>

#include "evocomp/compressor.hpp"
#include "test_util.hpp"

using namespace evocomp;
using evocomp::testing::random_sample;

namespace {

CompressorConfig tiny(std::uint64_t seed = 1, bool positions = false) {
    CompressorConfig c;
    c.d_model = 8;
    c.heads = 2;
    c.mlp_ratio = 2;
    c.use_positions = positions;
    c.seed = seed;
    c.init_std = 0.3;
    return c;
}

}  // namespace

TEST(Forward, Shapes) {
    Rng rng(1);
    const auto cfg = tiny();
    const auto s = random_sample("f", 5, 3, 8, rng);
    const auto out = forward(s, init_params(cfg), cfg);
    EXPECT_EQ(out.probs.size(), 5u);
    EXPECT_EQ(out.visual_reps.rows + out.text_reps.rows, 8u);
    EXPECT_EQ(out.visual_reps.cols, 8u);
    for (double p : out.probs) {
        EXPECT_GT(p, 0.0);
        EXPECT_LT(p, 1.0);
    }
}

TEST(Forward, ZeroWeightsAreIdentity) {
    Rng rng(2);
    for (bool positions : {false, true}) {
        const auto cfg = tiny(3, positions);
        const auto s = random_sample("z", 6, 2, 8, rng);
        auto p = init_params(cfg).zeros_like();
        p.cls_w = Matrix(1, 8);
        for (auto& x : p.cls_w.data) x = standard_normal(rng);
        p.cls_b.data[0] = 0.25;
        const auto out = forward(s, p, cfg);
        EXPECT_EQ(out.visual_reps, s.visual);
        EXPECT_EQ(out.text_reps, s.text);
        for (std::size_t i = 0; i < 6; ++i) {
            double z = 0.25;
            for (std::size_t e = 0; e < 8; ++e) z += s.visual(i, e) * p.cls_w.data[e];
            EXPECT_EQ(out.probs[i], clamp_prob(ops::sigmoid(z)));
        }
    }
}

TEST(Forward, VisualPermutationEquivariance) {
    Rng rng(3);
    for (int t = 0; t < 20; ++t) {
        const auto cfg = tiny(t);
        const auto params = init_params(cfg);
        const auto s = random_sample("e", 7, 3, 8, rng);
        std::vector<std::size_t> perm(7);
        std::iota(perm.begin(), perm.end(), 0);
        for (std::size_t i = 7; i > 1; --i) std::swap(perm[i - 1], perm[uniform_index(rng, i)]);
        Sample ps = s;
        for (std::size_t i = 0; i < 7; ++i)
            for (std::size_t e = 0; e < 8; ++e) ps.visual(i, e) = s.visual(perm[i], e);
        const auto a = forward(s, params, cfg), b = forward(ps, params, cfg);
        for (std::size_t i = 0; i < 7; ++i) EXPECT_NEAR(b.probs[i], a.probs[perm[i]], 1e-10);
    }
}

TEST(Forward, PositionsBreakPermutationSymmetry) {
    Rng rng(4);
    const auto cfg = tiny(5, true);
    const auto params = init_params(cfg);
    const auto s = random_sample("e", 4, 0, 8, rng);
    Sample ps = s;
    for (std::size_t e = 0; e < 8; ++e) std::swap(ps.visual(0, e), ps.visual(3, e));
    const auto a = forward(s, params, cfg), b = forward(ps, params, cfg);
    EXPECT_GT(std::abs(b.probs[0] - a.probs[3]), 1e-12);
}

TEST(Forward, WidthMismatch) {
    Rng rng(5);
    const auto cfg = tiny();
    const auto s = random_sample("w", 3, 1, 6, rng);
    EXPECT_THROW(forward(s, init_params(cfg), cfg), Error);
}

TEST(Forward, NoTextDropsTextRows) {
    Rng rng(6);
    auto cfg = tiny();
    cfg.no_text = true;
    const auto s = random_sample("n", 4, 3, 8, rng);
    const auto out = forward(s, init_params(cfg), cfg);
    EXPECT_EQ(out.text_reps.rows, 0u);
    Sample bare = s;
    bare.text = Matrix(0, 8);
    EXPECT_EQ(forward(bare, init_params(cfg), cfg).probs, out.probs);
}

TEST(Forward, ConcurrentCallsAgree) {
    Rng rng(7);
    const auto cfg = tiny();
    const auto params = init_params(cfg);
    const auto s = random_sample("c", 6, 2, 8, rng);
    const auto ref = forward(s, params, cfg).probs;
    std::vector<std::vector<double>> got(8);
    {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < got.size(); ++t) pool.emplace_back([&, t] { got[t] = forward(s, params, cfg).probs; });
    }
    for (const auto& g : got) EXPECT_EQ(g, ref);
}

TEST(InitParams, SeededDeterminism) {
    EXPECT_EQ(init_params(tiny(9)), init_params(tiny(9)));
    EXPECT_FALSE(init_params(tiny(9)) == init_params(tiny(10)));
}

TEST(InitParams, DonorCopiedExceptClassifier) {
    const auto donor = init_params(tiny(1));
    const auto p = init_params(tiny(2), &donor);
    p.for_each([&](std::string_view name, const Matrix& m) {
        donor.for_each([&](std::string_view dn, const Matrix& dm) {
            if (dn != name) return;
            if (name == "classifier.weight") {
                EXPECT_FALSE(m == dm);
            } else if (!is_classifier_param(name)) {
                EXPECT_EQ(m, dm) << name;
            }
        });
    });
}

TEST(InitParams, DonorShapeMismatch) {
    auto big = tiny();
    big.d_model = 16;
    const auto donor = init_params(big);
    try {
        init_params(tiny(), &donor);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::dimension_mismatch);
    }
}

TEST(Config, Validation) {
    auto c = tiny();
    c.heads = 3;
    EXPECT_THROW(validate(c), Error);
    c = tiny();
    c.lr0 = 0.0;
    EXPECT_THROW(validate(c), Error);
    c = tiny();
    c.d_model = 6;
    c.heads = 2;
    c.use_positions = true;
    EXPECT_THROW(validate(c), Error);
}

TEST(Config, LossKindNames) {
    for (auto k : {LossKind::ghm_cs, LossKind::ghm, LossKind::ce_cs, LossKind::ce, LossKind::focal_cs})
        EXPECT_EQ(parse_loss_kind(loss_kind_name(k)), k);
    EXPECT_THROW(parse_loss_kind("mse"), Error);
}

TEST(AdaptDim, Examples) {
    EXPECT_EQ(adapt_dim(Matrix::from_rows({{1, 2, 3, 4}}), 2), Matrix::from_rows({{1.5, 3.5}}));
    EXPECT_EQ(adapt_dim(Matrix::from_rows({{1, 2, 3}}), 2), Matrix::from_rows({{1.5, 2.5}}));
    const auto m = Matrix::from_rows({{1, 2, 3}, {4, 5, 6}});
    EXPECT_EQ(adapt_dim(m, 3), m);
}

TEST(AdaptDim, Upsampling) {
    EXPECT_EQ(adapt_dim(Matrix::from_rows({{1, 3}}), 4), Matrix::from_rows({{1, 1, 3, 3}}));
}

TEST(TopR, Examples) {
    const std::vector<double> p{0.9, 0.1, 0.5, 0.5};
    EXPECT_EQ(select_top_r(p, 2).bits, (std::vector<std::uint8_t>{1, 0, 1, 0}));
    EXPECT_EQ(select_top_r(p, 4).bits, (std::vector<std::uint8_t>{1, 1, 1, 1}));
    EXPECT_EQ(select_top_r(p, 0).bits, (std::vector<std::uint8_t>{0, 0, 0, 0}));
    EXPECT_THROW(select_top_r(p, 5), Error);
}

TEST(TopR, RatioRounding) {
    EXPECT_EQ(r_from_ratio(1.0 / 3.0, 24), 8u);
    EXPECT_EQ(r_from_ratio(0.5, 5), 3u);
    EXPECT_EQ(r_from_ratio(0.0, 5), 0u);
    EXPECT_EQ(r_from_ratio(1.0, 5), 5u);
}

TEST(TopR, ExactlyRBitsAtTheLargest) {
    Rng rng(8);
    for (int t = 0; t < 100; ++t) {
        std::vector<double> p(12);
        for (auto& x : p) x = std::round(uniform01(rng) * 5) / 5;
        const std::size_t r = uniform_index(rng, 13);
        const auto m = select_top_r(p, r);
        EXPECT_EQ(m.retained(), r);
        double kept_min = 2, dropped_max = -1;
        for (std::size_t i = 0; i < 12; ++i) {
            if (m.bits[i])
                kept_min = std::min(kept_min, p[i]);
            else
                dropped_max = std::max(dropped_max, p[i]);
        }
        if (r > 0 && r < 12) {
            EXPECT_GE(kept_min, dropped_max);
        }
    }
}
