#include <gtest/gtest.h>

#include <cstring>
#include <random>

#include "styledem/toolbox.hpp"

using namespace styledem;
using namespace styledem::toolbox;

namespace {

LatentWPlus random_latent(int L, int D, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> d;
    LatentWPlus w(L, D);
    for (float& v : w.values()) v = d(rng);
    return w;
}

bool bit_equal(const LatentWPlus& a, const LatentWPlus& b) {
    return a.same_shape(b) && std::memcmp(a.values().data(), b.values().data(), a.values().size() * sizeof(float)) == 0;
}

NetworkConfig tiny_config() {
    NetworkConfig c;
    c.resolution = 16;
    c.latent_dim = 16;
    c.mapping_layers = 2;
    c.channel_base = 64;
    c.channel_max = 8;
    return c;
}

}  // namespace

TEST(StyleMix, RowsComeFromTheRightSource) {
    const auto u = random_latent(18, 8, 1), v = random_latent(18, 8, 2);
    for (int i = 0; i <= 18; ++i) {
        const auto w = style_mix(u, v, i);
        for (int l = 0; l < 18; ++l) {
            const auto& src = l < i ? u : v;
            EXPECT_EQ(0, std::memcmp(w.row(l).data(), src.row(l).data(), 8 * sizeof(float))) << "i=" << i << " l=" << l;
        }
    }
    EXPECT_TRUE(bit_equal(style_mix(u, v, 0), v));
    EXPECT_TRUE(bit_equal(style_mix(u, v, 18), u));
}

TEST(StyleMix, RejectsBadIndexAndShape) {
    const auto u = random_latent(10, 4, 1), v = random_latent(10, 4, 2);
    EXPECT_THROW(style_mix(u, v, -1), InvalidInput);
    EXPECT_THROW(style_mix(u, v, 11), InvalidInput);
    EXPECT_THROW(style_mix(u, random_latent(10, 5, 3), 2), InvalidInput);
}

TEST(StyleMix, ChainComposes) {
    const auto a = random_latent(10, 4, 1), b = random_latent(10, 4, 2), c = random_latent(10, 4, 3);
    const auto w = style_mix_chain({a, b, c}, {3, 7});
    for (int l = 0; l < 10; ++l) {
        const auto& src = l < 3 ? a : (l < 7 ? b : c);
        EXPECT_EQ(0, std::memcmp(w.row(l).data(), src.row(l).data(), 4 * sizeof(float)));
    }
}

TEST(Interpolate, EndpointsExact) {
    const auto u = random_latent(10, 16, 1), v = random_latent(10, 16, 2);
    EXPECT_TRUE(bit_equal(interpolate(u, v, 0.0), u));
    EXPECT_TRUE(bit_equal(interpolate(u, v, 1.0), v));
}

TEST(Interpolate, SymmetricBitExact) {
    const auto u = random_latent(10, 16, 1), v = random_latent(10, 16, 2);
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> d(0, 1);
    for (int k = 0; k < 200; ++k) {
        const double a = d(rng);
        EXPECT_TRUE(bit_equal(interpolate(u, v, a), interpolate(v, u, 1.0 - a))) << a;
    }
    EXPECT_TRUE(bit_equal(interpolate(u, v, 0.3), interpolate(v, u, 0.7)));
}

TEST(Interpolate, MidpointIsMean) {
    const auto u = random_latent(4, 4, 1), v = random_latent(4, 4, 2);
    const auto m = interpolate(u, v, 0.5);
    for (std::size_t i = 0; i < m.values().size(); ++i)
        EXPECT_NEAR(m.values()[i], 0.5 * (u.values()[i] + v.values()[i]), 1e-6);
}

TEST(Interpolate, ExtrapolationGated) {
    const auto u = random_latent(4, 4, 1), v = random_latent(4, 4, 2);
    EXPECT_THROW(interpolate(u, v, 1.5), InvalidInput);
    EXPECT_THROW(interpolate(u, v, -0.1), InvalidInput);
    const auto w = interpolate(u, v, 1.5, true);
    EXPECT_NEAR(w.values()[0], -0.5 * u.values()[0] + 1.5 * v.values()[0], 1e-5);
}

TEST(RegionBlend, ExactWhereMaskIsBinary) {
    Heightfield a(6, 4, 30.0), b(6, 4, 30.0);
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> d(-100, 3000);
    for (double& v : a.grid.values) v = d(rng);
    for (double& v : b.grid.values) v = d(rng);
    RegionMask m{Grid<double>(6, 4, 0.0)};
    for (int x = 0; x < 6; ++x) m.alpha.at(x, 1) = 1.0;
    m.alpha.at(2, 2) = 0.25;
    const auto out = region_blend(a, b, m);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 6; ++x) {
            if (y == 1) EXPECT_EQ(out.at(x, y), b.at(x, y));
            else if (x == 2 && y == 2) EXPECT_DOUBLE_EQ(out.at(x, y), 0.75 * a.at(x, y) + 0.25 * b.at(x, y));
            else EXPECT_EQ(out.at(x, y), a.at(x, y));
        }
}

TEST(RegionBlend, RejectsMismatch) {
    Heightfield a(6, 4, 30.0), b(5, 4, 30.0);
    RegionMask m{Grid<double>(6, 4, 0.0)};
    EXPECT_THROW(region_blend(a, b, m), InvalidInput);
    RegionMask bad{Grid<double>(6, 4, 1.5)};
    EXPECT_THROW(region_blend(a, a, bad), InvalidInput);
}

TEST(BrushMask, CoreFullAndFarZero) {
    const auto m = brush_mask(40, 40, {{20, 20}}, 8.0, 0.5);
    EXPECT_EQ(m.alpha.at(20, 20), 1.0);
    EXPECT_EQ(m.alpha.at(23, 20), 1.0);
    EXPECT_LT(m.alpha.at(27, 20), 1.0);
    EXPECT_LT(m.alpha.at(0, 0), 1e-6);
    EXPECT_NO_THROW(m.validate());
}

TEST(Invert, NeverWorseThanInitialization) {
    auto b = ModelBundle::create(tiny_config(), 3);
    const auto target = synthesize(broadcast(map_latent(sample_z(5, b.dim()), b), b), b);
    InvertConfig cfg;
    cfg.steps = 15;
    cfg.lr = 0.05;
    const auto r = optimize_invert(target, b, cfg);
    ASSERT_EQ(r.loss_trace.size(), 16u);
    EXPECT_LE(r.best_loss, r.loss_trace.front());
    EXPECT_LT(r.best_loss, r.loss_trace.front());
    // Generator weights are left trainable afterwards.
    EXPECT_TRUE(b.generator->params().items().front().second.requires_grad());
}

TEST(Invert, CancelStopsEarly) {
    auto b = ModelBundle::create(tiny_config(), 3);
    const auto target = synthesize(mean_latent(b), b);
    std::atomic<bool> cancel{true};
    InvertConfig cfg;
    cfg.cancel = &cancel;
    const auto r = optimize_invert(target, b, cfg);
    EXPECT_TRUE(r.cancelled);
    EXPECT_TRUE(r.loss_trace.empty());
}

TEST(Refine, KeepsExtentAndRange) {
    auto b = ModelBundle::create(tiny_config(), 3);
    Heightfield t(40, 40, 10.0);
    for (int y = 0; y < 40; ++y)
        for (int x = 0; x < 40; ++x) t.at(x, y) = 100 + 3 * x + y;
    const auto r = refine(t, b);
    EXPECT_EQ(r.width(), 16);
    EXPECT_DOUBLE_EQ(r.extent_x(), t.extent_x());
    EXPECT_GE(r.min_elevation(), t.min_elevation() - 1e-9);
    EXPECT_LE(r.max_elevation(), t.max_elevation() + 1e-9);
}
