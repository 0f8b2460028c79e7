#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <random>

#include "styledem/dataset.hpp"
#include "styledem/superres.hpp"

using namespace styledem;
using namespace styledem::superres;

namespace {

// Exhaustive search over every top-to-bottom path with |step| <= 1. Ties
// resolve to the lexicographically smallest path.
std::pair<double, std::vector<int>> brute_force_path(const Grid<double>& e) {
    const int W = e.width, H = e.height;
    double best = std::numeric_limits<double>::infinity();
    std::vector<int> best_path, path(H);
    std::function<void(int, double)> rec = [&](int y, double acc) {
        if (y == H) {
            if (acc < best) {
                best = acc;
                best_path = path;
            }
            return;
        }
        const int lo = y == 0 ? 0 : std::max(0, path[y - 1] - 1);
        const int hi = y == 0 ? W - 1 : std::min(W - 1, path[y - 1] + 1);
        for (int x = lo; x <= hi; ++x) {
            path[y] = x;
            rec(y + 1, acc + e.at(x, y));
        }
    };
    rec(0, 0.0);
    return {best, best_path};
}

// Returns the input patch with deterministic high-frequency texture added.
class TexturingModel : public PatchModel {
public:
    int resolution() const override { return 32; }
    std::vector<NormalizedField> run(const std::vector<NormalizedField>& patches) override {
        std::vector<NormalizedField> out;
        for (const auto& p : patches) {
            NormalizedField f = p;
            std::mt19937_64 rng(calls_++);
            std::uniform_real_distribution<double> d(-0.01, 0.01);
            for (double& v : f.grid.values) v = std::clamp(v + d(rng), 0.0, 1.0);
            out.push_back(std::move(f));
            ++encoder_passes;
            ++generator_passes;
        }
        return out;
    }

private:
    std::uint64_t calls_ = 0;
};

class FailingModel : public TexturingModel {
public:
    std::vector<NormalizedField> run(const std::vector<NormalizedField>& patches) override {
        if (++n_ == 7) throw IoError("boom");
        return TexturingModel::run(patches);
    }
    int n_ = 0;
};

double percentile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    return v[static_cast<std::size_t>(q * (v.size() - 1))];
}

}  // namespace

TEST(Decompose, PatchCounts) {
    const auto g3 = decompose(3 * 16, 3 * 16, 16);
    EXPECT_EQ(g3.kx, 3);
    EXPECT_EQ(g3.patches.size(), 25u);
    EXPECT_EQ(g3.count(Layer::base), 9u);
    EXPECT_EQ(g3.count(Layer::offset_x), 6u);
    EXPECT_EQ(g3.count(Layer::offset_xy), 4u);
    EXPECT_EQ(decompose(6 * 16, 6 * 16, 16).patches.size(), 121u);
    for (int k = 2; k <= 8; ++k) EXPECT_EQ(decompose(k * 8, k * 8, 8).patches.size(), static_cast<std::size_t>((2 * k - 1) * (2 * k - 1)));
}

TEST(Decompose, SinglePatchAndPadding) {
    const auto g1 = decompose(10, 12, 16);
    EXPECT_EQ(g1.patches.size(), 1u);
    const auto g = decompose(40, 33, 16);
    EXPECT_EQ(g.kx, 3);
    EXPECT_EQ(g.ky, 3);
    EXPECT_EQ(g.padded_width, 48);
    EXPECT_EQ(decompose(16, 16, 16).patches.size(), 1u);
}

TEST(Decompose, OverlapsCoverBaseSeams) {
    for (int k = 2; k <= 6; ++k) EXPECT_TRUE(covers_base_seams(decompose(k * 16, k * 16, 16)));
    EXPECT_TRUE(covers_base_seams(decompose(48, 32, 16)));
}

TEST(ReflectPad, MirrorsWithoutRepeatingEdge) {
    Heightfield t(3, 1, 1.0, std::vector<double>{1, 2, 3});
    const auto p = reflect_pad(t, 6, 1);
    EXPECT_EQ(p.grid.values, (std::vector<double>{1, 2, 3, 2, 1, 2}));
}

TEST(HistogramRetarget, ConstantReference) {
    NormalizedField a{Grid<double>(4, 4), 0, 1};
    for (std::size_t i = 0; i < a.grid.size(); ++i) a.grid.values[i] = i / 16.0;
    Heightfield ref(2, 2, 30.0, 77.0);
    for (double v : histogram_retarget(a, ref).grid.values) EXPECT_EQ(v, 77.0);
}

TEST(HistogramRetarget, RankIdenticalIsIdentity) {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> d(0, 500);
    Heightfield ref(8, 8, 30.0);
    for (double& v : ref.grid.values) v = d(rng);
    const auto n = normalize(ref);
    const auto out = histogram_retarget(n, ref);
    EXPECT_EQ(out.grid.values, ref.grid.values);
}

TEST(HistogramRetarget, QuantilesRangeAndMonotonicity) {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> d(0, 1);
    std::uniform_int_distribution<int> sz(2, 12);
    for (int trial = 0; trial < 500; ++trial) {
        const int aw = sz(rng), ah = sz(rng), rw = sz(rng), rh = sz(rng);
        NormalizedField a{Grid<double>(aw, ah), 0, 1};
        for (double& v : a.grid.values) v = std::floor(d(rng) * 64) / 64;  // ties on purpose
        Heightfield ref(rw, rh, 30.0);
        for (double& v : ref.grid.values) v = 100 + 900 * d(rng);
        const auto out = histogram_retarget(a, ref);
        std::vector<double> rs = ref.grid.values, os = out.grid.values;
        std::sort(rs.begin(), rs.end());
        std::sort(os.begin(), os.end());
        EXPECT_EQ(os.front(), rs.front());
        EXPECT_EQ(os.back(), rs.back());
        const std::size_t N = os.size(), M = rs.size();
        for (std::size_t r = 0; r < N; ++r) {
            const double pos = static_cast<double>(r) * (M - 1) / (N - 1);
            EXPECT_GE(os[r], rs[static_cast<std::size_t>(std::floor(pos))]);
            EXPECT_LE(os[r], rs[static_cast<std::size_t>(std::ceil(pos))]);
        }
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t j = 0; j < N; ++j)
                if (a.grid.values[i] < a.grid.values[j]) ASSERT_LE(out.grid.values[i], out.grid.values[j]);
    }
}

TEST(SeamCut, MatchesExhaustiveSearch) {
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> w(3, 8), h(1, 8), q(0, 40);
    const auto t0 = std::chrono::steady_clock::now();
    for (int trial = 0; trial < 1000; ++trial) {
        Grid<double> a(w(rng), h(rng)), b(a.width, a.height);
        // Quarter-meter values keep every squared difference and sum exact.
        for (double& v : a.values) v = q(rng) * 0.25;
        for (double& v : b.values) v = q(rng) * 0.25;
        const auto path = seam_cut(a, b);
        const auto e = squared_difference(a, b);
        const auto [cost, oracle_path] = brute_force_path(e);
        ASSERT_EQ(seam_cost(e, path), cost);
        ASSERT_EQ(path, oracle_path);
        for (std::size_t y = 1; y < path.size(); ++y) ASSERT_LE(std::abs(path[y] - path[y - 1]), 1);
    }
    EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 10.0);
}

TEST(SeamCut, ContinuousValues) {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> d(0, 1);
    for (int trial = 0; trial < 200; ++trial) {
        Grid<double> e(6, 7);
        for (double& v : e.values) v = d(rng);
        EXPECT_NEAR(seam_cost(e, min_error_path(e)), brute_force_path(e).first, 1e-12);
    }
}

TEST(SeamCut, FollowsZeroColumnAndZeroSurface) {
    Grid<double> e(6, 5, 9.0);
    for (int y = 0; y < 5; ++y) e.at(3, y) = 0;
    EXPECT_EQ(min_error_path(e), std::vector<int>(5, 3));
    Grid<double> a(5, 4, 1.0);
    EXPECT_EQ(seam_cut(a, a), std::vector<int>(4, 0));
    Grid<double> narrow(2, 3, 1.0);
    EXPECT_EQ(min_error_path(narrow), std::vector<int>(3, 0));
}

TEST(Amplify, PassCountsResolutionAndRanges) {
    auto t = dataset::synthesize_fbm_tile(7, 64, 5, 0.8);
    t = resample(t, 48, 48);  // 3x3 patches of 16 cells
    TexturingModel model;
    const auto r = amplify(t, model, 2);
    EXPECT_EQ(r.encoder_passes, 25u);
    EXPECT_EQ(r.generator_passes, 25u);
    EXPECT_EQ(r.terrain.width(), 96);
    EXPECT_EQ(r.terrain.height(), 96);
    EXPECT_DOUBLE_EQ(r.terrain.cell_size, t.cell_size / 2);
    const auto padded = reflect_pad(t, r.grid.padded_width, r.grid.padded_height);
    for (std::size_t i = 0; i < r.grid.patches.size(); ++i) {
        const auto& p = r.grid.patches[i];
        double lo = 1e300, hi = -1e300;
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x) {
                lo = std::min(lo, padded.at(p.x + x, p.y + y));
                hi = std::max(hi, padded.at(p.x + x, p.y + y));
            }
        EXPECT_EQ(r.patch_ranges[i].first, lo);
        EXPECT_EQ(r.patch_ranges[i].second, hi);
    }
}

TEST(Amplify, SeamQuality) {
    for (std::uint64_t seed : {1, 2, 3}) {
        const auto t = resample(dataset::synthesize_fbm_tile(seed, 64, 5, 0.8), 64, 64);
        TexturingModel model;
        const auto r = amplify(t, model, 2);
        const auto& h = r.terrain;
        std::vector<double> all, seam;
        for (int y = 0; y < h.height(); ++y)
            for (int x = 1; x < h.width(); ++x) all.push_back(std::abs(h.at(x, y) - h.at(x - 1, y)));
        for (int y = 1; y < h.height(); ++y)
            for (int x = 0; x < h.width(); ++x) all.push_back(std::abs(h.at(x, y) - h.at(x, y - 1)));
        const int S = 32;
        for (int c = S; c < h.width(); c += S)
            for (int y = 0; y < h.height(); ++y) seam.push_back(std::abs(h.at(c, y) - h.at(c - 1, y)));
        for (int c = S; c < h.height(); c += S)
            for (int x = 0; x < h.width(); ++x) seam.push_back(std::abs(h.at(x, c) - h.at(x, c - 1)));
        // Jumps across patch boundaries look like jumps anywhere else.
        EXPECT_LE(percentile(seam, 0.5), 1.25 * percentile(all, 0.5)) << "seed " << seed;
        EXPECT_LE(percentile(seam, 0.95), percentile(all, 0.99)) << "seed " << seed;
    }
}

TEST(Amplify, SinglePatchPassthrough) {
    Heightfield t(10, 10, 30.0);
    for (int y = 0; y < 10; ++y)
        for (int x = 0; x < 10; ++x) t.at(x, y) = x * 2 + y;
    TexturingModel model;
    const auto r = amplify(t, model, 2);
    EXPECT_EQ(r.grid.patches.size(), 1u);
    EXPECT_EQ(r.terrain.width(), 20);
    EXPECT_DOUBLE_EQ(r.terrain.cell_size, 15.0);
}

TEST(Amplify, PatchFailureNamesPatch) {
    const auto t = resample(dataset::synthesize_fbm_tile(7, 64, 5, 0.8), 48, 48);
    FailingModel model;
    try {
        amplify(t, model, 2);
        FAIL() << "expected PatchError";
    } catch (const PatchError& e) {
        EXPECT_EQ(e.stage(), "model");
        EXPECT_NE(std::string(e.what()).find("base patch (0,2)"), std::string::npos) << e.what();
    }
}

TEST(Amplify, RejectsBadUpscale) {
    Heightfield t(32, 32, 30.0, 1.0);
    TexturingModel model;
    EXPECT_THROW(amplify(t, model, 3), InvalidInput);
}

TEST(Cascade, OrderingAndComposition) {
    EXPECT_NO_THROW(check_cascade_order("30m", "5m"));
    EXPECT_THROW(check_cascade_order("5m", "30m"), InvalidInput);
    EXPECT_THROW(check_cascade_order("30m", "30m"), InvalidInput);
    const auto t = resample(dataset::synthesize_fbm_tile(7, 64, 5, 0.8), 32, 32);
    TexturingModel c1, f1, c2, f2;
    const auto out = cascade(t, c1, "30m", 2, f1, "5m", 2);
    const auto ref = amplify(amplify(t, c2, 2).terrain, f2, 2).terrain;
    EXPECT_EQ(out.grid.values, ref.grid.values);
    EXPECT_DOUBLE_EQ(out.cell_size, t.cell_size / 4);
}
