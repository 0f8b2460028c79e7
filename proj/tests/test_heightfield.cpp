#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "styledem/heightfield.hpp"
#include "styledem/heightfield_io.hpp"

using namespace styledem;

namespace {

Heightfield random_field(int w, int h, std::uint64_t seed, double lo = -50, double hi = 900) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> d(lo, hi);
    Heightfield f(w, h, 30.0);
    for (double& v : f.grid.values) v = d(rng);
    return f;
}

// Keys cubic kernel with a = -0.5, as a function of distance.
double keys(double d) {
    d = std::abs(d);
    const double a = -0.5;
    if (d < 1) return (a + 2) * d * d * d - (a + 3) * d * d + 1;
    if (d < 2) return a * d * d * d - 5 * a * d * d + 8 * a * d - 4 * a;
    return 0;
}

// Reference bicubic: direct 16-tap sum, samples outside the grid continued
// linearly along each axis.
Grid<double> oracle_bicubic(const Grid<double>& g, int nw, int nh) {
    auto ext1 = [](auto get, int n, int i) {
        if (i < 0) return get(0) - (get(1) - get(0)) * (-i);
        if (i > n - 1) return get(n - 1) + (get(n - 1) - get(n - 2)) * (i - (n - 1));
        return get(i);
    };
    auto F = [&](int i, int j) {
        auto row = [&](int jj) { return ext1([&](int k) { return g.at(k, jj); }, g.width, i); };
        return ext1(row, g.height, j);
    };
    Grid<double> out(nw, nh);
    for (int y = 0; y < nh; ++y)
        for (int x = 0; x < nw; ++x) {
            double sx = (x + 0.5) * g.width / nw - 0.5, sy = (y + 0.5) * g.height / nh - 0.5;
            sx = std::min(std::max(sx, 0.0), g.width - 1.0);
            sy = std::min(std::max(sy, 0.0), g.height - 1.0);
            const int fx = static_cast<int>(std::floor(sx)), fy = static_cast<int>(std::floor(sy));
            double acc = 0;
            for (int j = fy - 1; j <= fy + 2; ++j)
                for (int i = fx - 1; i <= fx + 2; ++i) acc += keys(sx - i) * keys(sy - j) * F(i, j);
            out.at(x, y) = acc;
        }
    return out;
}

}  // namespace

TEST(Normalize, LinearEndpoints) {
    Heightfield h(3, 1, 10.0, std::vector<double>{0, 50, 100});
    auto n = normalize(h);
    EXPECT_DOUBLE_EQ(n.grid.values[0], 0.0);
    EXPECT_DOUBLE_EQ(n.grid.values[1], 0.5);
    EXPECT_DOUBLE_EQ(n.grid.values[2], 1.0);
    EXPECT_EQ(n.min_m, 0);
    EXPECT_EQ(n.max_m, 100);
}

TEST(Normalize, FlatMapsToHalf) {
    Heightfield h(4, 4, 10.0, 42.0);
    auto n = normalize(h);
    for (double v : n.grid.values) EXPECT_EQ(v, 0.5);
    EXPECT_EQ(n.min_m, 42);
    EXPECT_EQ(n.max_m, 42);
    auto back = denormalize(n, 10.0);
    for (double v : back.grid.values) EXPECT_EQ(v, 42.0);
}

TEST(Normalize, Thirds) {
    Heightfield h(4, 1, 1.0, std::vector<double>{10, 20, 30, 40});
    auto n = normalize(h);
    EXPECT_NEAR(n.grid.values[1], 1.0 / 3, 1e-15);
    EXPECT_NEAR(n.grid.values[2], 2.0 / 3, 1e-15);
}

TEST(Normalize, RejectsNonFinite) {
    Heightfield h(2, 2, 1.0, std::vector<double>{0, 1, NAN, 2});
    EXPECT_THROW(normalize(h), InvalidInput);
    h.grid.values[2] = INFINITY;
    EXPECT_THROW(normalize(h), InvalidInput);
}

TEST(Denormalize, InverseMap) {
    NormalizedField n{Grid<double>(3, 1, std::vector<double>{0, 0.5, 1}), 0, 100};
    auto h = denormalize(n, 5.0);
    EXPECT_EQ(h.grid.values, (std::vector<double>{0, 50, 100}));
    EXPECT_EQ(h.cell_size, 5.0);
}

TEST(Denormalize, QuantizedRoundTripWithinOneQuantum) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const auto h = random_field(17, 9, seed);
        const auto n = normalize(h);
        const auto q = quantize(n);
        NormalizedField nq = n;
        for (std::size_t i = 0; i < q.size(); ++i) nq.grid.values[i] = q[i] / 65535.0;
        const auto back = denormalize(nq, h.cell_size);
        const double quantum = (n.max_m - n.min_m) / 65535.0;
        for (std::size_t i = 0; i < h.grid.size(); ++i) EXPECT_LE(std::abs(back.grid.values[i] - h.grid.values[i]), quantum);
    }
}

TEST(Resample, ConstantStaysConstant) {
    Heightfield h(7, 5, 30.0, 123.25);
    for (auto [w, hh] : {std::pair{14, 10}, std::pair{3, 2}, std::pair{64, 64}}) {
        auto r = resample(h, w, hh);
        for (double v : r.grid.values) EXPECT_DOUBLE_EQ(v, 123.25);
    }
}

TEST(Resample, LinearRampReproduced) {
    Heightfield h(16, 12, 10.0);
    const double a = 3.5, b = -1.25;
    for (int y = 0; y < 12; ++y)
        for (int x = 0; x < 16; ++x) h.at(x, y) = 500 + a * x + b * y;
    auto r = resample(h, 32, 24);
    for (int y = 0; y < 24; ++y)
        for (int x = 0; x < 32; ++x) {
            // Destination cell centers map back to source coordinates.
            const double sx = std::clamp((x + 0.5) / 2 - 0.5, 0.0, 15.0);
            const double sy = std::clamp((y + 0.5) / 2 - 0.5, 0.0, 11.0);
            const double expect = 500 + a * sx + b * sy;
            EXPECT_LE(std::abs(r.at(x, y) - expect), 1e-6 * std::abs(expect));
        }
    EXPECT_DOUBLE_EQ(r.extent_x(), h.extent_x());
}

TEST(Resample, MatchesIndependentBicubic) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto h = random_field(16, 16, seed);
        const auto r = resample(h, 64, 64);
        const auto o = oracle_bicubic(h.grid, 64, 64);
        for (std::size_t i = 0; i < o.size(); ++i) EXPECT_NEAR(r.grid.values[i], o.values[i], 1e-5);
    }
    const auto h = random_field(13, 7, 99);
    const auto r = resample(h, 5, 19);
    const auto o = oracle_bicubic(h.grid, 5, 19);
    for (std::size_t i = 0; i < o.size(); ++i) EXPECT_NEAR(r.grid.values[i], o.values[i], 1e-5);
}

TEST(Resample, RejectsTinyTargets) {
    Heightfield h(4, 4, 1.0);
    EXPECT_THROW(resample(h, 1, 4), InvalidInput);
    EXPECT_THROW(resample(h, 4, 0), InvalidInput);
}

TEST(Hillshade, FlatIsSinAltitude) {
    Heightfield h(8, 8, 30.0, 250.0);
    auto s = hillshade(h, 315, 40);
    for (double v : s.values) EXPECT_NEAR(v, std::sin(40 * std::numbers::pi / 180), 1e-12);
}

TEST(Hillshade, FacingAwayAtGrazingAngleIsZero) {
    // Steep slope rising toward the south, lit from the south at 5 degrees: it faces away.
    Heightfield h(8, 8, 1.0);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) h.at(x, y) = y * 5.0;
    auto s = hillshade(h, 180, 5);
    for (double v : s.values) EXPECT_EQ(v, 0.0);
}

TEST(Hillshade, RangeWithinUnitInterval) {
    auto h = random_field(32, 32, 5, 0, 3000);
    for (double az : {0.0, 90.0, 200.0, 315.0}) {
        auto s = hillshade(h, az, 30);
        for (double v : s.values) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
    }
}

TEST(HeightfieldIo, PngRoundTrip) {
    const auto dir = std::filesystem::temp_directory_path() / "styledem_io_test";
    std::filesystem::create_directories(dir);
    const auto h = random_field(33, 21, 7);
    save_heightfield(h, dir / "t.png");
    const auto back = load_heightfield(dir / "t.png");
    ASSERT_EQ(back.width(), 33);
    ASSERT_EQ(back.height(), 21);
    EXPECT_EQ(back.cell_size, h.cell_size);
    EXPECT_EQ(back.min_elevation(), h.min_elevation());
    EXPECT_EQ(back.max_elevation(), h.max_elevation());
    const double quantum = (h.max_elevation() - h.min_elevation()) / 65535.0;
    for (std::size_t i = 0; i < h.grid.size(); ++i) EXPECT_LE(std::abs(back.grid.values[i] - h.grid.values[i]), quantum);
    std::filesystem::remove_all(dir);
}

TEST(HeightfieldIo, SixteenBitSamplesUseFullRange) {
    Heightfield h(2, 1, 1.0, std::vector<double>{0, 10});
    auto [png, meta] = encode_heightfield(h);
    auto img = decode_png_gray(png);
    EXPECT_EQ(img.bit_depth, 16);
    EXPECT_EQ(img.samples[0], 0);
    EXPECT_EQ(img.samples[1], 65535);
}

TEST(HeightfieldIo, MissingSidecarFallsBack) {
    const auto dir = std::filesystem::temp_directory_path() / "styledem_io_nosidecar";
    std::filesystem::create_directories(dir);
    Heightfield h(2, 1, 5.0, std::vector<double>{0, 10});
    save_heightfield(h, dir / "t.png");
    std::filesystem::remove(dir / "t.json");
    const auto back = load_heightfield(dir / "t.png");
    EXPECT_EQ(back.cell_size, 30.0);
    EXPECT_EQ(back.at(0, 0), 0.0);
    EXPECT_EQ(back.at(1, 0), 1000.0);
    std::filesystem::remove_all(dir);
}

TEST(HeightfieldIo, CorruptPngRejected) {
    EXPECT_THROW(decode_png_gray("not a png at all"), IoError);
}
