#pragma once

// Terrain grids: elevations in meters, their unit-interval normalization,
// blend masks, bicubic resampling and hillshade previews.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "styledem/error.hpp"

namespace styledem {

// Row-major grid of values with width x height cells.
template <class V>
struct Grid {
    int width = 0;
    int height = 0;
    std::vector<V> values;

    Grid() = default;
    Grid(int w, int h, V fill = V{}) : width(w), height(h), values(static_cast<std::size_t>(w) * h, fill) {}
    Grid(int w, int h, std::vector<V> v) : width(w), height(h), values(std::move(v)) {
        if (values.size() != static_cast<std::size_t>(w) * h) fail_input("values", "grid size does not match dimensions");
    }

    std::size_t size() const noexcept { return values.size(); }
    V& at(int x, int y) { return values[static_cast<std::size_t>(y) * width + x]; }
    const V& at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
    const V& clamped(int x, int y) const {
        return at(std::clamp(x, 0, width - 1), std::clamp(y, 0, height - 1));
    }
    bool same_shape(int w, int h) const noexcept { return width == w && height == h; }
    template <class U>
    bool same_shape(const Grid<U>& o) const noexcept { return width == o.width && height == o.height; }
};

struct Origin {
    double x = 0;
    double y = 0;
};

// Terrain in meters. Invariants: width, height >= 1; cell_size > 0; finite elevations.
struct Heightfield {
    Grid<double> grid;
    double cell_size = 30.0;
    std::optional<Origin> origin;

    Heightfield() = default;
    Heightfield(int w, int h, double cell, double fill = 0.0) : grid(w, h, fill), cell_size(cell) {}
    Heightfield(int w, int h, double cell, std::vector<double> elevations)
        : grid(w, h, std::move(elevations)), cell_size(cell) {}

    int width() const noexcept { return grid.width; }
    int height() const noexcept { return grid.height; }
    double& at(int x, int y) { return grid.at(x, y); }
    double at(int x, int y) const { return grid.at(x, y); }
    std::span<const double> elevations() const noexcept { return grid.values; }
    std::span<double> elevations() noexcept { return grid.values; }
    double extent_x() const noexcept { return grid.width * cell_size; }
    double extent_y() const noexcept { return grid.height * cell_size; }
    double cell_area() const noexcept { return cell_size * cell_size; }

    double min_elevation() const { return *std::min_element(grid.values.begin(), grid.values.end()); }
    double max_elevation() const { return *std::max_element(grid.values.begin(), grid.values.end()); }

    // Throws InvalidInput naming the first broken invariant.
    void validate() const {
        if (grid.width < 1 || grid.height < 1) fail_input("dimensions", "heightfield must be at least 1x1");
        if (grid.values.size() != static_cast<std::size_t>(grid.width) * grid.height)
            fail_input("elevations", "elevation count does not match dimensions");
        if (!(cell_size > 0) || !std::isfinite(cell_size)) fail_input("cell_size", "cell size must be positive");
        for (std::size_t i = 0; i < grid.values.size(); ++i)
            if (!std::isfinite(grid.values[i]))
                fail_input("elevations", "non-finite elevation at cell (", std::to_string(i % grid.width), ",",
                           std::to_string(i / grid.width), ")");
    }
};

// Unit-interval terrain plus the meter range needed to undo the mapping.
struct NormalizedField {
    Grid<double> grid;
    double min_m = 0;
    double max_m = 0;

    int width() const noexcept { return grid.width; }
    int height() const noexcept { return grid.height; }
    double at(int x, int y) const { return grid.at(x, y); }

    void validate() const {
        if (grid.width < 1 || grid.height < 1) fail_input("dimensions", "field must be at least 1x1");
        if (!(min_m <= max_m)) fail_input("range", "min_m must not exceed max_m");
        for (double v : grid.values)
            if (!(v >= 0.0 && v <= 1.0)) fail_input("values", "normalized values must lie in [0,1]");
    }
};

// Per-cell blend weight in [0,1].
struct RegionMask {
    Grid<double> alpha;

    int width() const noexcept { return alpha.width; }
    int height() const noexcept { return alpha.height; }

    void validate() const {
        for (double a : alpha.values)
            if (!(a >= 0.0 && a <= 1.0)) fail_input("mask", "mask alpha must lie in [0,1]");
    }
};

// Linear map of [min, max] to [0, 1]; a flat field maps to 0.5.
inline NormalizedField normalize(const Heightfield& h) {
    h.validate();
    NormalizedField n;
    n.min_m = h.min_elevation();
    n.max_m = h.max_elevation();
    n.grid = Grid<double>(h.width(), h.height(), 0.5);
    const double range = n.max_m - n.min_m;
    if (range > 0)
        for (std::size_t i = 0; i < n.grid.size(); ++i)
            n.grid.values[i] = std::clamp((h.grid.values[i] - n.min_m) / range, 0.0, 1.0);
    return n;
}

inline Heightfield denormalize(const NormalizedField& n, double cell_size) {
    Heightfield h(n.width(), n.height(), cell_size);
    const double range = n.max_m - n.min_m;
    for (std::size_t i = 0; i < n.grid.size(); ++i) h.grid.values[i] = n.min_m + n.grid.values[i] * range;
    return h;
}

namespace detail {

// Catmull-Rom weights (a = -0.5) for fractional offset t in [0,1).
inline std::array<double, 4> catmull_rom_weights(double t) {
    const double t2 = t * t, t3 = t2 * t;
    return {(-t3 + 2 * t2 - t) * 0.5, (3 * t3 - 5 * t2 + 2) * 0.5, (-3 * t3 + 4 * t2 + t) * 0.5, (t3 - t2) * 0.5};
}

// Sample at integer index i of a 1D signal; outside [0, n) the signal is
// continued linearly from its two end samples.
template <class Get>
double extended(const Get& get, int n, int i) {
    if (n == 1) return get(0);
    if (i < 0) return get(0) + i * (get(1) - get(0));
    if (i >= n) return get(n - 1) + (i - n + 1) * (get(n - 1) - get(n - 2));
    return get(i);
}

// Source coordinate of destination cell i when n cells are resized to m,
// with cell centers aligned and clamped to the source sample range.
inline double source_coord(int i, int n, int m) {
    const double s = (i + 0.5) * static_cast<double>(n) / m - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(n - 1));
}

}  // namespace detail

// Bicubic (Catmull-Rom) resize that keeps the physical extent fixed. Sample
// positions are clamped to the source cell centers; the kernel's outer taps
// see a linear continuation so planes are reproduced exactly.
inline Grid<double> resample_grid(const Grid<double>& src, int new_width, int new_height) {
    if (new_width < 2 || new_height < 2) fail_input("dimensions", "resample target must be at least 2x2");
    const int W = src.width, H = src.height;
    // Horizontal pass into an intermediate new_width x H grid.
    Grid<double> tmp(new_width, H);
    for (int x = 0; x < new_width; ++x) {
        const double s = detail::source_coord(x, W, new_width);
        const int i = std::min(static_cast<int>(std::floor(s)), std::max(W - 2, 0));
        const auto w = detail::catmull_rom_weights(s - i);
        for (int y = 0; y < H; ++y) {
            auto get = [&](int k) { return src.at(k, y); };
            double acc = 0;
            for (int k = 0; k < 4; ++k) acc += w[k] * detail::extended(get, W, i - 1 + k);
            tmp.at(x, y) = acc;
        }
    }
    Grid<double> out(new_width, new_height);
    for (int y = 0; y < new_height; ++y) {
        const double s = detail::source_coord(y, H, new_height);
        const int j = std::min(static_cast<int>(std::floor(s)), std::max(H - 2, 0));
        const auto w = detail::catmull_rom_weights(s - j);
        for (int x = 0; x < new_width; ++x) {
            auto get = [&](int k) { return tmp.at(x, k); };
            double acc = 0;
            for (int k = 0; k < 4; ++k) acc += w[k] * detail::extended(get, H, j - 1 + k);
            out.at(x, y) = acc;
        }
    }
    return out;
}

inline Heightfield resample(const Heightfield& h, int new_width, int new_height) {
    h.validate();
    Heightfield out;
    out.grid = resample_grid(h.grid, new_width, new_height);
    out.cell_size = h.cell_size * static_cast<double>(h.width()) / new_width;
    out.origin = h.origin;
    return out;
}

inline NormalizedField resample(const NormalizedField& n, int new_width, int new_height) {
    NormalizedField out;
    out.grid = resample_grid(n.grid, new_width, new_height);
    for (double& v : out.grid.values) v = std::clamp(v, 0.0, 1.0);
    out.min_m = n.min_m;
    out.max_m = n.max_m;
    return out;
}

// Lambertian shaded relief. Azimuth is clockwise from north (up the grid,
// toward decreasing y); altitude is above the horizon. Output in [0,1].
inline Grid<double> hillshade(const Heightfield& h, double azimuth_deg, double altitude_deg) {
    h.validate();
    constexpr double deg = std::numbers::pi / 180.0;
    const double az = azimuth_deg * deg, alt = altitude_deg * deg;
    const double lx = std::cos(alt) * std::sin(az);
    const double ly = -std::cos(alt) * std::cos(az);
    const double lz = std::sin(alt);
    Grid<double> out(h.width(), h.height());
    for (int y = 0; y < h.height(); ++y)
        for (int x = 0; x < h.width(); ++x) {
            const int x0 = std::max(x - 1, 0), x1 = std::min(x + 1, h.width() - 1);
            const int y0 = std::max(y - 1, 0), y1 = std::min(y + 1, h.height() - 1);
            const double dzdx = x1 > x0 ? (h.at(x1, y) - h.at(x0, y)) / ((x1 - x0) * h.cell_size) : 0.0;
            const double dzdy = y1 > y0 ? (h.at(x, y1) - h.at(x, y0)) / ((y1 - y0) * h.cell_size) : 0.0;
            const double nx = -dzdx, ny = -dzdy, nz = 1.0;
            const double len = std::sqrt(nx * nx + ny * ny + nz * nz);
            out.at(x, y) = std::clamp((nx * lx + ny * ly + nz * lz) / len, 0.0, 1.0);
        }
    return out;
}

}  // namespace styledem
