#pragma once

// Drainage consistency and least-cost breaching. Boundary cells drain off
// the map; flow follows non-ascending 8-connected steps, so flats drain.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <queue>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "styledem/heightfield.hpp"

namespace styledem::hydrology {

struct Cell {
    int x = 0;
    int y = 0;
    bool operator==(const Cell&) const = default;
};

struct DrainageReport {
    double v_T = 0;              // m^3 removed
    double v_T_per_km2 = 0;      // m^3 per km^2 of terrain
    Grid<double> carve_depth;    // m, >= 0
    std::size_t pit_count_before = 0;
    bool drains_completely = false;
};

struct BreachResult {
    Heightfield terrain;
    DrainageReport report;
};

struct ConsistencyResult {
    bool consistent = false;
    std::vector<Cell> pits;
};

inline constexpr int kDx[8] = {-1, 0, 1, -1, 1, -1, 0, 1};
inline constexpr int kDy[8] = {-1, -1, -1, 0, 0, 1, 1, 1};

namespace detail {

inline bool on_boundary(int x, int y, int w, int h) { return x == 0 || y == 0 || x == w - 1 || y == h - 1; }

// Grows the drained set from `seeds` against the flow: a neighbor drains
// through a drained cell when it is at least as high.
inline void grow_drained(const Heightfield& t, std::vector<char>& drained, std::deque<int> queue) {
    const int w = t.width(), h = t.height();
    while (!queue.empty()) {
        const int i = queue.front();
        queue.pop_front();
        const int x = i % w, y = i / w;
        for (int k = 0; k < 8; ++k) {
            const int nx = x + kDx[k], ny = y + kDy[k];
            if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
            const int j = ny * w + nx;
            if (!drained[j] && t.grid.values[j] >= t.grid.values[i]) {
                drained[j] = 1;
                queue.push_back(j);
            }
        }
    }
}

inline std::vector<char> drained_mask(const Heightfield& t) {
    const int w = t.width(), h = t.height();
    std::vector<char> drained(t.grid.size(), 0);
    std::deque<int> queue;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (on_boundary(x, y, w, h)) {
                drained[y * w + x] = 1;
                queue.push_back(y * w + x);
            }
    grow_drained(t, drained, std::move(queue));
    return drained;
}

}  // namespace detail

// Cells that cannot reach the boundary along a non-ascending path.
inline std::vector<Cell> undrained_cells(const Heightfield& t) {
    t.validate();
    const auto drained = detail::drained_mask(t);
    std::vector<Cell> out;
    for (std::size_t i = 0; i < drained.size(); ++i)
        if (!drained[i]) out.push_back({static_cast<int>(i % t.width()), static_cast<int>(i / t.width())});
    return out;
}

// Undrained cells with no strictly lower neighbor: single-cell pits and the
// floors of closed depressions. Empty exactly when every cell drains.
inline std::vector<Cell> find_pits(const Heightfield& t) {
    t.validate();
    const int w = t.width(), h = t.height();
    const auto drained = detail::drained_mask(t);
    std::vector<Cell> out;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (drained[y * w + x]) continue;
            bool lower = false;
            for (int k = 0; k < 8 && !lower; ++k) {
                const int nx = x + kDx[k], ny = y + kDy[k];
                if (nx >= 0 && ny >= 0 && nx < w && ny < h && t.at(nx, ny) < t.at(x, y)) lower = true;
            }
            if (!lower) out.push_back({x, y});
        }
    return out;
}

inline ConsistencyResult drainage_consistency(const Heightfield& t) {
    ConsistencyResult r;
    r.pits = find_pits(t);
    r.consistent = r.pits.empty();
    return r;
}

// Repeatedly takes the lowest undrained cell p and carves the path of least
// total lowering to a drained cell no higher than p (or to the boundary)
// down to p's elevation. Elevations are only lowered.
inline BreachResult breach(const Heightfield& input) {
    input.validate();
    BreachResult r{input, {}};
    Heightfield& t = r.terrain;
    const int w = t.width(), h = t.height();
    const std::size_t n = t.grid.size();
    r.report.carve_depth = Grid<double>(w, h, 0.0);
    r.report.pit_count_before = find_pits(input).size();

    auto drained = detail::drained_mask(t);
    using Entry = std::pair<double, int>;
    std::priority_queue<Entry, std::vector<Entry>, std::greater<>> undrained;
    for (std::size_t i = 0; i < n; ++i)
        if (!drained[i]) undrained.push({t.grid.values[i], static_cast<int>(i)});

    std::vector<double> dist(n);
    std::vector<int> prev(n);
    while (!undrained.empty()) {
        const int p = undrained.top().second;
        undrained.pop();
        if (drained[p]) continue;
        const double ep = t.grid.values[p];

        // Dijkstra over carve cost max(0, e - ep), ties broken by index.
        std::fill(dist.begin(), dist.end(), std::numeric_limits<double>::infinity());
        std::fill(prev.begin(), prev.end(), -1);
        using Node = std::tuple<double, int>;
        std::priority_queue<Node, std::vector<Node>, std::greater<>> open;
        dist[p] = 0;
        open.push({0.0, p});
        int target = -1;
        while (!open.empty()) {
            const auto [d, i] = open.top();
            open.pop();
            if (d > dist[i]) continue;
            const int x = i % w, y = i / w;
            if (i != p && drained[i] && (t.grid.values[i] <= ep || detail::on_boundary(x, y, w, h))) {
                target = i;
                break;
            }
            for (int k = 0; k < 8; ++k) {
                const int nx = x + kDx[k], ny = y + kDy[k];
                if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
                const int j = ny * w + nx;
                const double nd = d + std::max(0.0, t.grid.values[j] - ep);
                if (nd < dist[j]) {
                    dist[j] = nd;
                    prev[j] = i;
                    open.push({nd, j});
                }
            }
        }
        // A target always exists: the boundary is drained.
        std::deque<int> fresh;
        for (int i = target; i != -1; i = prev[i]) {
            if (t.grid.values[i] > ep) {
                r.report.carve_depth.values[i] += t.grid.values[i] - ep;
                t.grid.values[i] = ep;
            }
            if (!drained[i]) {
                drained[i] = 1;
                fresh.push_back(i);
            } else if (i == target) {
                fresh.push_back(i);
            }
        }
        detail::grow_drained(t, drained, std::move(fresh));
    }

    double depth = 0;
    for (double d : r.report.carve_depth.values) depth += d;
    r.report.v_T = depth * t.cell_area();
    const double km2 = static_cast<double>(n) * t.cell_area() / 1e6;
    r.report.v_T_per_km2 = r.report.v_T / km2;
    r.report.drains_completely = find_pits(t).empty();
    return r;
}

inline nlohmann::json to_json(const DrainageReport& r, bool include_depths = false) {
    nlohmann::json j = {{"v_T", r.v_T},
                        {"v_T_per_km2", r.v_T_per_km2},
                        {"pit_count_before", r.pit_count_before},
                        {"drains_completely", r.drains_completely}};
    if (include_depths) {
        j["width"] = r.carve_depth.width;
        j["height"] = r.carve_depth.height;
        j["carve_depth"] = r.carve_depth.values;
    }
    return j;
}

}  // namespace styledem::hydrology
