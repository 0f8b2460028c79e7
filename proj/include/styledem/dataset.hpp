#pragma once

// Training corpus construction: dynamics classification, per-class balanced
// selection, and synthetic fractional Brownian motion tiles.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "styledem/error.hpp"
#include "styledem/heightfield.hpp"
#include "styledem/heightfield_io.hpp"

namespace styledem::dataset {

// Elevation range rounded half-up to the nearest ten meters.
inline int classify_dynamics(const Heightfield& h) {
    h.validate();
    const double range = h.max_elevation() - h.min_elevation();
    return static_cast<int>(std::floor(range / 10.0 + 0.5)) * 10;
}

struct TileInfo {
    std::string path;
    int class_id = 0;
    double min_m = 0;
    double max_m = 0;
};

struct DatasetManifest {
    std::vector<TileInfo> tiles;
    int target_per_class = 20;
    std::uint64_t seed = 0;
    int resolution = 64;

    std::map<int, int> class_counts() const {
        std::map<int, int> counts;
        for (const auto& t : tiles) ++counts[t.class_id];
        return counts;
    }
};

inline nlohmann::json to_json(const DatasetManifest& m) {
    nlohmann::json tiles = nlohmann::json::array();
    for (const auto& t : m.tiles)
        tiles.push_back({{"path", t.path}, {"class_id", t.class_id}, {"min_m", t.min_m}, {"max_m", t.max_m}});
    return {{"tiles", tiles}, {"target_per_class", m.target_per_class}, {"seed", m.seed}, {"resolution", m.resolution}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
    DatasetManifest m;
    m.target_per_class = j.at("target_per_class").get<int>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.resolution = j.at("resolution").get<int>();
    for (const auto& t : j.at("tiles"))
        m.tiles.push_back({t.at("path").get<std::string>(), t.at("class_id").get<int>(), t.at("min_m").get<double>(),
                           t.at("max_m").get<double>()});
    return m;
}

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << to_json(m).dump(2) << "\n";
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    try {
        return manifest_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad manifest " + path.string() + ": " + e.what());
    }
}

// Per class, keeps min(target, available) tiles drawn uniformly without
// replacement. Output order is by class, then by original position, so the
// result depends only on the inputs and the seed.
inline DatasetManifest balance_select(const std::vector<TileInfo>& tiles, int target_per_class, std::uint64_t seed,
                                      int resolution = 64) {
    if (tiles.empty()) fail_input("tiles", "balance_select needs at least one tile");
    if (target_per_class < 1) fail_input("target_per_class", "target must be positive");
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < tiles.size(); ++i) by_class[tiles[i].class_id].push_back(i);
    DatasetManifest m;
    m.target_per_class = target_per_class;
    m.seed = seed;
    m.resolution = resolution;
    for (auto& [cls, members] : by_class) {
        std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(cls + 1)));
        // Partial Fisher-Yates: the first k slots become the sample.
        const std::size_t k = std::min<std::size_t>(members.size(), static_cast<std::size_t>(target_per_class));
        for (std::size_t i = 0; i < k; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, members.size() - 1);
            std::swap(members[i], members[pick(rng)]);
        }
        std::vector<std::size_t> chosen(members.begin(), members.begin() + static_cast<std::ptrdiff_t>(k));
        std::sort(chosen.begin(), chosen.end());
        for (std::size_t idx : chosen) m.tiles.push_back(tiles[idx]);
    }
    return m;
}

// ------------------------------------------------------------------ fBm tiles

namespace detail {

inline std::uint64_t mix64(std::uint64_t x) {
    x ^= x >> 30;
    x *= 0xBF58476D1CE4E5B9ULL;
    x ^= x >> 27;
    x *= 0x94D049BB133111EBULL;
    x ^= x >> 31;
    return x;
}

// Unit gradient at an integer lattice point.
inline std::pair<double, double> lattice_gradient(std::uint64_t seed, int octave, std::int64_t ix, std::int64_t iy) {
    const std::uint64_t h = mix64(seed ^ mix64(static_cast<std::uint64_t>(octave) * 0x632BE59BD9B4E019ULL ^
                                               mix64(static_cast<std::uint64_t>(ix) * 0x8CB92BA72F3D8DD7ULL ^
                                                     static_cast<std::uint64_t>(iy))));
    const double angle = (h >> 11) * (1.0 / 9007199254740992.0) * 2.0 * 3.14159265358979323846;
    return {std::cos(angle), std::sin(angle)};
}

inline double fade(double t) { return t * t * t * (t * (t * 6 - 15) + 10); }

// Perlin gradient noise, roughly in [-0.7, 0.7].
inline double gradient_noise(std::uint64_t seed, int octave, double x, double y) {
    const double fx = std::floor(x), fy = std::floor(y);
    const auto ix = static_cast<std::int64_t>(fx), iy = static_cast<std::int64_t>(fy);
    const double tx = x - fx, ty = y - fy;
    auto corner = [&](std::int64_t cx, std::int64_t cy) {
        auto [gx, gy] = lattice_gradient(seed, octave, cx, cy);
        return gx * (x - static_cast<double>(cx)) + gy * (y - static_cast<double>(cy));
    };
    const double n00 = corner(ix, iy), n10 = corner(ix + 1, iy);
    const double n01 = corner(ix, iy + 1), n11 = corner(ix + 1, iy + 1);
    const double u = fade(tx), v = fade(ty);
    return (n00 * (1 - u) + n10 * u) * (1 - v) + (n01 * (1 - u) + n11 * u) * v;
}

}  // namespace detail

struct FbmOptions {
    double base_frequency = 2.0;  // lattice cells across the tile for octave 0
    double lacunarity = 2.0;
    double relief_m = 500.0;      // amplitude of octave 0 in meters
    double base_elevation_m = 0.0;
    double cell_size_m = 30.0;
};

// Sum of gradient-noise octaves with amplitude lacunarity^(-hurst * i).
inline Heightfield synthesize_fbm_tile(std::uint64_t seed, int resolution, int octaves, double hurst,
                                       const FbmOptions& opt = {}) {
    if (resolution < 16 || (resolution & (resolution - 1)) != 0)
        fail_input("resolution", "fBm tiles need a power-of-two resolution >= 16");
    if (octaves < 1) fail_input("octaves", "need at least one octave");
    Heightfield h(resolution, resolution, opt.cell_size_m);
    // Offset so each seed samples a different region of the lattice as well.
    const double ox = (detail::mix64(seed) % 4096) + 0.37, oy = (detail::mix64(seed + 1) % 4096) + 0.71;
    for (int y = 0; y < resolution; ++y)
        for (int x = 0; x < resolution; ++x) {
            double freq = opt.base_frequency / resolution;
            double amp = 1.0, sum = 0.0;
            for (int o = 0; o < octaves; ++o) {
                sum += amp * detail::gradient_noise(seed, o, x * freq + ox, y * freq + oy);
                freq *= opt.lacunarity;
                amp *= std::pow(opt.lacunarity, -hurst);
            }
            h.at(x, y) = opt.base_elevation_m + opt.relief_m * sum;
        }
    return h;
}

// Mean absolute central-difference slope magnitude (m/m).
inline double mean_abs_gradient(const Heightfield& h) {
    double acc = 0;
    std::size_t n = 0;
    for (int y = 1; y + 1 < h.height(); ++y)
        for (int x = 1; x + 1 < h.width(); ++x) {
            const double gx = (h.at(x + 1, y) - h.at(x - 1, y)) / (2 * h.cell_size);
            const double gy = (h.at(x, y + 1) - h.at(x, y - 1)) / (2 * h.cell_size);
            acc += std::hypot(gx, gy);
            ++n;
        }
    return n ? acc / n : 0.0;
}

// Synthetic desk-scale corpus: tiles with varied relief and roughness so the
// dynamics classes are populated.
inline std::vector<Heightfield> synthetic_corpus(std::size_t count, std::uint64_t seed, int resolution) {
    std::vector<Heightfield> out;
    out.reserve(count);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> relief(40.0, 600.0), hurst(0.6, 0.95), base(0.0, 1500.0);
    for (std::size_t i = 0; i < count; ++i) {
        FbmOptions opt;
        opt.relief_m = relief(rng);
        opt.base_elevation_m = base(rng);
        const double h = hurst(rng);
        const std::uint64_t tile_seed = rng();
        out.push_back(synthesize_fbm_tile(tile_seed, resolution, 6, h, opt));
    }
    return out;
}

// Classifies, balances and writes tiles (PNG + sidecar) into out_dir, plus
// manifest.json. Input tiles are resampled to the target resolution.
inline DatasetManifest build_dataset(const std::vector<std::pair<std::string, Heightfield>>& named_tiles,
                                     const std::filesystem::path& out_dir, int target_per_class, std::uint64_t seed,
                                     int resolution) {
    std::filesystem::create_directories(out_dir);
    std::vector<TileInfo> infos;
    infos.reserve(named_tiles.size());
    for (std::size_t i = 0; i < named_tiles.size(); ++i) {
        const auto& h = named_tiles[i].second;
        infos.push_back({std::to_string(i), classify_dynamics(h), h.min_elevation(), h.max_elevation()});
    }
    DatasetManifest m = balance_select(infos, target_per_class, seed, resolution);
    for (auto& t : m.tiles) {
        const auto& [name, h] = named_tiles[std::stoul(t.path)];
        Heightfield tile = (h.width() == resolution && h.height() == resolution) ? h : resample(h, resolution, resolution);
        const auto file = out_dir / (name + ".png");
        save_heightfield(tile, file);
        t.path = file.filename().string();
        t.min_m = tile.min_elevation();
        t.max_m = tile.max_elevation();
    }
    save_manifest(m, out_dir / "manifest.json");
    return m;
}

// Loads every tile of a manifest as a normalized training image.
inline std::vector<NormalizedField> load_training_images(const DatasetManifest& m, const std::filesystem::path& root) {
    std::vector<NormalizedField> out;
    out.reserve(m.tiles.size());
    for (const auto& t : m.tiles) {
        Heightfield h = load_heightfield(root / t.path);
        if (h.width() != m.resolution || h.height() != m.resolution) h = resample(h, m.resolution, m.resolution);
        out.push_back(normalize(h));
    }
    return out;
}

}  // namespace styledem::dataset
