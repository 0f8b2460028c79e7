#pragma once

// Patch-based terrain amplification: decompose into base and half-offset
// overlap patches, amplify each patch through the model, retarget its
// elevations to the source patch and stitch layers with minimum-error cuts.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "styledem/bundle.hpp"
#include "styledem/error.hpp"
#include "styledem/heightfield.hpp"
#include "styledem/heightfield_io.hpp"

namespace styledem::superres {

enum class Layer { base = 0, offset_x = 1, offset_y = 2, offset_xy = 3 };

inline const char* layer_name(Layer l) {
    switch (l) {
        case Layer::base: return "base";
        case Layer::offset_x: return "offset_x";
        case Layer::offset_y: return "offset_y";
        case Layer::offset_xy: return "offset_xy";
    }
    return "?";
}

struct Patch {
    Layer layer = Layer::base;
    int a = 0;  // column index within the layer
    int b = 0;  // row index within the layer
    int x = 0;  // origin in (padded) source cells
    int y = 0;
};

struct PatchGrid {
    int kx = 1;
    int ky = 1;
    int patch_size = 0;   // s, source cells
    int padded_width = 0;
    int padded_height = 0;
    int width = 0;        // unpadded source size
    int height = 0;
    std::vector<Patch> patches;  // base layer first, then x, y, xy offsets

    int k() const { return kx; }
    std::size_t count(Layer l) const {
        return static_cast<std::size_t>(std::count_if(patches.begin(), patches.end(), [l](const Patch& p) { return p.layer == l; }));
    }
};

inline int reflect_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}

inline Heightfield reflect_pad(const Heightfield& t, int width, int height) {
    Heightfield out(width, height, t.cell_size);
    out.origin = t.origin;
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) out.at(x, y) = t.at(reflect_index(x, t.width()), reflect_index(y, t.height()));
    return out;
}

// Base patches at (a*s, b*s) plus three layers offset by (s/2,0), (0,s/2)
// and (s/2,s/2): (2kx-1)(2ky-1) patches in total. A terrain smaller than s
// in either direction becomes a single passthrough patch.
inline PatchGrid decompose(int width, int height, int s) {
    if (width < 1 || height < 1) fail_input("terrain", "terrain must be at least 1x1");
    if (s < 2) fail_input("patch_size", "patch size must be at least 2");
    PatchGrid g;
    g.width = width;
    g.height = height;
    if (s > width || s > height) {
        g.patch_size = std::max(width, height);
        g.padded_width = width;
        g.padded_height = height;
        g.patches.push_back({Layer::base, 0, 0, 0, 0});
        return g;
    }
    g.patch_size = s;
    g.kx = (width + s - 1) / s;
    g.ky = (height + s - 1) / s;
    g.padded_width = g.kx * s;
    g.padded_height = g.ky * s;
    const int h = s / 2;
    for (int b = 0; b < g.ky; ++b)
        for (int a = 0; a < g.kx; ++a) g.patches.push_back({Layer::base, a, b, a * s, b * s});
    for (int b = 0; b < g.ky; ++b)
        for (int a = 0; a + 1 < g.kx; ++a) g.patches.push_back({Layer::offset_x, a, b, a * s + h, b * s});
    for (int b = 0; b + 1 < g.ky; ++b)
        for (int a = 0; a < g.kx; ++a) g.patches.push_back({Layer::offset_y, a, b, a * s, b * s + h});
    for (int b = 0; b + 1 < g.ky; ++b)
        for (int a = 0; a + 1 < g.kx; ++a) g.patches.push_back({Layer::offset_xy, a, b, a * s + h, b * s + h});
    return g;
}

inline PatchGrid decompose(const Heightfield& t, int s) {
    t.validate();
    return decompose(t.width(), t.height(), s);
}

// True when every cell on an interior base-layer seam lies strictly inside
// some overlap patch.
inline bool covers_base_seams(const PatchGrid& g) {
    const int s = g.patch_size;
    auto inside = [&](int x, int y) {
        for (const auto& p : g.patches)
            if (p.layer != Layer::base && x > p.x && x < p.x + s - 1 && y > p.y && y < p.y + s - 1) return true;
        return false;
    };
    for (int a = 1; a < g.kx; ++a)
        for (int y = 1; y + 1 < g.padded_height; ++y)
            for (int x : {a * s - 1, a * s})
                if (!inside(x, y)) return false;
    for (int b = 1; b < g.ky; ++b)
        for (int x = 1; x + 1 < g.padded_width; ++x)
            for (int y : {b * s - 1, b * s})
                if (!inside(x, y)) return false;
    return true;
}

// ------------------------------------------------------------------ retarget

// Monotone quantile mapping: the value of rank r among N amplified cells
// becomes the reference quantile at position r(M-1)/(N-1), interpolated
// between adjacent sorted reference samples. Rank 0 and rank N-1 land on
// the reference min and max exactly.
inline Heightfield histogram_retarget(const NormalizedField& amplified, const Heightfield& reference) {
    if (amplified.grid.size() == 0 || reference.grid.size() == 0) fail_input("patch", "histogram retarget needs non-empty inputs");
    const std::size_t N = amplified.grid.size(), M = reference.grid.size();
    std::vector<double> ref(reference.grid.values);
    std::sort(ref.begin(), ref.end());
    std::vector<std::size_t> order(N);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t i, std::size_t j) { return amplified.grid.values[i] < amplified.grid.values[j]; });
    Heightfield out(amplified.width(), amplified.height(), reference.extent_x() / amplified.width());
    for (std::size_t r = 0; r < N; ++r) {
        double v;
        if (N == 1 || M == 1) {
            v = ref[N == 1 ? 0 : (r * (M - 1)) / (N - 1)];
        } else if ((r * (M - 1)) % (N - 1) == 0) {
            v = ref[r * (M - 1) / (N - 1)];
        } else {
            const std::size_t lo = r * (M - 1) / (N - 1);
            const double t = static_cast<double>(r * (M - 1) - lo * (N - 1)) / static_cast<double>(N - 1);
            v = std::clamp(ref[lo] + t * (ref[lo + 1] - ref[lo]), ref[lo], ref[lo + 1]);
        }
        out.grid.values[order[r]] = v;
    }
    return out;
}

// ------------------------------------------------------------------ seam cut

// Sum of the error surface along a path, accumulated top to bottom.
inline double seam_cost(const Grid<double>& error, const std::vector<int>& path) {
    double c = 0;
    for (int y = 0; y < error.height; ++y) c += error.at(path[y], y);
    return c;
}

inline Grid<double> squared_difference(const Grid<double>& a, const Grid<double>& b) {
    if (!a.same_shape(b)) fail_input("overlap", "overlap strips must have equal shape");
    Grid<double> e(a.width, a.height);
    for (std::size_t i = 0; i < e.size(); ++i) {
        const double d = a.values[i] - b.values[i];
        e.values[i] = d * d;
    }
    return e;
}

// Minimum-cost top-to-bottom path through an error surface, one column per
// row with |step| <= 1. Among optimal paths the lexicographically smallest
// is returned. Surfaces narrower than 3 columns use the midline.
inline std::vector<int> min_error_path(const Grid<double>& e) {
    const int W = e.width, H = e.height;
    if (W < 1 || H < 1) fail_input("overlap", "overlap strip is empty");
    if (W < 3) return std::vector<int>(H, (W - 1) / 2);
    // best(x, y): cheapest cost from (x, y) down to the last row.
    Grid<double> best(W, H);
    for (int x = 0; x < W; ++x) best.at(x, H - 1) = e.at(x, H - 1);
    for (int y = H - 2; y >= 0; --y)
        for (int x = 0; x < W; ++x) {
            double m = best.at(x, y + 1);
            if (x > 0) m = std::min(m, best.at(x - 1, y + 1));
            if (x + 1 < W) m = std::min(m, best.at(x + 1, y + 1));
            best.at(x, y) = e.at(x, y) + m;
        }
    std::vector<int> path(H);
    path[0] = static_cast<int>(std::min_element(best.values.begin(), best.values.begin() + W) - best.values.begin());
    for (int y = 1; y < H; ++y) {
        const int px = path[y - 1];
        double m = std::numeric_limits<double>::infinity();
        for (int x = std::max(0, px - 1); x <= std::min(W - 1, px + 1); ++x) m = std::min(m, best.at(x, y));
        for (int x = std::max(0, px - 1); x <= std::min(W - 1, px + 1); ++x)
            if (best.at(x, y) == m) {
                path[y] = x;
                break;
            }
    }
    return path;
}

// Seam through a vertical overlap: cells left of path[y] come from A, the
// rest from B.
inline std::vector<int> seam_cut(const Grid<double>& overlap_a, const Grid<double>& overlap_b) {
    return min_error_path(squared_difference(overlap_a, overlap_b));
}

// ------------------------------------------------------------------ models

// Amplifies bundle-resolution normalized patches. Counts passes so callers
// can account for model work.
class PatchModel {
public:
    virtual ~PatchModel() = default;
    virtual int resolution() const = 0;
    virtual std::vector<NormalizedField> run(const std::vector<NormalizedField>& patches) = 0;

    std::size_t encoder_passes = 0;
    std::size_t generator_passes = 0;
};

class BundlePatchModel : public PatchModel {
public:
    explicit BundlePatchModel(const ModelBundle& b, std::uint64_t noise_seed = kDefaultNoiseSeed, int batch = 16)
        : bundle_(b), noise_seed_(noise_seed), batch_(batch) {}

    int resolution() const override { return bundle_.resolution(); }

    std::vector<NormalizedField> run(const std::vector<NormalizedField>& patches) override {
        std::vector<NormalizedField> out;
        out.reserve(patches.size());
        for (std::size_t start = 0; start < patches.size(); start += batch_) {
            std::vector<const NormalizedField*> in;
            for (std::size_t i = start; i < std::min(patches.size(), start + batch_); ++i) in.push_back(&patches[i]);
            const auto ws = encode_batch(in, bundle_);
            encoder_passes += ws.size();
            std::vector<const LatentWPlus*> ptrs;
            for (const auto& w : ws) ptrs.push_back(&w);
            for (auto& f : synthesize_batch(ptrs, bundle_, noise_seed_)) out.push_back(std::move(f));
            generator_passes += ptrs.size();
        }
        return out;
    }

private:
    const ModelBundle& bundle_;
    std::uint64_t noise_seed_;
    std::size_t batch_;
};

// ------------------------------------------------------------------ amplify

class PatchError : public std::runtime_error {
public:
    PatchError(const std::string& stage, const Patch& p, const std::string& what)
        : std::runtime_error("amplify failed at stage " + stage + ", " + layer_name(p.layer) + " patch (" +
                             std::to_string(p.a) + "," + std::to_string(p.b) + "): " + what),
          stage_(stage), patch_(p) {}
    const std::string& stage() const noexcept { return stage_; }
    const Patch& patch() const noexcept { return patch_; }

private:
    std::string stage_;
    Patch patch_;
};

struct AmplifyOptions {
    double overlap_fraction = 0.25;  // seam strip width as a fraction of the patch
    int feather = 4;                 // cells blended across each cut
    std::optional<std::filesystem::path> debug_dir;
    std::function<void(double fraction, const std::string& stage)> progress;
    const std::atomic<bool>* cancel = nullptr;
};

struct AmplifyResult {
    Heightfield terrain;
    PatchGrid grid;
    std::size_t encoder_passes = 0;
    std::size_t generator_passes = 0;
    std::vector<std::pair<double, double>> patch_ranges;  // retargeted (min, max) per patch
};

namespace detail {

inline Heightfield crop(const Heightfield& t, int x0, int y0, int w, int h) {
    Heightfield out(w, h, t.cell_size);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out.at(x, y) = t.at(x0 + x, y0 + y);
    return out;
}

// Blend weight for the new patch across a cut at column c (patch on the
// side given by `patch_right`).
inline double side_alpha(int x, int c, int feather, bool patch_right) {
    const double d = patch_right ? x - c : c - x;
    if (feather <= 0) return d >= 0 ? 1.0 : 0.0;
    return std::clamp((d + 0.5) / feather + 0.5, 0.0, 1.0);
}

// Cut columns for one side of an overlap patch. `a` is the assembly and `b`
// the patch, both as strips whose columns run across the cut.
inline std::vector<int> strip_cut(const Grid<double>& a, const Grid<double>& b, int margin) {
    const int W = a.width, H = a.height;
    if (W - 2 * margin < 1) return std::vector<int>(H, W / 2);
    Grid<double> ia(W - 2 * margin, H), ib(W - 2 * margin, H);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < ia.width; ++x) {
            ia.at(x, y) = a.at(x + margin, y);
            ib.at(x, y) = b.at(x + margin, y);
        }
    auto path = seam_cut(ia, ib);
    for (int& c : path) c += margin;
    return path;
}

// Stitches patch P (S x S at ox, oy) into the canvas with cuts on every side
// that is not on the canvas border.
inline void integrate(Heightfield& canvas, const Heightfield& p, int ox, int oy, const AmplifyOptions& opt) {
    const int S = p.width();
    const int w = std::clamp(static_cast<int>(std::lround(S * opt.overlap_fraction)), 1, S / 2);
    const int margin = opt.feather / 2 + 1;
    Grid<double> alpha(S, S, 1.0);

    auto strip = [&](bool vertical, int offset) {
        // Strip of width w: columns across the cut, rows along it.
        Grid<double> a(w, S), b(w, S);
        for (int r = 0; r < S; ++r)
            for (int c = 0; c < w; ++c) {
                const int px = vertical ? offset + c : r, py = vertical ? r : offset + c;
                a.at(c, r) = canvas.at(ox + px, oy + py);
                b.at(c, r) = p.at(px, py);
            }
        return std::pair{a, b};
    };
    auto apply = [&](bool vertical, int offset, bool patch_far_side) {
        auto [a, b] = strip(vertical, offset);
        // Normalize so the patch is always the "B" side of the cut.
        const auto path = patch_far_side ? strip_cut(a, b, margin) : strip_cut(b, a, margin);
        for (int r = 0; r < S; ++r)
            for (int c = 0; c < w; ++c) {
                const double s = side_alpha(c, path[r], opt.feather, patch_far_side);
                double& cell = vertical ? alpha.at(offset + c, r) : alpha.at(r, offset + c);
                cell *= s;
            }
    };
    if (ox > 0) apply(true, 0, true);
    if (ox + S < canvas.width()) apply(true, S - w, false);
    if (oy > 0) apply(false, 0, true);
    if (oy + S < canvas.height()) apply(false, S - w, false);
    for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
            const double t = alpha.at(x, y);
            double& cell = canvas.at(ox + x, oy + y);
            cell = (1.0 - t) * cell + t * p.at(x, y);
        }
}

}  // namespace detail

inline AmplifyResult amplify(const Heightfield& t, PatchModel& model, int upscale, const AmplifyOptions& opt = {}) {
    t.validate();
    const int R = model.resolution();
    if (upscale < 1 || R % upscale != 0) fail_input("upscale", "upscale must divide the model resolution ", std::to_string(R));
    const int s = R / upscale;
    if (s < 2) fail_input("upscale", "upscale leaves patches smaller than 2 cells");
    AmplifyResult result;
    result.grid = decompose(t, s);
    const PatchGrid& g = result.grid;
    const bool single = g.patches.size() == 1 && (g.patch_size != s);
    const Heightfield padded = single ? t : reflect_pad(t, g.padded_width, g.padded_height);
    auto report = [&](double f, const std::string& stage) {
        if (opt.progress) opt.progress(f, stage);
    };
    if (opt.debug_dir) std::filesystem::create_directories(*opt.debug_dir);

    // Model inputs.
    std::vector<Heightfield> sources;
    std::vector<NormalizedField> inputs;
    for (const auto& p : g.patches) {
        try {
            Heightfield src = single ? padded : detail::crop(padded, p.x, p.y, s, s);
            inputs.push_back(normalize(resample(src, R, R)));
            sources.push_back(std::move(src));
        } catch (const std::exception& e) {
            throw PatchError("prepare", p, e.what());
        }
    }
    report(0.05, "prepare");

    std::vector<NormalizedField> outputs;
    outputs.reserve(inputs.size());
    const std::size_t enc0 = model.encoder_passes, gen0 = model.generator_passes;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (opt.cancel && opt.cancel->load()) throw IoError("amplify cancelled");
        try {
            auto out = model.run({inputs[i]});
            if (out.size() != 1 || out[0].width() != R || out[0].height() != R) throw IoError("model returned a malformed patch");
            outputs.push_back(std::move(out[0]));
        } catch (const std::exception& e) {
            throw PatchError("model", g.patches[i], e.what());
        }
        report(0.05 + 0.8 * static_cast<double>(i + 1) / inputs.size(), "model");
    }
    result.encoder_passes = model.encoder_passes - enc0;
    result.generator_passes = model.generator_passes - gen0;

    std::vector<Heightfield> detailed;
    for (std::size_t i = 0; i < outputs.size(); ++i) {
        try {
            detailed.push_back(histogram_retarget(outputs[i], sources[i]));
        } catch (const std::exception& e) {
            throw PatchError("retarget", g.patches[i], e.what());
        }
        result.patch_ranges.emplace_back(detailed.back().min_elevation(), detailed.back().max_elevation());
        if (opt.debug_dir) {
            const auto& p = g.patches[i];
            save_heightfield(detailed.back(), *opt.debug_dir / (std::string(layer_name(p.layer)) + "_" + std::to_string(p.a) + "_" +
                                                                std::to_string(p.b) + ".png"));
        }
    }

    const double cell = t.cell_size / upscale;
    if (single) {
        Heightfield out = resample(detailed[0], t.width() * upscale, t.height() * upscale);
        out.cell_size = cell;
        out.origin = t.origin;
        result.terrain = std::move(out);
        report(1.0, "done");
        return result;
    }

    Heightfield canvas(g.padded_width * upscale, g.padded_height * upscale, cell);
    for (std::size_t i = 0; i < g.patches.size(); ++i) {
        const auto& p = g.patches[i];
        if (p.layer != Layer::base) continue;
        for (int y = 0; y < R; ++y)
            for (int x = 0; x < R; ++x) canvas.at(p.x * upscale + x, p.y * upscale + y) = detailed[i].at(x, y);
    }
    for (Layer layer : {Layer::offset_x, Layer::offset_y, Layer::offset_xy})
        for (std::size_t i = 0; i < g.patches.size(); ++i) {
            const auto& p = g.patches[i];
            if (p.layer != layer) continue;
            try {
                detail::integrate(canvas, detailed[i], p.x * upscale, p.y * upscale, opt);
            } catch (const std::exception& e) {
                throw PatchError("stitch", p, e.what());
            }
        }
    Heightfield out = detail::crop(canvas, 0, 0, t.width() * upscale, t.height() * upscale);
    out.cell_size = cell;
    out.origin = t.origin;
    result.terrain = std::move(out);
    report(1.0, "done");
    return result;
}

inline AmplifyResult amplify(const Heightfield& t, const ModelBundle& b, int upscale, const AmplifyOptions& opt = {},
                             std::uint64_t noise_seed = kDefaultNoiseSeed) {
    if (!b.encoder_trained || !b.generator_trained) fail_input("bundle", "amplify needs a trained bundle");
    BundlePatchModel model(b, noise_seed);
    return amplify(t, model, upscale, opt);
}

// Coarse scale tags have larger cells; a cascade must go coarse to fine.
inline void check_cascade_order(const std::string& coarse_tag, const std::string& fine_tag) {
    const auto& reg = scale_registry();
    if (!reg.count(coarse_tag)) fail_input("coarse_bundle", "unknown scale tag ", coarse_tag);
    if (!reg.count(fine_tag)) fail_input("fine_bundle", "unknown scale tag ", fine_tag);
    if (!(reg.at(coarse_tag) > reg.at(fine_tag)))
        fail_input("fine_bundle", "cascade must run coarse to fine, got ", coarse_tag, " then ", fine_tag);
}

inline Heightfield cascade(const Heightfield& t, PatchModel& coarse, const std::string& coarse_tag, int coarse_upscale,
                           PatchModel& fine, const std::string& fine_tag, int fine_upscale, const AmplifyOptions& opt = {}) {
    check_cascade_order(coarse_tag, fine_tag);
    return amplify(amplify(t, coarse, coarse_upscale, opt).terrain, fine, fine_upscale, opt).terrain;
}

inline Heightfield cascade(const Heightfield& t, const ModelBundle& coarse, int coarse_upscale, const ModelBundle& fine,
                           int fine_upscale, const AmplifyOptions& opt = {}) {
    check_cascade_order(coarse.config.scale_tag, fine.config.scale_tag);
    return amplify(amplify(t, coarse, coarse_upscale, opt).terrain, fine, fine_upscale, opt).terrain;
}

}  // namespace styledem::superres
