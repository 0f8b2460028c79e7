#pragma once

// Latent-space authoring: style mixing, interpolation, elevation-domain
// region blending, brush masks, optimizer inversion and sketch refinement.

#include <atomic>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

#include "styledem/bundle.hpp"
#include "styledem/error.hpp"
#include "styledem/heightfield.hpp"
#include "styledem/latent.hpp"
#include "styledem/training.hpp"

namespace styledem::toolbox {

struct StyleMixSpec {
    int crossover_index = 0;
    const LatentWPlus* structure = nullptr;  // u, rows [0, i)
    const LatentWPlus* detail = nullptr;     // v, rows [i, L)
};

inline LatentWPlus style_mix(const LatentWPlus& u, const LatentWPlus& v, int i) {
    if (!u.same_shape(v)) fail_input("detail_source", "style sources must share L x D");
    if (i < 0 || i > u.layers())
        fail_input("crossover_index", "crossover index ", std::to_string(i), " outside [0, ", std::to_string(u.layers()), "]");
    LatentWPlus out = v;
    std::copy(u.values().begin(), u.values().begin() + static_cast<std::ptrdiff_t>(i) * u.dim(), out.values().begin());
    return out;
}

inline LatentWPlus style_mix(const StyleMixSpec& spec) {
    if (!spec.structure || !spec.detail) fail_input("spec", "style mix needs both sources");
    return style_mix(*spec.structure, *spec.detail, spec.crossover_index);
}

// Mixes several sources coarse to fine: sources[k] owns rows
// [crossovers[k-1], crossovers[k]). Built from two-source mixes.
inline LatentWPlus style_mix_chain(const std::vector<LatentWPlus>& sources, const std::vector<int>& crossovers) {
    if (sources.empty() || crossovers.size() + 1 != sources.size())
        fail_input("crossovers", "need one crossover index between each pair of sources");
    LatentWPlus out = sources.back();
    for (std::size_t k = sources.size() - 1; k-- > 0;) out = style_mix(sources[k], out, crossovers[k]);
    return out;
}

// w = (1 - alpha) u + alpha v, evaluated so that swapping the endpoints and
// alpha -> 1 - alpha gives bit-identical results.
inline LatentWPlus interpolate(const LatentWPlus& u, const LatentWPlus& v, double alpha, bool allow_extrapolation = false) {
    if (!u.same_shape(v)) fail_input("v", "interpolation endpoints must share L x D");
    if (!std::isfinite(alpha) || (!allow_extrapolation && (alpha < 0.0 || alpha > 1.0)))
        fail_input("alpha", "alpha must lie in [0,1]");
    if (alpha == 0.0) return u;
    if (alpha == 1.0) return v;
    // Weights are derived from the smaller of alpha and 1 - alpha, snapped to
    // a 2^-40 grid, so both argument orders see the same pair of weights.
    const bool swap = alpha > 0.5;
    const double raw = swap ? 1.0 - alpha : alpha;
    const double small = std::ldexp(std::round(std::ldexp(raw, 40)), -40);
    const double large = 1.0 - small;
    const LatentWPlus& heavy = swap ? v : u;
    const LatentWPlus& light = swap ? u : v;
    LatentWPlus out(u.layers(), u.dim());
    for (std::size_t k = 0; k < out.values().size(); ++k)
        out.values()[k] = static_cast<float>(large * heavy.values()[k] + small * light.values()[k]);
    return out;
}

// Per-cell (1 - alpha) tA + alpha tB in meters.
inline Heightfield region_blend(const Heightfield& a, const Heightfield& b, const RegionMask& mask) {
    a.validate();
    b.validate();
    mask.validate();
    if (!a.grid.same_shape(b.grid)) fail_input("other_terrain", "blended terrains must share dimensions");
    if (!a.grid.same_shape(mask.alpha)) fail_input("mask", "mask dimensions must match the terrains");
    Heightfield out = a;
    for (std::size_t i = 0; i < out.grid.size(); ++i) {
        const double t = mask.alpha.values[i];
        if (t == 0.0) continue;
        out.grid.values[i] = t == 1.0 ? b.grid.values[i] : (1.0 - t) * a.grid.values[i] + t * b.grid.values[i];
    }
    return out;
}

struct BrushDab {
    double x = 0;
    double y = 0;
};

// Soft mask painted by dabs: full strength within radius*(1-feather), then a
// Gaussian falloff over the feather band.
inline RegionMask brush_mask(int width, int height, const std::vector<BrushDab>& dabs, double radius, double feather = 0.5) {
    if (width < 1 || height < 1) fail_input("dimensions", "mask must be at least 1x1");
    if (!(radius > 0)) fail_input("radius", "brush radius must be positive");
    feather = std::clamp(feather, 0.0, 1.0);
    const double core = radius * (1.0 - feather);
    const double sigma = std::max(radius * feather / 2.0, 1e-9);
    RegionMask m{Grid<double>(width, height, 0.0)};
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            double a = 0;
            for (const auto& d : dabs) {
                const double r = std::hypot(x - d.x, y - d.y);
                const double v = r <= core ? 1.0 : (feather > 0 ? std::exp(-0.5 * std::pow((r - core) / sigma, 2)) : 0.0);
                a = std::max(a, v);
            }
            m.alpha.at(x, y) = std::clamp(a, 0.0, 1.0);
        }
    return m;
}

// ------------------------------------------------------------------ inversion

struct InvertConfig {
    int steps = 200;
    double lr = 0.01;
    bool use_l2 = true;
    bool use_perceptual = false;
    double lambda_perceptual = 0.8;
    std::optional<LatentWPlus> init;  // default: encode(target) if trained, else mean w
    const std::atomic<bool>* cancel = nullptr;
    std::function<void(int step, double loss)> progress;
};

struct InvertResult {
    LatentWPlus latent;
    std::vector<double> loss_trace;  // loss of the iterate before each update
    double best_loss = std::numeric_limits<double>::infinity();
    int best_step = 0;
    bool cancelled = false;
};

// Adam over W+ minimizing the configured image losses. Returns the iterate
// with the lowest loss seen, which is never worse than the initialization.
inline InvertResult optimize_invert(const NormalizedField& target, const ModelBundle& b, const InvertConfig& cfg) {
    if (!cfg.use_l2 && !cfg.use_perceptual) fail_input("config", "at least one of use_l2 / use_perceptual is required");
    if (cfg.steps < 0) fail_input("steps", "steps must be non-negative");
    LatentWPlus start = cfg.init ? *cfg.init : (b.encoder_trained ? encode(target, b) : mean_latent(b));
    check_latent_shape(start, b);

    Generator<float>& g = *b.generator;
    Discriminator<float>& d = *b.discriminator;
    g.params().set_requires_grad(false);
    d.params().set_requires_grad(false);
    struct Restore {
        Generator<float>& g;
        Discriminator<float>& d;
        ~Restore() {
            g.params().set_requires_grad(true);
            d.params().set_requires_grad(true);
        }
    } restore{g, d};

    const nn::Var<float> x(to_image_tensor({&target}, b.resolution()));
    const auto noise = g.frozen_noise(kDefaultNoiseSeed);
    nn::Var<float> w(to_latent_tensor({&start}), true);
    nn::Adam<float> opt({w}, cfg.lr, 0.9, 0.999);

    InvertResult r{start, {}, std::numeric_limits<double>::infinity(), 0, false};
    for (int step = 0; step <= cfg.steps; ++step) {
        if (cfg.cancel && cfg.cancel->load()) {
            r.cancelled = true;
            break;
        }
        w.zero_grad();
        auto img = g.synthesize(w, noise);
        std::vector<nn::Var<float>> terms;
        std::vector<float> weights;
        if (cfg.use_l2) {
            terms.push_back(nn::mse(img, x));
            weights.push_back(1.0f);
        }
        if (cfg.use_perceptual) {
            terms.push_back(training::feature_distance(d, img, x));
            weights.push_back(static_cast<float>(cfg.lambda_perceptual));
        }
        auto loss = nn::weighted_sum(terms, weights);
        const double value = loss.value()[0];
        r.loss_trace.push_back(value);
        if (cfg.progress) cfg.progress(step, value);
        if (std::isfinite(value) && value < r.best_loss) {
            r.best_loss = value;
            r.best_step = step;
            r.latent = latent_from_tensor(w.value(), 0);
        }
        if (step == cfg.steps) break;
        nn::backward(loss);
        opt.step();
    }
    return r;
}

// ------------------------------------------------------------------ refine

// Projects a terrain through the model: resample to the bundle resolution,
// encode, synthesize and map back onto the input elevation range. The
// physical extent is preserved.
inline Heightfield refine(const Heightfield& t, const ModelBundle& b, std::uint64_t noise_seed = kDefaultNoiseSeed) {
    t.validate();
    const int R = b.resolution();
    const Heightfield sized = (t.width() == R && t.height() == R) ? t : resample(t, R, R);
    const NormalizedField n = normalize(sized);
    NormalizedField out = synthesize(encode(n, b), b, noise_seed);
    out.min_m = n.min_m;
    out.max_m = n.max_m;
    Heightfield h = denormalize(out, t.extent_x() / R);
    h.origin = t.origin;
    return h;
}

}  // namespace styledem::toolbox
