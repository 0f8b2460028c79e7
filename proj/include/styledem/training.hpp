#pragma once

// Adversarial training of the generator/discriminator pair and supervised
// training of the encoder on generator-sampled pairs.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "styledem/bundle.hpp"
#include "styledem/error.hpp"
#include "styledem/heightfield.hpp"

namespace styledem::training {

// ------------------------------------------------------------------ metrics

// Normalized value histogram over all cells of the given fields.
inline std::vector<double> value_histogram(const std::vector<NormalizedField>& fields, int bins = 64) {
    std::vector<double> h(bins, 0.0);
    double total = 0;
    for (const auto& f : fields)
        for (double v : f.grid.values) {
            const int b = std::clamp(static_cast<int>(v * bins), 0, bins - 1);
            h[b] += 1.0;
            total += 1.0;
        }
    if (total > 0)
        for (double& v : h) v /= total;
    return h;
}

inline double histogram_l1(const std::vector<double>& a, const std::vector<double>& b) {
    double d = 0;
    for (std::size_t i = 0; i < a.size(); ++i) d += std::abs(a[i] - b[i]);
    return d;
}

inline double rmse(const NormalizedField& a, const NormalizedField& b) {
    double acc = 0;
    for (std::size_t i = 0; i < a.grid.size(); ++i) {
        const double d = a.grid.values[i] - b.grid.values[i];
        acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(a.grid.size()));
}

// Mean L1 distance between the value histogram of sample batches and the
// dataset histogram (64 bins). Samples use fresh z and the frozen noise.
inline double sample_histogram_distance(const ModelBundle& b, const std::vector<NormalizedField>& dataset,
                                        int batches, int batch_size, std::uint64_t seed) {
    const auto ref = value_histogram(dataset);
    double acc = 0;
    for (int k = 0; k < batches; ++k) {
        std::vector<LatentWPlus> ws;
        for (int i = 0; i < batch_size; ++i)
            ws.push_back(broadcast(map_latent(sample_z(seed + static_cast<std::uint64_t>(k * batch_size + i), b.dim()), b), b));
        std::vector<const LatentWPlus*> ptrs;
        for (const auto& w : ws) ptrs.push_back(&w);
        acc += histogram_l1(value_histogram(synthesize_batch(ptrs, b)), ref);
    }
    return acc / batches;
}

// ------------------------------------------------------------------ GAN

struct GanConfig {
    int steps = 2000;
    int batch = 8;
    double lr = 0.0025;
    double r1_gamma = 0.1;
    int r1_interval = 16;
    double mixing_prob = 0.9;
    double ema_half_life_images = 4000;  // generator EMA half-life
    double ema_rampup = 0.05;            // half-life capped at this fraction of images seen
    std::uint64_t seed = 1;
    int checkpoint_interval = 500;
    std::optional<std::filesystem::path> checkpoint_dir;
    std::function<void(int step, double g_loss, double d_loss)> on_step;
};

struct GanStepLog {
    int step;
    double g_loss;
    double d_loss;
    double r1_penalty;  // NaN on steps without the lazy penalty
};

struct GanResult {
    ModelBundle bundle;
    std::vector<GanStepLog> log;
    bool diverged = false;
    int last_good_step = 0;
};

inline std::shared_ptr<Generator<float>> clone_generator(const Generator<float>& g) {
    auto out = std::make_shared<Generator<float>>(g.config(), 0);
    out->params().copy_from(g.params());
    out->w_avg() = g.w_avg();
    return out;
}

namespace detail {

inline bool all_finite(const nn::ParamStore<float>& p) {
    for (const auto& [_, v] : p.items())
        for (float x : v.value().data)
            if (!std::isfinite(x)) return false;
    return true;
}

// W+ codes for a batch: the same w on every row, or with probability
// mixing_prob two codes split at a random crossover row.
inline nn::Var<float> sample_ws(const Generator<float>& g, int batch, double mixing_prob, std::mt19937_64& rng,
                                nn::Var<float>* first_w = nullptr) {
    const int D = g.config().latent_dim, L = g.config().style_layers();
    nn::Var<float> w1 = g.map(nn::Var<float>(nn::randn<float>({batch, D}, rng)));
    if (first_w) *first_w = w1;
    std::vector<nn::Var<float>> rows(L, w1);
    if (std::uniform_real_distribution<double>(0, 1)(rng) < mixing_prob) {
        nn::Var<float> w2 = g.map(nn::Var<float>(nn::randn<float>({batch, D}, rng)));
        const int cut = std::uniform_int_distribution<int>(1, L - 1)(rng);
        for (int l = cut; l < L; ++l) rows[l] = w2;
    }
    return nn::stack_rows(rows);
}

inline nn::Tensor<float> real_batch(const std::vector<NormalizedField>& images, int batch, int resolution,
                                    std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> pick(0, images.size() - 1);
    std::uniform_int_distribution<int> flip(0, 7);
    nn::Tensor<float> t({batch, 1, resolution, resolution});
    const std::size_t per = static_cast<std::size_t>(resolution) * resolution;
    for (int n = 0; n < batch; ++n) {
        const auto& f = images[pick(rng)];
        // Dihedral augmentation: terrains have no preferred orientation.
        const int op = flip(rng);
        for (int y = 0; y < resolution; ++y)
            for (int x = 0; x < resolution; ++x) {
                int sx = (op & 1) ? resolution - 1 - x : x;
                int sy = (op & 2) ? resolution - 1 - y : y;
                if (op & 4) std::swap(sx, sy);
                t[n * per + static_cast<std::size_t>(y) * resolution + x] = static_cast<float>(2.0 * f.at(sx, sy) - 1.0);
            }
    }
    return t;
}

}  // namespace detail

// Non-saturating logistic GAN loss with a lazy R1 penalty on reals. The R1
// parameter gradient is the mixed Hessian-vector product H_{theta,x} g with
// g = dD/dx, taken as a central difference of dD/dtheta along g.
inline GanResult train_generator(const std::vector<NormalizedField>& images, const NetworkConfig& net,
                                 const GanConfig& cfg) {
    if (images.empty()) fail_input("manifest", "training set is empty");
    net.validate();
    for (const auto& f : images)
        if (f.width() != net.resolution || f.height() != net.resolution)
            fail_input("manifest", "training tiles must match the configured resolution");
    if (cfg.steps < 1 || cfg.batch < 1) fail_input("config", "steps and batch must be positive");

    GanResult result{ModelBundle::create(net, cfg.seed), {}, false, 0};
    ModelBundle& bundle = result.bundle;
    Generator<float> g(net, cfg.seed);  // trained weights; bundle.generator holds the EMA copy
    g.params().copy_from(bundle.generator->params());
    g.w_avg() = bundle.generator->w_avg();
    Discriminator<float>& d = *bundle.discriminator;
    Generator<float>& ema = *bundle.generator;

    nn::Adam<float> opt_g(g.params().vars(), cfg.lr, 0.0, 0.99);
    nn::Adam<float> opt_d(d.params().vars(), cfg.lr, 0.0, 0.99);
    std::mt19937_64 rng(cfg.seed * 7919 + 17);
    const int N = cfg.batch, R = net.resolution;

    // Last finite snapshot for divergence recovery.
    auto good_g = clone_generator(ema);
    auto good_d = std::make_shared<Discriminator<float>>(net, 0);
    good_d->params().copy_from(d.params());

    for (int step = 0; step < cfg.steps; ++step) {
        GanStepLog entry{step, 0, 0, std::numeric_limits<double>::quiet_NaN()};

        // Discriminator update.
        {
            nn::Var<float> fakes;
            {
                nn::NoGradGuard ng;
                fakes = g.synthesize(detail::sample_ws(g, N, cfg.mixing_prob, rng), g.random_noise(N, rng));
            }
            nn::Var<float> reals(detail::real_batch(images, N, R, rng));
            d.params().zero_grad();
            auto loss = nn::add(nn::softplus_mean(d.forward(fakes), 1.0f), nn::softplus_mean(d.forward(reals), -1.0f));
            nn::backward(loss);
            entry.d_loss = loss.value()[0];

            if (cfg.r1_gamma > 0 && cfg.r1_interval > 0 && step % cfg.r1_interval == 0) {
                nn::Var<float> x(reals.value(), true);
                d.params().set_requires_grad(false);
                auto logits = d.forward(x);
                nn::Tensor<float> ones(logits.shape(), 1.0f);
                nn::backward(logits, &ones);
                d.params().set_requires_grad(true);
                const nn::Tensor<float> grad_x = x.grad();
                double sq = 0;
                for (float v : grad_x.data) sq += static_cast<double>(v) * v;
                entry.r1_penalty = 0.5 * cfg.r1_gamma * sq / N;
                const double rms = std::sqrt(sq / static_cast<double>(grad_x.size()));
                if (rms > 0) {
                    const double eps = 1e-2 / rms;
                    const double coef = cfg.r1_gamma * cfg.r1_interval / (N * 2.0 * eps);
                    for (int sign : {1, -1}) {
                        nn::Tensor<float> shifted = reals.value();
                        for (std::size_t i = 0; i < shifted.size(); ++i)
                            shifted[i] += static_cast<float>(sign * eps) * grad_x[i];
                        auto out = d.forward(nn::Var<float>(std::move(shifted)));
                        nn::Tensor<float> seed(out.shape(), static_cast<float>(sign * coef));
                        nn::backward(out, &seed);
                    }
                }
            }
            opt_d.step();
        }

        // Generator update through a frozen discriminator.
        {
            g.params().zero_grad();
            d.params().set_requires_grad(false);
            nn::Var<float> w_first;
            auto fakes = g.synthesize(detail::sample_ws(g, N, cfg.mixing_prob, rng, &w_first), g.random_noise(N, rng));
            auto loss = nn::softplus_mean(d.forward(fakes), -1.0f);
            nn::backward(loss);
            d.params().set_requires_grad(true);
            entry.g_loss = loss.value()[0];
            opt_g.step();

            // Track the average w.
            const int D = net.latent_dim;
            auto& avg = g.w_avg();
            for (int k = 0; k < D; ++k) {
                double m = 0;
                for (int n = 0; n < N; ++n) m += w_first.value()[n * D + k];
                avg[k] = static_cast<float>(0.995 * avg[k] + 0.005 * (m / N));
            }
        }

        // Exponential moving average of generator weights.
        {
            const double seen = static_cast<double>(step + 1) * N;
            const double half_life = std::min(cfg.ema_half_life_images, seen * cfg.ema_rampup);
            const double beta = half_life > 0 ? std::pow(0.5, N / half_life) : 0.0;
            const auto& src = g.params().items();
            const auto& dst = ema.params().items();
            for (std::size_t k = 0; k < src.size(); ++k) {
                auto& out = const_cast<nn::Var<float>&>(dst[k].second).mutable_value();
                const auto& in = src[k].second.value();
                for (std::size_t i = 0; i < out.size(); ++i)
                    out[i] = static_cast<float>(in[i] + beta * (out[i] - in[i]));
            }
            ema.w_avg() = g.w_avg();
        }

        result.log.push_back(entry);
        if (cfg.on_step) cfg.on_step(step, entry.g_loss, entry.d_loss);

        const bool finite = std::isfinite(entry.g_loss) && std::isfinite(entry.d_loss) && detail::all_finite(g.params()) &&
                            detail::all_finite(d.params());
        if (!finite) {
            ema.params().copy_from(good_g->params());
            ema.w_avg() = good_g->w_avg();
            d.params().copy_from(good_d->params());
            result.diverged = true;
            break;
        }
        const bool checkpoint = cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0;
        if (checkpoint || step + 1 == cfg.steps) {
            good_g = clone_generator(ema);
            good_d->params().copy_from(d.params());
            result.last_good_step = step + 1;
            if (checkpoint && cfg.checkpoint_dir) {
                bundle.generator_trained = true;
                save_bundle(bundle, *cfg.checkpoint_dir);
            }
        }
    }
    bundle.generator_trained = true;
    bundle.training_info["gan"] = {{"steps", result.last_good_step}, {"batch", N}, {"seed", cfg.seed},
                                   {"r1_gamma", cfg.r1_gamma}, {"diverged", result.diverged}};
    return result;
}

// ------------------------------------------------------------------ encoder

struct EncoderConfig {
    int n_pairs = 2000;
    int steps = 1500;
    int batch = 8;
    double lr = 0.001;
    bool use_perceptual = false;
    double lambda_perceptual = 0.8;
    double latent_weight = 1.0;  // L2 between predicted and source W+ code
    std::uint64_t seed = 2;
    std::function<void(int step, double loss)> on_step;
};

struct EncoderResult {
    ModelBundle bundle;
    std::vector<double> train_loss;
    int n_train = 0;
    int n_test = 0;
    double test_rmse_before = 0;
    double test_rmse_after = 0;
};

inline std::pair<int, int> split_pairs(int n_pairs) {
    const int n_train = static_cast<int>(std::lround(n_pairs * 0.8));
    return {n_train, n_pairs - n_train};
}

// Mean feature-space squared distance using the discriminator's activations
// as a fixed feature extractor.
inline nn::Var<float> feature_distance(const Discriminator<float>& d, const nn::Var<float>& a, const nn::Var<float>& b) {
    std::vector<nn::Var<float>> fa, fb;
    d.forward(a, &fa);
    {
        nn::NoGradGuard ng;
        d.forward(b, &fb);
    }
    std::vector<nn::Var<float>> terms;
    for (std::size_t i = 0; i < fa.size(); ++i) terms.push_back(nn::mse(fa[i], fb[i].detach()));
    return nn::weighted_sum(terms, std::vector<float>(terms.size(), 1.0f / static_cast<float>(terms.size())));
}

// Held-out reconstruction error synthesize(encode(x)) vs x.
inline double encoder_rmse(const ModelBundle& b, const std::vector<NormalizedField>& images) {
    double acc = 0;
    for (std::size_t start = 0; start < images.size(); start += 16) {
        std::vector<const NormalizedField*> fields;
        for (std::size_t i = start; i < std::min(images.size(), start + 16); ++i) fields.push_back(&images[i]);
        const auto ws = encode_batch(fields, b);
        std::vector<const LatentWPlus*> ptrs;
        for (const auto& w : ws) ptrs.push_back(&w);
        const auto recon = synthesize_batch(ptrs, b);
        for (std::size_t i = 0; i < fields.size(); ++i) acc += rmse(recon[i], *fields[i]);
    }
    return acc / static_cast<double>(images.size());
}

// Trains the encoder on (G(w), w) pairs from random latent vectors, split
// 80/20 into train and held-out test sets.
inline EncoderResult train_encoder(const ModelBundle& input, const EncoderConfig& cfg) {
    if (!input.generator_trained) fail_input("bundle", "encoder training needs a trained generator");
    if (cfg.n_pairs < 2) fail_input("n_pairs", "need at least two pairs");
    EncoderResult result{input, {}, 0, 0, 0, 0};
    ModelBundle& b = result.bundle;
    b.encoder = std::make_shared<Encoder<float>>(b.config, cfg.seed);
    const int L = b.layers(), D = b.dim(), R = b.resolution();

    std::vector<LatentWPlus> codes;
    std::vector<NormalizedField> images;
    std::mt19937_64 pair_rng(cfg.seed * 104729 + 3);
    for (int i = 0; i < cfg.n_pairs; ++i) codes.push_back(broadcast(map_latent(sample_z(pair_rng(), D), b), b));
    for (int start = 0; start < cfg.n_pairs; start += 32) {
        std::vector<const LatentWPlus*> ptrs;
        for (int i = start; i < std::min(cfg.n_pairs, start + 32); ++i) ptrs.push_back(&codes[i]);
        for (auto& f : synthesize_batch(ptrs, b)) images.push_back(std::move(f));
    }
    std::tie(result.n_train, result.n_test) = split_pairs(cfg.n_pairs);
    const std::vector<NormalizedField> test(images.begin() + result.n_train, images.end());
    result.test_rmse_before = encoder_rmse(b, test);

    Generator<float>& g = *b.generator;
    g.params().set_requires_grad(false);
    b.discriminator->params().set_requires_grad(false);
    const auto noise = g.frozen_noise(kDefaultNoiseSeed);
    nn::Adam<float> opt(b.encoder->params().vars(), cfg.lr, 0.9, 0.999);
    std::mt19937_64 rng(cfg.seed);
    std::uniform_int_distribution<int> pick(0, result.n_train - 1);
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<const NormalizedField*> fields;
        std::vector<const LatentWPlus*> targets;
        for (int n = 0; n < cfg.batch; ++n) {
            const int k = pick(rng);
            fields.push_back(&images[k]);
            targets.push_back(&codes[k]);
        }
        nn::Var<float> x(to_image_tensor(fields, R));
        b.encoder->params().zero_grad();
        auto ws = b.encoder->forward(x, g.w_avg());
        auto recon = g.synthesize(ws, noise);
        std::vector<nn::Var<float>> terms{nn::mse(recon, x)};
        std::vector<float> weights{1.0f};
        if (cfg.latent_weight > 0) {
            terms.push_back(nn::mse(ws, nn::Var<float>(to_latent_tensor(targets))));
            weights.push_back(static_cast<float>(cfg.latent_weight));
        }
        if (cfg.use_perceptual && cfg.lambda_perceptual > 0) {
            terms.push_back(feature_distance(*b.discriminator, recon, x));
            weights.push_back(static_cast<float>(cfg.lambda_perceptual));
        }
        auto loss = nn::weighted_sum(terms, weights);
        nn::backward(loss);
        opt.step();
        result.train_loss.push_back(loss.value()[0]);
        if (cfg.on_step) cfg.on_step(step, loss.value()[0]);
    }
    g.params().set_requires_grad(true);
    b.discriminator->params().set_requires_grad(true);
    (void)L;
    b.encoder_trained = true;
    result.test_rmse_after = encoder_rmse(b, test);
    b.training_info["encoder"] = {{"n_pairs", cfg.n_pairs},          {"n_train", result.n_train},
                                  {"n_test", result.n_test},         {"steps", cfg.steps},
                                  {"use_perceptual", cfg.use_perceptual}, {"lambda_perceptual", cfg.lambda_perceptual},
                                  {"test_rmse_before", result.test_rmse_before},
                                  {"test_rmse_after", result.test_rmse_after}};
    return result;
}

}  // namespace styledem::training
