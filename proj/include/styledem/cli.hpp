#pragma once

// Command-line front end. Every subcommand wraps one module operation and
// writes heightfield PNG + sidecar, latent files or JSON reports.
// Exit status: 0 success, 2 usage error, 1 operation error (JSON on stderr).

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "styledem/bundle.hpp"
#include "styledem/dataset.hpp"
#include "styledem/error.hpp"
#include "styledem/feature_size.hpp"
#include "styledem/heightfield_io.hpp"
#include "styledem/hydrology.hpp"
#include "styledem/superres.hpp"
#include "styledem/toolbox.hpp"
#include "styledem/training.hpp"

namespace styledem::cli {

namespace fs = std::filesystem;
using nlohmann::json;

struct Options {
    std::uint64_t seed = 0;
    bool verbose = false;

    // dataset build
    std::string input, out;
    int target_per_class = 20;
    int resolution = 64;
    int synthetic = 256;

    // training
    std::string dataset, bundle;
    int steps = -1;
    int batch = 8;
    int latent_dim = 128;
    int checkpoint_interval = 500;
    std::string scale_tag = "30m";
    int pairs = 2000;
    bool perceptual = false;
    double lambda = 0.8;
    double latent_weight = 1.0;
    double lr = -1;

    // synthesis and latents
    std::uint64_t noise_seed = kDefaultNoiseSeed;
    std::string latent, latent_out, terrain_out;
    double min_m = 0, max_m = 1000;
    std::string u, v;
    int index = 0;
    double alpha = 0;
    bool extrapolate = false;

    // blend
    std::string a, b, mask;
    std::vector<double> brush;
    double radius = 8, feather = 0.5;

    // amplify / cascade
    int upscale = 4;
    std::string coarse, fine, debug_dir;
    int coarse_upscale = 4, fine_upscale = 4;

    // invert-opt
    bool no_l2 = false;
    std::string init = "encoder";

    // hydrology
    std::string breached_out;
    bool depths = false;
};

namespace detail {

inline void emit(const json& j) { std::cout << j.dump(2) << "\n"; }

inline LatentWPlus read_latent(const std::string& path) { return load_latent(path).latent; }

inline std::vector<fs::path> png_files(const fs::path& dir) {
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

inline RegionMask load_mask(const std::string& path, int w, int h) {
    const GrayImage img = decode_png_gray(nn::read_file_bytes(path));
    if (img.width != w || img.height != h) fail_input("mask", "mask size does not match the terrains");
    RegionMask m{Grid<double>(w, h)};
    for (std::size_t i = 0; i < img.samples.size(); ++i) m.alpha.values[i] = img.samples[i] / 65535.0;
    return m;
}

inline Heightfield latent_terrain(const LatentWPlus& w, const ModelBundle& b, const Options& o) {
    NormalizedField n = synthesize(w, b, o.noise_seed);
    n.min_m = o.min_m;
    n.max_m = o.max_m;
    return denormalize(n, b.config.cell_size_m());
}

}  // namespace detail

// ------------------------------------------------------------------ commands

inline void cmd_dataset_build(const Options& o) {
    std::vector<std::pair<std::string, Heightfield>> tiles;
    if (!o.input.empty()) {
        for (const auto& p : detail::png_files(o.input)) tiles.emplace_back(p.stem().string(), load_heightfield(p));
        if (tiles.empty()) fail_input("input", "no PNG heightfields in ", o.input);
    } else {
        auto corpus = dataset::synthetic_corpus(static_cast<std::size_t>(o.synthetic), o.seed, o.resolution);
        for (std::size_t i = 0; i < corpus.size(); ++i) {
            char name[32];
            std::snprintf(name, sizeof name, "fbm_%05zu", i);
            tiles.emplace_back(name, std::move(corpus[i]));
        }
    }
    const auto m = dataset::build_dataset(tiles, o.out, o.target_per_class, o.seed, o.resolution);
    json counts = json::object();
    for (const auto& [cls, n] : m.class_counts()) counts[std::to_string(cls)] = n;
    detail::emit({{"manifest", (fs::path(o.out) / "manifest.json").string()}, {"tiles", m.tiles.size()}, {"class_counts", counts}});
}

inline void cmd_train_gan(const Options& o) {
    const auto m = dataset::load_manifest(fs::path(o.dataset) / "manifest.json");
    const auto images = dataset::load_training_images(m, o.dataset);
    NetworkConfig net;
    net.resolution = m.resolution;
    net.latent_dim = o.latent_dim;
    net.scale_tag = o.scale_tag;
    training::GanConfig cfg;
    cfg.steps = o.steps > 0 ? o.steps : cfg.steps;
    cfg.batch = o.batch;
    if (o.lr > 0) cfg.lr = o.lr;
    cfg.seed = o.seed;
    cfg.checkpoint_interval = o.checkpoint_interval;
    cfg.checkpoint_dir = o.out;
    if (o.verbose)
        cfg.on_step = [](int step, double g, double d) {
            if (step % 50 == 0) std::cerr << "step " << step << " g_loss " << g << " d_loss " << d << "\n";
        };
    auto r = training::train_generator(images, net, cfg);
    save_bundle(r.bundle, o.out);
    json log = json::array();
    for (const auto& e : r.log) log.push_back({e.step, e.g_loss, e.d_loss});
    nn::write_file_bytes(fs::path(o.out).string() + ".log.json", json{{"columns", {"step", "g_loss", "d_loss"}}, {"log", log}}.dump());
    if (r.diverged) throw std::runtime_error("training diverged; last good checkpoint at step " + std::to_string(r.last_good_step) + " saved");
    detail::emit({{"bundle", o.out}, {"version", r.bundle.version}, {"steps", r.last_good_step}});
}

inline void cmd_train_encoder(const Options& o) {
    const ModelBundle in = load_bundle(o.bundle);
    training::EncoderConfig cfg;
    cfg.n_pairs = o.pairs;
    if (o.steps > 0) cfg.steps = o.steps;
    cfg.batch = o.batch;
    if (o.lr > 0) cfg.lr = o.lr;
    cfg.use_perceptual = o.perceptual;
    cfg.lambda_perceptual = o.lambda;
    cfg.latent_weight = o.latent_weight;
    cfg.seed = o.seed;
    if (o.verbose)
        cfg.on_step = [](int step, double loss) {
            if (step % 100 == 0) std::cerr << "step " << step << " loss " << loss << "\n";
        };
    auto r = training::train_encoder(in, cfg);
    const std::string out = o.out.empty() ? o.bundle : o.out;
    save_bundle(r.bundle, out);
    detail::emit({{"bundle", out},
                  {"version", r.bundle.version},
                  {"n_train", r.n_train},
                  {"n_test", r.n_test},
                  {"test_rmse_before", r.test_rmse_before},
                  {"test_rmse_after", r.test_rmse_after}});
}

inline void cmd_generate(const Options& o) {
    const ModelBundle b = load_bundle(o.bundle);
    const LatentWPlus w = o.latent.empty() ? broadcast(map_latent(sample_z(o.seed, b.dim()), b), b) : detail::read_latent(o.latent);
    save_heightfield(detail::latent_terrain(w, b, o), o.out);
    if (!o.latent_out.empty()) save_latent(w, b.version, o.latent_out);
    detail::emit({{"terrain", o.out}, {"seed", o.seed}, {"noise_seed", o.noise_seed}});
}

inline void cmd_encode(const Options& o) {
    const ModelBundle b = load_bundle(o.bundle);
    const Heightfield t = load_heightfield(o.input);
    const int R = b.resolution();
    const Heightfield sized = (t.width() == R && t.height() == R) ? t : resample(t, R, R);
    const LatentWPlus w = encode(normalize(sized), b);
    save_latent(w, b.version, o.out);
    detail::emit({{"latent", o.out}, {"layers", w.layers()}, {"dim", w.dim()}});
}

inline void write_latent_result(const LatentWPlus& w, const Options& o, const std::string& version) {
    save_latent(w, version, o.out);
    if (!o.terrain_out.empty()) {
        if (o.bundle.empty()) fail_input("bundle", "--terrain-out needs --bundle");
        save_heightfield(detail::latent_terrain(w, load_bundle(o.bundle), o), o.terrain_out);
    }
    detail::emit({{"latent", o.out}});
}

inline void cmd_mix(const Options& o) {
    const auto u = load_latent(o.u), v = load_latent(o.v);
    write_latent_result(toolbox::style_mix(u.latent, v.latent, o.index), o, u.bundle_version);
}

inline void cmd_interpolate(const Options& o) {
    const auto u = load_latent(o.u), v = load_latent(o.v);
    write_latent_result(toolbox::interpolate(u.latent, v.latent, o.alpha, o.extrapolate), o, u.bundle_version);
}

inline void cmd_blend(const Options& o) {
    const Heightfield a = load_heightfield(o.a), b = load_heightfield(o.b);
    RegionMask mask;
    if (!o.mask.empty()) {
        mask = detail::load_mask(o.mask, a.width(), a.height());
    } else {
        if (o.brush.empty() || o.brush.size() % 2) fail_input("brush", "--brush takes x,y pairs");
        std::vector<toolbox::BrushDab> dabs;
        for (std::size_t i = 0; i < o.brush.size(); i += 2) dabs.push_back({o.brush[i], o.brush[i + 1]});
        mask = toolbox::brush_mask(a.width(), a.height(), dabs, o.radius, o.feather);
    }
    save_heightfield(toolbox::region_blend(a, b, mask), o.out);
    detail::emit({{"terrain", o.out}});
}

inline void cmd_amplify(const Options& o) {
    const ModelBundle b = load_bundle(o.bundle);
    superres::AmplifyOptions opt;
    if (!o.debug_dir.empty()) opt.debug_dir = o.debug_dir;
    const auto r = superres::amplify(load_heightfield(o.input), b, o.upscale, opt, o.noise_seed);
    save_heightfield(r.terrain, o.out);
    detail::emit({{"terrain", o.out},
                  {"width", r.terrain.width()},
                  {"height", r.terrain.height()},
                  {"cell_size_m", r.terrain.cell_size},
                  {"patches", r.grid.patches.size()},
                  {"encoder_passes", r.encoder_passes},
                  {"generator_passes", r.generator_passes}});
}

inline void cmd_cascade(const Options& o) {
    const ModelBundle c = load_bundle(o.coarse), f = load_bundle(o.fine);
    const Heightfield out = superres::cascade(load_heightfield(o.input), c, o.coarse_upscale, f, o.fine_upscale);
    save_heightfield(out, o.out);
    detail::emit({{"terrain", o.out}, {"width", out.width()}, {"height", out.height()}, {"cell_size_m", out.cell_size}});
}

inline void cmd_invert_opt(const Options& o) {
    const ModelBundle b = load_bundle(o.bundle);
    const Heightfield t = load_heightfield(o.input);
    const int R = b.resolution();
    const NormalizedField target = normalize((t.width() == R && t.height() == R) ? t : resample(t, R, R));
    toolbox::InvertConfig cfg;
    cfg.steps = o.steps >= 0 ? o.steps : cfg.steps;
    if (o.lr > 0) cfg.lr = o.lr;
    cfg.use_l2 = !o.no_l2;
    cfg.use_perceptual = o.perceptual;
    cfg.lambda_perceptual = o.lambda;
    if (o.init == "mean") cfg.init = mean_latent(b);
    else if (o.init != "encoder") cfg.init = detail::read_latent(o.init);
    const auto r = toolbox::optimize_invert(target, b, cfg);
    save_latent(r.latent, b.version, o.out);
    if (!o.terrain_out.empty()) {
        NormalizedField n = synthesize(r.latent, b);
        n.min_m = target.min_m;
        n.max_m = target.max_m;
        save_heightfield(denormalize(n, t.extent_x() / R), o.terrain_out);
    }
    detail::emit({{"latent", o.out}, {"best_loss", r.best_loss}, {"best_step", r.best_step}, {"loss_trace", r.loss_trace}});
}

inline void cmd_validate_hydrology(const Options& o) {
    auto report_one = [&](const fs::path& p, const std::string& breached_out) {
        const auto r = hydrology::breach(load_heightfield(p));
        if (!breached_out.empty()) save_heightfield(r.terrain, breached_out);
        json j = hydrology::to_json(r.report, o.depths);
        j["input"] = p.string();
        return std::pair{j, r.report};
    };
    if (fs::is_directory(o.input)) {
        json items = json::array();
        std::vector<double> vt, vk;
        for (const auto& p : detail::png_files(o.input)) {
            auto [j, r] = report_one(p, "");
            items.push_back(j);
            vt.push_back(r.v_T);
            vk.push_back(r.v_T_per_km2);
        }
        if (vt.empty()) fail_input("input", "no PNG heightfields in ", o.input);
        auto stats = [](std::vector<double> v) {
            double mean = 0;
            for (double x : v) mean += x;
            mean /= static_cast<double>(v.size());
            std::sort(v.begin(), v.end());
            const double median = v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
            return json{{"mean", mean}, {"median", median}};
        };
        detail::emit({{"count", vt.size()}, {"v_T", stats(vt)}, {"v_T_per_km2", stats(vk)}, {"terrains", items}});
    } else {
        detail::emit(report_one(o.input, o.breached_out).first);
    }
}

inline void cmd_eval_feature_size(const Options& o) {
    const ModelBundle b = load_bundle(o.bundle);
    detail::emit(eval::to_json(eval::feature_size(b)));
}

// ------------------------------------------------------------------ dispatch

inline int run(int argc, char** argv) {
    CLI::App app{"Style-based terrain synthesis, editing and amplification"};
    app.require_subcommand(1);
    app.fallthrough();
    app.set_config("--config", "", "TOML/INI file with option defaults");
    Options o;
    app.add_option("--seed", o.seed, "Seed for every random choice");
    app.add_flag("--verbose,-v", o.verbose, "Progress on stderr");

    std::function<void()> action;
    auto bind = [&](CLI::App* sub, void (*fn)(const Options&)) { sub->callback([&action, fn, &o] { action = [fn, &o] { fn(o); }; }); };

    auto* dataset = app.add_subcommand("dataset", "Training corpora")->require_subcommand(1);
    auto* build = dataset->add_subcommand("build", "Classify, balance and write training tiles");
    build->add_option("--input", o.input, "Directory of heightfield PNGs (default: synthetic fBm corpus)");
    build->add_option("--out", o.out, "Output directory")->required();
    build->add_option("--target-per-class", o.target_per_class)->check(CLI::PositiveNumber);
    build->add_option("--resolution", o.resolution)->check(CLI::PositiveNumber);
    build->add_option("--synthetic", o.synthetic, "Number of synthetic tiles when no input is given")->check(CLI::PositiveNumber);
    bind(build, cmd_dataset_build);

    auto* train = app.add_subcommand("train", "Model training")->require_subcommand(1);
    auto* gan = train->add_subcommand("gan", "Adversarial generator training");
    gan->add_option("--dataset", o.dataset, "Dataset directory with manifest.json")->required();
    gan->add_option("--out", o.out, "Bundle directory")->required();
    gan->add_option("--steps", o.steps);
    gan->add_option("--batch", o.batch)->check(CLI::PositiveNumber);
    gan->add_option("--lr", o.lr);
    gan->add_option("--latent-dim", o.latent_dim)->check(CLI::PositiveNumber);
    gan->add_option("--checkpoint-interval", o.checkpoint_interval);
    gan->add_option("--scale-tag", o.scale_tag);
    bind(gan, cmd_train_gan);
    auto* enc = train->add_subcommand("encoder", "Encoder training on generator samples");
    enc->add_option("--bundle", o.bundle)->required();
    enc->add_option("--out", o.out, "Output bundle (default: update in place)");
    enc->add_option("--pairs", o.pairs)->check(CLI::PositiveNumber);
    enc->add_option("--steps", o.steps);
    enc->add_option("--batch", o.batch)->check(CLI::PositiveNumber);
    enc->add_option("--lr", o.lr);
    enc->add_flag("--perceptual", o.perceptual, "Add the feature-space loss");
    enc->add_option("--lambda", o.lambda, "Weight of the feature-space loss");
    enc->add_option("--latent-weight", o.latent_weight, "Weight of the W+ regression loss");
    bind(enc, cmd_train_encoder);

    auto* gen = app.add_subcommand("generate", "Synthesize a terrain");
    gen->add_option("--bundle", o.bundle)->required();
    gen->add_option("--out", o.out)->required();
    gen->add_option("--latent", o.latent, "Latent file (default: mapped z from --seed)");
    gen->add_option("--latent-out", o.latent_out);
    gen->add_option("--noise-seed", o.noise_seed);
    gen->add_option("--min-m", o.min_m);
    gen->add_option("--max-m", o.max_m);
    bind(gen, cmd_generate);

    auto* en = app.add_subcommand("encode", "Invert a terrain with the encoder");
    en->add_option("--bundle", o.bundle)->required();
    en->add_option("--input", o.input)->required();
    en->add_option("--out", o.out)->required();
    bind(en, cmd_encode);

    for (auto [name, fn] : {std::pair{"mix", cmd_mix}, std::pair{"interpolate", cmd_interpolate}}) {
        auto* sub = app.add_subcommand(name, std::string(name) == "mix" ? "Style mixing of two latents" : "Latent interpolation");
        sub->add_option("--u", o.u)->required();
        sub->add_option("--v", o.v)->required();
        if (std::string(name) == "mix") {
            sub->add_option("--index", o.index, "Crossover row")->required();
        } else {
            sub->add_option("--alpha", o.alpha)->required();
            sub->add_flag("--extrapolate", o.extrapolate, "Allow alpha outside [0,1]");
        }
        sub->add_option("--out", o.out)->required();
        sub->add_option("--bundle", o.bundle);
        sub->add_option("--terrain-out", o.terrain_out);
        sub->add_option("--noise-seed", o.noise_seed);
        sub->add_option("--min-m", o.min_m);
        sub->add_option("--max-m", o.max_m);
        bind(sub, fn);
    }

    auto* bl = app.add_subcommand("blend", "Blend two terrains through a mask");
    bl->add_option("--a", o.a)->required();
    bl->add_option("--b", o.b)->required();
    bl->add_option("--mask", o.mask, "Grayscale PNG mask");
    bl->add_option("--brush", o.brush, "Brush dabs as x y pairs")->expected(-1);
    bl->add_option("--radius", o.radius);
    bl->add_option("--feather", o.feather);
    bl->add_option("--out", o.out)->required();
    bind(bl, cmd_blend);

    auto* amp = app.add_subcommand("amplify", "Patch-based super-resolution");
    amp->add_option("--input", o.input)->required();
    amp->add_option("--bundle", o.bundle)->required();
    amp->add_option("--upscale", o.upscale)->check(CLI::PositiveNumber);
    amp->add_option("--out", o.out)->required();
    amp->add_option("--noise-seed", o.noise_seed);
    amp->add_option("--debug-dir", o.debug_dir, "Dump retargeted patches here");
    bind(amp, cmd_amplify);

    auto* cas = app.add_subcommand("cascade", "Amplify with a coarse then a fine bundle");
    cas->add_option("--input", o.input)->required();
    cas->add_option("--coarse", o.coarse)->required();
    cas->add_option("--fine", o.fine)->required();
    cas->add_option("--coarse-upscale", o.coarse_upscale)->check(CLI::PositiveNumber);
    cas->add_option("--fine-upscale", o.fine_upscale)->check(CLI::PositiveNumber);
    cas->add_option("--out", o.out)->required();
    bind(cas, cmd_cascade);

    auto* inv = app.add_subcommand("invert-opt", "Optimizer-based inversion");
    inv->add_option("--bundle", o.bundle)->required();
    inv->add_option("--input", o.input)->required();
    inv->add_option("--out", o.out)->required();
    inv->add_option("--steps", o.steps);
    inv->add_option("--lr", o.lr);
    inv->add_flag("--no-l2", o.no_l2);
    inv->add_flag("--perceptual", o.perceptual);
    inv->add_option("--lambda", o.lambda);
    inv->add_option("--init", o.init, "encoder | mean | latent file");
    inv->add_option("--terrain-out", o.terrain_out);
    bind(inv, cmd_invert_opt);

    auto* val = app.add_subcommand("validate", "Validation reports")->require_subcommand(1);
    auto* hyd = val->add_subcommand("hydrology", "Breaching volume v_T for a file or directory");
    hyd->add_option("--input", o.input)->required();
    hyd->add_option("--breached-out", o.breached_out);
    hyd->add_flag("--depths", o.depths, "Include per-cell carve depths");
    bind(hyd, cmd_validate_hydrology);

    auto* ev = app.add_subcommand("eval", "Evaluations")->require_subcommand(1);
    auto* fs_ = ev->add_subcommand("feature-size", "Smallest preserved sketch feature");
    fs_->add_option("--bundle", o.bundle)->required();
    bind(fs_, cmd_eval_feature_size);

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }
    try {
        action();
        return 0;
    } catch (const InvalidInput& e) {
        std::cerr << json{{"error", e.what()}, {"field", e.field()}, {"type", "invalid_input"}}.dump() << "\n";
    } catch (const IoError& e) {
        std::cerr << json{{"error", e.what()}, {"type", "io"}}.dump() << "\n";
    } catch (const std::exception& e) {
        std::cerr << json{{"error", e.what()}, {"type", "operation"}}.dump() << "\n";
    }
    return 1;
}

}  // namespace styledem::cli
