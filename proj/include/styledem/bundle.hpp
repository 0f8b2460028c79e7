#pragma once

// ModelBundle: generator, discriminator and encoder weights with their
// configuration, plus the inference entry points (map, synthesize, encode).
//
// On disk a bundle is a directory:
//   manifest.json               config, version, scale_tag, sha256 per file
//   generator.safetensors       (includes the tracked average w as "w_avg")
//   discriminator.safetensors
//   encoder.safetensors
// Saving writes a sibling temporary directory and renames it into place.

#include <openssl/evp.h>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "styledem/error.hpp"
#include "styledem/heightfield.hpp"
#include "styledem/latent.hpp"
#include "styledem/networks.hpp"
#include "styledem/nn/safetensors.hpp"

namespace styledem {

// Noise seed used whenever a caller does not pick one (encoder training and
// the encode -> synthesize round trip both use it).
inline constexpr std::uint64_t kDefaultNoiseSeed = 0;

inline std::string sha256_hex(const std::string& bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
    std::ostringstream out;
    for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
    return out.str();
}

inline nlohmann::json to_json(const NetworkConfig& c) {
    return {{"resolution", c.resolution},         {"latent_dim", c.latent_dim}, {"style_layers", c.style_layers()},
            {"mapping_layers", c.mapping_layers}, {"channel_base", c.channel_base}, {"channel_max", c.channel_max},
            {"scale_tag", c.scale_tag},           {"noise_policy", c.noise_policy}};
}

inline NetworkConfig network_config_from_json(const nlohmann::json& j) {
    NetworkConfig c;
    c.resolution = j.at("resolution").get<int>();
    c.latent_dim = j.at("latent_dim").get<int>();
    c.mapping_layers = j.value("mapping_layers", c.mapping_layers);
    c.channel_base = j.value("channel_base", c.channel_base);
    c.channel_max = j.value("channel_max", c.channel_max);
    c.scale_tag = j.value("scale_tag", c.scale_tag);
    c.noise_policy = j.value("noise_policy", c.noise_policy);
    c.validate();
    if (j.contains("style_layers") && j["style_layers"].get<int>() != c.style_layers())
        fail_input("style_layers", "style layer count inconsistent with resolution");
    return c;
}

struct ModelBundle {
    NetworkConfig config;
    std::string version = "untrained";
    bool generator_trained = false;
    bool encoder_trained = false;
    std::shared_ptr<Generator<float>> generator;
    std::shared_ptr<Discriminator<float>> discriminator;
    std::shared_ptr<Encoder<float>> encoder;
    nlohmann::json training_info = nlohmann::json::object();

    static ModelBundle create(const NetworkConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        ModelBundle b;
        b.config = cfg;
        b.generator = std::make_shared<Generator<float>>(cfg, seed);
        b.discriminator = std::make_shared<Discriminator<float>>(cfg, seed + 1);
        b.encoder = std::make_shared<Encoder<float>>(cfg, seed + 2);
        // Until training tracks it, the average w is the mapped mean of a
        // fixed z sample.
        b.refresh_w_avg(1024, seed + 3);
        return b;
    }

    int resolution() const { return config.resolution; }
    int layers() const { return config.style_layers(); }
    int dim() const { return config.latent_dim; }

    void refresh_w_avg(int samples, std::uint64_t seed) {
        nn::NoGradGuard ng;
        std::mt19937_64 rng(seed);
        nn::Var<float> z(nn::randn<float>({samples, dim()}, rng));
        const auto w = generator->map(z);
        auto& avg = generator->w_avg();
        avg.fill(0.0f);
        for (int n = 0; n < samples; ++n)
            for (int d = 0; d < dim(); ++d) avg[d] += w.value()[n * dim() + d] / samples;
    }
};

// Copy with independent network weights (ModelBundle copies share them).
inline ModelBundle deep_copy(const ModelBundle& b) {
    ModelBundle out = b;
    out.generator = std::make_shared<Generator<float>>(b.config, 0);
    out.generator->params().copy_from(b.generator->params());
    out.generator->w_avg() = b.generator->w_avg();
    out.discriminator = std::make_shared<Discriminator<float>>(b.config, 0);
    out.discriminator->params().copy_from(b.discriminator->params());
    out.encoder = std::make_shared<Encoder<float>>(b.config, 0);
    out.encoder->params().copy_from(b.encoder->params());
    return out;
}

// ------------------------------------------------------------------ tensors

inline nn::Tensor<float> to_image_tensor(const std::vector<const NormalizedField*>& fields, int resolution) {
    nn::Tensor<float> t({static_cast<int>(fields.size()), 1, resolution, resolution});
    for (std::size_t n = 0; n < fields.size(); ++n) {
        const auto& f = *fields[n];
        if (f.width() != resolution || f.height() != resolution)
            fail_input("field", "field is ", std::to_string(f.width()), "x", std::to_string(f.height()),
                       ", bundle resolution is ", std::to_string(resolution));
        for (std::size_t i = 0; i < f.grid.size(); ++i)
            t[n * f.grid.size() + i] = static_cast<float>(2.0 * f.grid.values[i] - 1.0);
    }
    return t;
}

inline NormalizedField field_from_image(const nn::Tensor<float>& img, int n) {
    const int R = img.dim(2);
    NormalizedField f;
    f.grid = Grid<double>(R, R);
    f.min_m = 0.0;
    f.max_m = 1.0;
    const std::size_t per = static_cast<std::size_t>(R) * R;
    for (std::size_t i = 0; i < per; ++i)
        f.grid.values[i] = std::clamp((static_cast<double>(img[n * per + i]) + 1.0) * 0.5, 0.0, 1.0);
    return f;
}

inline nn::Tensor<float> to_latent_tensor(const std::vector<const LatentWPlus*>& ws) {
    const int L = ws.front()->layers(), D = ws.front()->dim();
    nn::Tensor<float> t({static_cast<int>(ws.size()), L, D});
    for (std::size_t n = 0; n < ws.size(); ++n) {
        if (!ws[n]->same_shape(*ws.front())) fail_input("w", "latent shapes differ within a batch");
        std::copy(ws[n]->values().begin(), ws[n]->values().end(), t.data.begin() + static_cast<std::ptrdiff_t>(n) * L * D);
    }
    return t;
}

inline LatentWPlus latent_from_tensor(const nn::Tensor<float>& t, int n) {
    const int L = t.dim(1), D = t.dim(2);
    std::vector<float> v(t.data.begin() + static_cast<std::ptrdiff_t>(n) * L * D,
                         t.data.begin() + static_cast<std::ptrdiff_t>(n + 1) * L * D);
    return LatentWPlus(L, D, std::move(v));
}

// ------------------------------------------------------------------ inference

inline LatentZ sample_z(std::uint64_t seed, int dim) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist;
    LatentZ z;
    z.values.resize(dim);
    for (auto& v : z.values) v = static_cast<float>(dist(rng));
    return z;
}

inline LatentW map_latent(const LatentZ& z, const ModelBundle& b) {
    if (z.dim() != b.dim())
        fail_input("z", "z has dimension ", std::to_string(z.dim()), ", bundle expects ", std::to_string(b.dim()));
    nn::NoGradGuard ng;
    const auto w = b.generator->map(nn::Var<float>(nn::Tensor<float>({1, b.dim()}, z.values)));
    return LatentW{w.value().data};
}

inline LatentWPlus broadcast(const LatentW& w, const ModelBundle& b) { return LatentWPlus::broadcast(w, b.layers()); }

inline LatentWPlus mean_latent(const ModelBundle& b) {
    return LatentWPlus::broadcast(LatentW{b.generator->w_avg().data}, b.layers());
}

inline void check_latent_shape(const LatentWPlus& w, const ModelBundle& b) {
    if (w.layers() != b.layers() || w.dim() != b.dim())
        fail_input("w", "latent is ", std::to_string(w.layers()), "x", std::to_string(w.dim()), ", bundle expects ",
                   std::to_string(b.layers()), "x", std::to_string(b.dim()));
    if (!w.finite()) fail_input("w", "latent contains non-finite values");
}

inline std::vector<NormalizedField> synthesize_batch(const std::vector<const LatentWPlus*>& ws, const ModelBundle& b,
                                                     std::uint64_t noise_seed = kDefaultNoiseSeed) {
    for (const auto* w : ws) check_latent_shape(*w, b);
    nn::NoGradGuard ng;
    const auto img = b.generator->synthesize(nn::Var<float>(to_latent_tensor(ws)), b.generator->frozen_noise(noise_seed));
    std::vector<NormalizedField> out;
    out.reserve(ws.size());
    for (std::size_t n = 0; n < ws.size(); ++n) out.push_back(field_from_image(img.value(), static_cast<int>(n)));
    return out;
}

inline NormalizedField synthesize(const LatentWPlus& w, const ModelBundle& b, std::uint64_t noise_seed = kDefaultNoiseSeed) {
    return std::move(synthesize_batch({&w}, b, noise_seed).front());
}

inline std::vector<LatentWPlus> encode_batch(const std::vector<const NormalizedField*>& fields, const ModelBundle& b) {
    nn::NoGradGuard ng;
    const auto ws = b.encoder->forward(nn::Var<float>(to_image_tensor(fields, b.resolution())), b.generator->w_avg());
    std::vector<LatentWPlus> out;
    for (std::size_t n = 0; n < fields.size(); ++n) out.push_back(latent_from_tensor(ws.value(), static_cast<int>(n)));
    return out;
}

inline LatentWPlus encode(const NormalizedField& field, const ModelBundle& b) {
    return std::move(encode_batch({&field}, b).front());
}

// ------------------------------------------------------------------ persistence

inline std::map<std::string, nn::Tensor<float>> generator_state(const Generator<float>& g) {
    auto state = g.params().state();
    state["w_avg"] = g.w_avg();
    return state;
}

inline void save_bundle(ModelBundle& b, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    const std::string g = nn::encode_safetensors(generator_state(*b.generator));
    const std::string d = nn::encode_safetensors(b.discriminator->params().state());
    const std::string e = nn::encode_safetensors(b.encoder->params().state());
    nlohmann::json files = {{"generator", {{"file", "generator.safetensors"}, {"sha256", sha256_hex(g)}}},
                            {"discriminator", {{"file", "discriminator.safetensors"}, {"sha256", sha256_hex(d)}}},
                            {"encoder", {{"file", "encoder.safetensors"}, {"sha256", sha256_hex(e)}}}};
    b.version = sha256_hex(to_json(b.config).dump() + files.dump()).substr(0, 16);
    nlohmann::json manifest = {{"format", "styledem-bundle"},
                               {"format_version", 1},
                               {"version", b.version},
                               {"scale_tag", b.config.scale_tag},
                               {"config", to_json(b.config)},
                               {"generator_trained", b.generator_trained},
                               {"encoder_trained", b.encoder_trained},
                               {"training", b.training_info},
                               {"files", files}};
    const fs::path parent = dir.has_parent_path() ? dir.parent_path() : fs::path(".");
    fs::create_directories(parent);
    const fs::path tmp = parent / (dir.filename().string() + ".tmp-" + std::to_string(std::chrono::steady_clock::now().time_since_epoch().count()));
    fs::create_directories(tmp);
    nn::write_file_bytes(tmp / "generator.safetensors", g);
    nn::write_file_bytes(tmp / "discriminator.safetensors", d);
    nn::write_file_bytes(tmp / "encoder.safetensors", e);
    nn::write_file_bytes(tmp / "manifest.json", manifest.dump(2) + "\n");
    if (fs::exists(dir)) {
        const fs::path old = parent / (dir.filename().string() + ".old-" + b.version);
        fs::remove_all(old);
        fs::rename(dir, old);
        fs::rename(tmp, dir);
        fs::remove_all(old);
    } else {
        fs::rename(tmp, dir);
    }
}

inline nlohmann::json read_bundle_manifest(const std::filesystem::path& dir) {
    const auto path = dir / "manifest.json";
    try {
        return nlohmann::json::parse(nn::read_file_bytes(path));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad bundle manifest " + path.string() + ": " + e.what());
    }
}

inline ModelBundle load_bundle(const std::filesystem::path& dir) {
    const auto manifest = read_bundle_manifest(dir);
    if (manifest.value("format", "") != "styledem-bundle") throw IoError("not a model bundle: " + dir.string());
    ModelBundle b = ModelBundle::create(network_config_from_json(manifest.at("config")), 0);
    b.version = manifest.at("version").get<std::string>();
    b.generator_trained = manifest.value("generator_trained", false);
    b.encoder_trained = manifest.value("encoder_trained", false);
    b.training_info = manifest.value("training", nlohmann::json::object());
    auto read = [&](const std::string& key) {
        const auto& f = manifest.at("files").at(key);
        const std::string bytes = nn::read_file_bytes(dir / f.at("file").get<std::string>());
        if (sha256_hex(bytes) != f.at("sha256").get<std::string>()) throw IoError("checksum mismatch for " + key + " in " + dir.string());
        return nn::decode_safetensors(bytes);
    };
    auto g = read("generator");
    auto avg = g.at("w_avg");
    g.erase("w_avg");
    b.generator->params().load_state(g);
    b.generator->w_avg() = avg;
    b.discriminator->params().load_state(read("discriminator"));
    b.encoder->params().load_state(read("encoder"));
    return b;
}

}  // namespace styledem
