#pragma once

// Style-based generator (mapping + synthesis), discriminator and W+ encoder.
//
// Synthesis starts from a learned 4x4 basis and doubles the resolution per
// stage. Stage 0 runs one modulated convolution; every later stage upsamples
// and runs two. Each stage ends with a 1x1 "to image" layer whose output is
// upsampled and accumulated. Row usage of the W+ code for a stage k >= 1:
// up-conv reads row 2k-1, second conv row 2k, to-image row 2k+1; stage 0 uses
// rows 0 and 1. That gives L = 2 * (log2(R) - 1) rows.

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "styledem/error.hpp"
#include "styledem/nn/module.hpp"
#include "styledem/nn/ops.hpp"

namespace styledem {

// Terrain scale classes a bundle may declare, with their nominal cell size.
inline const std::map<std::string, double>& scale_registry() {
    static const std::map<std::string, double> registry{
        {"90m", 90.0}, {"30m", 30.0}, {"10m", 10.0}, {"5m", 5.0}, {"1m", 1.0}};
    return registry;
}

struct NetworkConfig {
    int resolution = 64;
    int latent_dim = 128;
    int mapping_layers = 4;
    int channel_base = 1024;
    int channel_max = 64;
    std::string scale_tag = "30m";
    std::string noise_policy = "frozen";

    static int log2_exact(int v) {
        int k = 0;
        while ((1 << k) < v) ++k;
        return (1 << k) == v ? k : -1;
    }

    int stages() const { return log2_exact(resolution) - 1; }
    int style_layers() const { return 2 * stages(); }
    int channels(int res) const { return std::max(1, std::min(channel_base / res, channel_max)); }
    double cell_size_m() const { return scale_registry().at(scale_tag); }

    void validate() const {
        const int k = log2_exact(resolution);
        if (k < 3) fail_input("resolution", "resolution must be a power of two >= 8");
        if (latent_dim < 1) fail_input("latent_dim", "latent dimension must be positive");
        if (mapping_layers < 1) fail_input("mapping_layers", "need at least one mapping layer");
        if (!scale_registry().count(scale_tag)) fail_input("scale_tag", "unknown scale tag '", scale_tag, "'");
        if (noise_policy != "frozen") fail_input("noise_policy", "only the frozen noise policy is supported");
    }
};

// Full-scale reference: 1024 px, 512-dim, 18 style rows.
inline NetworkConfig full_scale_config() {
    NetworkConfig c;
    c.resolution = 1024;
    c.latent_dim = 512;
    c.mapping_layers = 8;
    c.channel_base = 32768;
    c.channel_max = 512;
    return c;
}

template <class T>
using NoiseSet = std::vector<nn::Tensor<T>>;

template <class T>
class Generator {
public:
    using V = nn::Var<T>;

    Generator(NetworkConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        std::mt19937_64 rng(seed);
        const int D = cfg_.latent_dim;
        for (int i = 0; i < cfg_.mapping_layers; ++i) {
            const std::string p = "mapping." + std::to_string(i);
            mapping_.push_back({params_.add(p + ".weight", nn::randn<T>({D, D}, rng, T(1) / kMappingLrMul)),
                                params_.add(p + ".bias", nn::Tensor<T>({D}))});
        }
        const int c4 = cfg_.channels(4);
        const_input_ = params_.add("const", nn::randn<T>({1, c4, 4, 4}, rng));
        int in_ch = c4;
        for (int s = 0; s < cfg_.stages(); ++s) {
            const int res = 4 << s;
            const int out_ch = cfg_.channels(res);
            const int convs = s == 0 ? 1 : 2;
            for (int c = 0; c < convs; ++c) {
                convs_.push_back(make_conv(rng, in_ch, out_ch, res, c == 0 && s > 0));
                in_ch = out_ch;
            }
            rgbs_.push_back(make_rgb(rng, in_ch));
        }
        w_avg_ = nn::Tensor<T>({D});
    }

    const NetworkConfig& config() const { return cfg_; }
    nn::ParamStore<T>& params() { return params_; }
    const nn::ParamStore<T>& params() const { return params_; }
    nn::Tensor<T>& w_avg() { return w_avg_; }
    const nn::Tensor<T>& w_avg() const { return w_avg_; }
    int noise_layers() const { return static_cast<int>(convs_.size()); }

    // z [N,D] -> w [N,D]
    V map(const V& z) const {
        const int D = cfg_.latent_dim;
        if (z.value().rank() != 2 || z.dim(1) != D)
            fail_input("z", "latent z has shape ", nn::shape_str(z.shape()), ", expected [N,", std::to_string(D), "]");
        V x = nn::pixel_norm(z);
        const T wg = kMappingLrMul / std::sqrt(static_cast<T>(D));
        for (const auto& layer : mapping_) x = nn::leaky_relu(nn::linear(x, layer.weight, layer.bias, wg, kMappingLrMul));
        return x;
    }

    // Noise buffers drawn once from a seed and shared across the batch.
    NoiseSet<T> frozen_noise(std::uint64_t noise_seed) const {
        NoiseSet<T> out;
        for (std::size_t i = 0; i < convs_.size(); ++i) {
            std::mt19937_64 rng(noise_seed * 0x9E3779B97F4A7C15ULL + i + 1);
            out.push_back(nn::randn<T>({1, 1, convs_[i].res, convs_[i].res}, rng));
        }
        return out;
    }

    NoiseSet<T> random_noise(int batch, std::mt19937_64& rng) const {
        NoiseSet<T> out;
        for (const auto& c : convs_) out.push_back(nn::randn<T>({batch, 1, c.res, c.res}, rng));
        return out;
    }

    // ws [N,L,D] -> image [N,1,R,R] in the training range (about [-1,1]).
    V synthesize(const V& ws, const NoiseSet<T>& noise) const {
        const int L = cfg_.style_layers();
        if (ws.value().rank() != 3 || ws.dim(1) != L || ws.dim(2) != cfg_.latent_dim)
            fail_input("w", "W+ code has shape ", nn::shape_str(ws.shape()), ", expected [N,", std::to_string(L), ",",
                       std::to_string(cfg_.latent_dim), "]");
        if (noise.size() != convs_.size()) fail_input("noise", "wrong number of noise buffers");
        const int N = ws.dim(0);
        nn::Tensor<T> basis({N, const_input_.dim(1), 4, 4});
        for (int n = 0; n < N; ++n)
            std::copy(const_input_.value().data.begin(), const_input_.value().data.end(),
                      basis.data.begin() + static_cast<std::ptrdiff_t>(n) * const_input_.size());
        // Broadcast of the learned basis; gradients flow back through the sum.
        V x = broadcast_const(basis, N);
        V img;
        std::size_t conv = 0;
        for (int s = 0; s < cfg_.stages(); ++s) {
            const int first_row = s == 0 ? 0 : 2 * s - 1;
            const int convs = s == 0 ? 1 : 2;
            for (int c = 0; c < convs; ++c, ++conv) {
                if (c == 0 && s > 0) x = nn::upsample2x(x);
                x = styled_conv(x, nn::select_row(ws, first_row + c), convs_[conv], noise[conv]);
            }
            V rgb = to_image(x, nn::select_row(ws, 2 * s + 1), rgbs_[s]);
            img = img.defined() ? nn::add(nn::upsample2x(img), rgb) : rgb;
        }
        return img;
    }

private:
    static constexpr T kMappingLrMul = T(0.01);

    struct Dense {
        V weight, bias;
    };
    struct StyledConv {
        V affine_w, affine_b, weight, noise_strength, bias;
        int in_ch, out_ch, res;
    };
    struct ToImage {
        V affine_w, affine_b, weight, bias;
        int in_ch;
    };

    StyledConv make_conv(std::mt19937_64& rng, int in_ch, int out_ch, int res, bool /*upsamples*/) {
        const std::string p = "conv" + std::to_string(convs_.size());
        const int D = cfg_.latent_dim;
        StyledConv c;
        c.affine_w = params_.add(p + ".affine.weight", nn::randn<T>({in_ch, D}, rng));
        c.affine_b = params_.add(p + ".affine.bias", nn::Tensor<T>({in_ch}, T(1)));
        c.weight = params_.add(p + ".weight", nn::randn<T>({out_ch, in_ch, 3, 3}, rng));
        c.noise_strength = params_.add(p + ".noise_strength", nn::Tensor<T>({1}));
        c.bias = params_.add(p + ".bias", nn::Tensor<T>({out_ch}));
        c.in_ch = in_ch;
        c.out_ch = out_ch;
        c.res = res;
        return c;
    }

    ToImage make_rgb(std::mt19937_64& rng, int in_ch) {
        const std::string p = "torgb" + std::to_string(rgbs_.size());
        const int D = cfg_.latent_dim;
        ToImage t;
        t.affine_w = params_.add(p + ".affine.weight", nn::randn<T>({in_ch, D}, rng));
        t.affine_b = params_.add(p + ".affine.bias", nn::Tensor<T>({in_ch}, T(1)));
        t.weight = params_.add(p + ".weight", nn::randn<T>({1, in_ch, 1, 1}, rng));
        t.bias = params_.add(p + ".bias", nn::Tensor<T>({1}));
        t.in_ch = in_ch;
        return t;
    }

    V broadcast_const(const nn::Tensor<T>& tiled, int N) const {
        const std::size_t per = const_input_.size();
        return nn::make_result<T>(tiled, {const_input_}, [N, per](nn::Node<T>& self) {
            auto& g = self.parent(0).grad_buffer();
            for (int n = 0; n < N; ++n)
                for (std::size_t i = 0; i < per; ++i) g[i] += self.grad[static_cast<std::size_t>(n) * per + i];
        });
    }

    V styled_conv(const V& x, const V& w, const StyledConv& c, const nn::Tensor<T>& noise) const {
        const T affine_gain = T(1) / std::sqrt(static_cast<T>(cfg_.latent_dim));
        const T weight_gain = T(1) / std::sqrt(static_cast<T>(c.in_ch * 9));
        V s = nn::linear(w, c.affine_w, c.affine_b, affine_gain, T(1));
        V y = nn::conv2d(nn::scale_channels(x, s), c.weight, weight_gain);
        y = nn::scale_channels(y, nn::demodulation(s, c.weight, weight_gain));
        y = nn::add_noise(y, noise, c.noise_strength);
        y = nn::add_channel_bias(y, c.bias);
        return nn::leaky_relu(y);
    }

    V to_image(const V& x, const V& w, const ToImage& t) const {
        const T affine_gain = T(1) / std::sqrt(static_cast<T>(cfg_.latent_dim));
        const T weight_gain = T(1) / std::sqrt(static_cast<T>(t.in_ch));
        V s = nn::linear(w, t.affine_w, t.affine_b, affine_gain * weight_gain, weight_gain);
        V y = nn::conv2d(nn::scale_channels(x, s), t.weight, T(1));
        return nn::add_channel_bias(y, t.bias);
    }

    NetworkConfig cfg_;
    nn::ParamStore<T> params_;
    std::vector<Dense> mapping_;
    V const_input_;
    std::vector<StyledConv> convs_;
    std::vector<ToImage> rgbs_;
    nn::Tensor<T> w_avg_;
};

// Convolutional feature pyramid shared by the discriminator and encoder.
template <class T>
class DownsamplingBackbone {
public:
    using V = nn::Var<T>;

    DownsamplingBackbone(const NetworkConfig& cfg, nn::ParamStore<T>& params, std::mt19937_64& rng,
                         const std::string& prefix)
        : resolution_(cfg.resolution) {
        const int c0 = cfg.channels(cfg.resolution);
        from_image_w_ = params.add(prefix + ".from_image.weight", nn::randn<T>({c0, 1, 1, 1}, rng));
        from_image_b_ = params.add(prefix + ".from_image.bias", nn::Tensor<T>({c0}));
        for (int res = cfg.resolution; res > 4; res /= 2) {
            const int cin = cfg.channels(res), cout = cfg.channels(res / 2);
            const std::string p = prefix + ".block" + std::to_string(res);
            blocks_.push_back({params.add(p + ".conv0.weight", nn::randn<T>({cin, cin, 3, 3}, rng)),
                               params.add(p + ".conv0.bias", nn::Tensor<T>({cin})),
                               params.add(p + ".conv1.weight", nn::randn<T>({cout, cin, 3, 3}, rng)),
                               params.add(p + ".conv1.bias", nn::Tensor<T>({cout})), cin, cout, res});
        }
    }

    // Returns feature maps keyed by spatial resolution, input resolution
    // through 4x4.
    std::map<int, V> forward(const V& img) const {
        if (img.value().rank() != 4 || img.dim(1) != 1 || img.dim(2) != resolution_ || img.dim(3) != resolution_)
            fail_input("image", "image has shape ", nn::shape_str(img.shape()), ", expected [N,1,",
                       std::to_string(resolution_), ",", std::to_string(resolution_), "]");
        std::map<int, V> feats;
        V x = nn::leaky_relu(nn::add_channel_bias(nn::conv2d(img, from_image_w_, T(1)), from_image_b_));
        feats[resolution_] = x;
        for (const auto& b : blocks_) {
            x = nn::leaky_relu(nn::add_channel_bias(nn::conv2d(x, b.w0, gain(b.cin * 9)), b.b0));
            x = nn::leaky_relu(nn::add_channel_bias(nn::conv2d(x, b.w1, gain(b.cin * 9)), b.b1));
            x = nn::avgpool2x(x);
            feats[b.res / 2] = x;
        }
        return feats;
    }

private:
    static T gain(int fan_in) { return T(1) / std::sqrt(static_cast<T>(fan_in)); }

    struct Block {
        V w0, b0, w1, b1;
        int cin, cout, res;
    };
    int resolution_;
    V from_image_w_, from_image_b_;
    std::vector<Block> blocks_;
};

template <class T>
class Discriminator {
public:
    using V = nn::Var<T>;

    Discriminator(NetworkConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), rng_(seed), backbone_(cfg_, params_, rng_, "d") {
        const int c4 = cfg_.channels(4);
        conv_w_ = params_.add("d.out.conv.weight", nn::randn<T>({c4, c4, 3, 3}, rng_));
        conv_b_ = params_.add("d.out.conv.bias", nn::Tensor<T>({c4}));
        fc_w_ = params_.add("d.out.fc.weight", nn::randn<T>({c4, c4 * 16}, rng_));
        fc_b_ = params_.add("d.out.fc.bias", nn::Tensor<T>({c4}));
        logit_w_ = params_.add("d.out.logit.weight", nn::randn<T>({1, c4}, rng_));
        logit_b_ = params_.add("d.out.logit.bias", nn::Tensor<T>({1}));
    }

    nn::ParamStore<T>& params() { return params_; }
    const nn::ParamStore<T>& params() const { return params_; }

    // img [N,1,R,R] -> logits [N,1]. Optionally exposes intermediate features,
    // which double as the fixed feature extractor for perceptual distances.
    V forward(const V& img, std::vector<V>* features = nullptr) const {
        auto feats = backbone_.forward(img);
        const int c4 = cfg_.channels(4);
        V x = feats.at(4);
        x = nn::leaky_relu(nn::add_channel_bias(nn::conv2d(x, conv_w_, gain(c4 * 9)), conv_b_));
        if (features) {
            for (auto it = feats.rbegin(); it != feats.rend(); ++it) features->push_back(it->second);
            features->push_back(x);
        }
        x = nn::reshape(x, {x.dim(0), c4 * 16});
        x = nn::leaky_relu(nn::linear(x, fc_w_, fc_b_, gain(c4 * 16), T(1)));
        return nn::linear(x, logit_w_, logit_b_, gain(c4), T(1));
    }

private:
    static T gain(int fan_in) { return T(1) / std::sqrt(static_cast<T>(fan_in)); }

    NetworkConfig cfg_;
    nn::ParamStore<T> params_;
    std::mt19937_64 rng_;
    DownsamplingBackbone<T> backbone_;
    V conv_w_, conv_b_, fc_w_, fc_b_, logit_w_, logit_b_;
};

// Encoder from an image to a W+ code, predicted as an offset from the
// generator's average w. Coarse rows read the deepest features, middle rows
// the 8x8 level and fine rows the 16x16 level (each pooled to 4x4).
template <class T>
class Encoder {
public:
    using V = nn::Var<T>;

    struct RowGroup {
        int first, count, source_res;
    };

    Encoder(NetworkConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), rng_(seed), backbone_(cfg_, params_, rng_, "e") {
        const int D = cfg_.latent_dim;
        for (const auto& g : row_groups(cfg_)) {
            const int cin = cfg_.channels(g.source_res) * 16;
            const std::string p = "e.head" + std::to_string(heads_.size());
            heads_.push_back({params_.add(p + ".weight", nn::randn<T>({g.count * D, cin}, rng_, T(0.25))),
                              params_.add(p + ".bias", nn::Tensor<T>({g.count * D})), g, cin});
        }
    }

    static std::vector<RowGroup> row_groups(const NetworkConfig& cfg) {
        const int L = cfg.style_layers();
        const int coarse_end = std::max(1, static_cast<int>(std::lround(3.0 * L / 18.0)));
        const int mid_end = std::max(coarse_end + 1, static_cast<int>(std::lround(7.0 * L / 18.0)));
        std::vector<RowGroup> groups{{0, coarse_end, 4}, {coarse_end, mid_end - coarse_end, std::min(8, cfg.resolution)}};
        if (mid_end < L) groups.push_back({mid_end, L - mid_end, std::min(16, cfg.resolution)});
        return groups;
    }

    nn::ParamStore<T>& params() { return params_; }
    const nn::ParamStore<T>& params() const { return params_; }

    // img [N,1,R,R] -> ws [N,L,D]
    V forward(const V& img, const nn::Tensor<T>& w_avg) const {
        const int D = cfg_.latent_dim, L = cfg_.style_layers();
        auto feats = backbone_.forward(img);
        const int N = img.dim(0);
        std::vector<V> rows(L);
        for (const auto& h : heads_) {
            V f = feats.at(h.group.source_res);
            while (f.dim(2) > 4) f = nn::avgpool2x(f);
            f = nn::reshape(f, {N, h.in_features});
            V out = nn::linear(f, h.weight, h.bias, T(1) / std::sqrt(static_cast<T>(h.in_features)), T(1));
            for (int r = 0; r < h.group.count; ++r) rows[h.group.first + r] = slice_cols(out, r * D, D);
        }
        V delta = nn::stack_rows(rows);
        nn::Tensor<T> base({N, L, D});
        for (int n = 0; n < N; ++n)
            for (int l = 0; l < L; ++l)
                std::copy(w_avg.data.begin(), w_avg.data.end(), base.data.begin() + (static_cast<std::ptrdiff_t>(n) * L + l) * D);
        return nn::add(delta, V(std::move(base)));
    }

private:
    struct Head {
        V weight, bias;
        RowGroup group;
        int in_features;
    };

    static V slice_cols(const V& x, int begin, int count) {
        const int N = x.dim(0), W = x.dim(1);
        nn::Tensor<T> out({N, count});
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < count; ++c) out[n * count + c] = x.value()[n * W + begin + c];
        return nn::make_result<T>(std::move(out), {x}, [N, W, begin, count](nn::Node<T>& self) {
            auto& g = self.parent(0).grad_buffer();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < count; ++c) g[n * W + begin + c] += self.grad[n * count + c];
        });
    }

    NetworkConfig cfg_;
    nn::ParamStore<T> params_;
    std::mt19937_64 rng_;
    DownsamplingBackbone<T> backbone_;
    std::vector<Head> heads_;
};

}  // namespace styledem
