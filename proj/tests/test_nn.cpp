#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "styledem/networks.hpp"
#include "styledem/nn/ops.hpp"
#include "styledem/nn/safetensors.hpp"

using namespace styledem;
using namespace styledem::nn;

namespace {

using Vd = Var<double>;

Tensor<double> random_tensor(const Shape& s, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return randn<double>(s, rng);
}

// Central-difference check of d(loss)/d(input) for a scalar-valued function.
void check_gradient(const std::function<Vd(const std::vector<Vd>&)>& f, std::vector<Tensor<double>> inputs,
                    double tol = 1e-6) {
    std::vector<Vd> vars;
    for (auto& t : inputs) vars.emplace_back(t, true);
    Vd loss = f(vars);
    backward(loss);
    for (std::size_t k = 0; k < vars.size(); ++k) {
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
            const double h = 1e-6;
            auto eval = [&](double delta) {
                std::vector<Vd> v;
                for (std::size_t j = 0; j < inputs.size(); ++j) {
                    Tensor<double> t = inputs[j];
                    if (j == k) t[i] += delta;
                    v.emplace_back(t, false);
                }
                return f(v).value()[0];
            };
            const double numeric = (eval(h) - eval(-h)) / (2 * h);
            EXPECT_NEAR(vars[k].grad()[i], numeric, tol * std::max(1.0, std::abs(numeric))) << "input " << k << " index " << i;
        }
    }
}

// Weighted sum so that every output element has a distinct sensitivity.
Vd probe(const Vd& x) {
    Tensor<double> w(x.shape());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(0.7 * static_cast<double>(i) + 0.3);
    Vd prod = make_result<double>(
        [&] {
            Tensor<double> out({1});
            for (std::size_t i = 0; i < w.size(); ++i) out[0] += w[i] * x.value()[i];
            return out;
        }(),
        {x}, [w](Node<double>& self) {
            auto& g = self.parent(0).grad_buffer();
            for (std::size_t i = 0; i < w.size(); ++i) g[i] += w[i] * self.grad[0];
        });
    return prod;
}

}  // namespace

TEST(Ops, Conv2dGradient) {
    check_gradient([](const auto& v) { return probe(conv2d(v[0], v[1], 0.3)); },
                   {random_tensor({2, 3, 5, 5}, 1), random_tensor({4, 3, 3, 3}, 2)});
}

TEST(Ops, DemodulationGradient) {
    check_gradient([](const auto& v) { return probe(demodulation(v[0], v[1], 0.5)); },
                   {random_tensor({2, 3}, 3), random_tensor({4, 3, 3, 3}, 4)});
}

TEST(Ops, ScaleChannelsGradient) {
    check_gradient([](const auto& v) { return probe(scale_channels(v[0], v[1])); },
                   {random_tensor({2, 3, 4, 4}, 5), random_tensor({2, 3}, 6)});
}

TEST(Ops, UpsampleAndPoolGradient) {
    check_gradient([](const auto& v) { return probe(avgpool2x(upsample2x(v[0]))); }, {random_tensor({1, 2, 4, 4}, 7)});
}

TEST(Ops, LinearPixelNormLeakyGradient) {
    check_gradient([](const auto& v) { return probe(leaky_relu(linear(pixel_norm(v[0]), v[1], v[2], 0.4, 1.0))); },
                   {random_tensor({3, 5}, 8), random_tensor({4, 5}, 9), random_tensor({4}, 10)});
}

TEST(Ops, SoftplusAndMseGradient) {
    check_gradient([](const auto& v) { return add(softplus_mean(v[0], 1.0), mse(v[0], v[1])); },
                   {random_tensor({4, 1}, 11), random_tensor({4, 1}, 12)});
}

TEST(Ops, NoGradGuardSkipsHistory) {
    Vd x(random_tensor({2, 2}, 1), true);
    NoGradGuard g;
    EXPECT_FALSE(scale(x, 2.0).requires_grad());
}

// End-to-end: generator into discriminator at R=8 in double precision; ten
// parameters spread over both networks against central differences.
TEST(Networks, EndToEndGradientCheck) {
    NetworkConfig cfg;
    cfg.resolution = 8;
    cfg.latent_dim = 8;
    cfg.mapping_layers = 2;
    cfg.channel_base = 32;
    cfg.channel_max = 4;
    Generator<double> G(cfg, 1);
    Discriminator<double> D(cfg, 2);
    const auto noise = G.frozen_noise(3);
    const Tensor<double> z = random_tensor({2, cfg.latent_dim}, 4);
    auto loss_fn = [&] {
        Vd w = G.map(Vd(z));
        std::vector<Vd> rows(cfg.style_layers(), w);
        Vd img = G.synthesize(stack_rows(rows), noise);
        return softplus_mean(D.forward(img), -1.0);
    };
    Vd loss = loss_fn();
    backward(loss);

    std::vector<std::pair<Vd, std::size_t>> picks;
    std::mt19937_64 rng(5);
    auto pick_from = [&](ParamStore<double>& store, int n) {
        const auto& items = store.items();
        for (int k = 0; k < n; ++k) {
            const auto& v = items[(k * 7 + 3) % items.size()].second;
            picks.emplace_back(v, rng() % v.size());
        }
    };
    pick_from(G.params(), 6);
    pick_from(D.params(), 4);
    ASSERT_EQ(picks.size(), 10u);
    for (auto& [var, i] : picks) {
        Vd v = var;
        const double analytic = v.has_grad() ? v.grad()[i] : 0.0;
        const double orig = v.value()[i];
        const double h = 1e-5;
        v.mutable_value()[i] = orig + h;
        const double up = loss_fn().value()[0];
        v.mutable_value()[i] = orig - h;
        const double down = loss_fn().value()[0];
        v.mutable_value()[i] = orig;
        const double numeric = (up - down) / (2 * h);
        EXPECT_NEAR(analytic, numeric, 1e-3 * std::max(1.0, std::abs(numeric)));
    }
}

TEST(Safetensors, RoundTrip) {
    std::map<std::string, Tensor<float>> m;
    m["a"] = Tensor<float>({2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6.5f});
    m["b.c"] = Tensor<float>({1}, std::vector<float>{-0.25f});
    const auto bytes = encode_safetensors(m);
    const auto back = decode_safetensors(bytes);
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back.at("a").shape, (Shape{2, 3}));
    EXPECT_EQ(back.at("a").data, m["a"].data);
    EXPECT_EQ(back.at("b.c").data, m["b.c"].data);
}
