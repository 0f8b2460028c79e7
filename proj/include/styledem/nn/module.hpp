#pragma once

#include <cmath>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "styledem/nn/autograd.hpp"

namespace styledem::nn {

// Ordered set of named trainable tensors owned by one network.
template <class T>
class ParamStore {
public:
    Var<T> add(std::string name, Tensor<T> init) {
        if (index_.count(name)) throw std::logic_error("duplicate parameter " + name);
        Var<T> v(std::move(init), true);
        index_[name] = params_.size();
        params_.emplace_back(std::move(name), v);
        return v;
    }

    const std::vector<std::pair<std::string, Var<T>>>& items() const { return params_; }

    std::vector<Var<T>> vars() const {
        std::vector<Var<T>> out;
        out.reserve(params_.size());
        for (const auto& [_, v] : params_) out.push_back(v);
        return out;
    }

    Var<T> get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no parameter " + name);
        return params_[it->second].second;
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& [_, v] : params_) n += v.size();
        return n;
    }

    void zero_grad() {
        for (auto& [_, v] : params_) v.zero_grad();
    }

    void set_requires_grad(bool r) {
        for (auto& [_, v] : params_) v.set_requires_grad(r);
    }

    // Copies values from another store with identical layout.
    void copy_from(const ParamStore& other) {
        if (other.params_.size() != params_.size()) throw std::logic_error("copy_from: layout mismatch");
        for (std::size_t i = 0; i < params_.size(); ++i) params_[i].second.mutable_value() = other.params_[i].second.value();
    }

    std::map<std::string, Tensor<T>> state() const {
        std::map<std::string, Tensor<T>> out;
        for (const auto& [name, v] : params_) out[name] = v.value();
        return out;
    }

    void load_state(const std::map<std::string, Tensor<T>>& state) {
        for (auto& [name, v] : params_) {
            auto it = state.find(name);
            if (it == state.end()) throw std::runtime_error("missing tensor " + name);
            if (it->second.shape != v.shape())
                throw std::runtime_error("tensor " + name + " has shape " + shape_str(it->second.shape) +
                                         ", expected " + shape_str(v.shape()));
            v.mutable_value() = it->second;
        }
    }

private:
    std::vector<std::pair<std::string, Var<T>>> params_;
    std::map<std::string, std::size_t> index_;
};

template <class T>
Tensor<T> randn(const Shape& shape, std::mt19937_64& rng, T stddev = T(1)) {
    std::normal_distribution<double> dist(0.0, 1.0);
    Tensor<T> t(shape);
    for (auto& v : t.data) v = static_cast<T>(dist(rng)) * stddev;
    return t;
}

// Adam with bias correction.
template <class T>
class Adam {
public:
    Adam(std::vector<Var<T>> params, double lr, double beta1 = 0.0, double beta2 = 0.99, double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (const auto& p : params_) {
            m_.emplace_back(p.size(), 0.0);
            v_.emplace_back(p.size(), 0.0);
        }
    }

    void step() {
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto& p = params_[k];
            if (!p.has_grad()) continue;
            auto& value = p.mutable_value();
            const auto& grad = p.grad();
            auto& m = m_[k];
            auto& v = v_[k];
            for (std::size_t i = 0; i < value.size(); ++i) {
                const double g = static_cast<double>(grad[i]);
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
                const double mh = m[i] / c1;
                const double vh = v[i] / c2;
                value[i] -= static_cast<T>(lr_ * mh / (std::sqrt(vh) + eps_));
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }

private:
    std::vector<Var<T>> params_;
    std::vector<std::vector<double>> m_, v_;
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
};

}  // namespace styledem::nn
