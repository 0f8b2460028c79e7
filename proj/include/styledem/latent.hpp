#pragma once

// Latent codes. Files hold one JSON header line {"L","D","bundle_version"}
// followed by L*D little-endian float32 values, row-major.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "styledem/error.hpp"

namespace styledem {

struct LatentZ {
    std::vector<float> values;
    int dim() const noexcept { return static_cast<int>(values.size()); }
};

struct LatentW {
    std::vector<float> values;
    int dim() const noexcept { return static_cast<int>(values.size()); }
};

// One style vector per injection point, ordered coarse to fine.
class LatentWPlus {
public:
    LatentWPlus() = default;
    LatentWPlus(int layers, int dim, float fill = 0.0f)
        : layers_(layers), dim_(dim), values_(static_cast<std::size_t>(layers) * dim, fill) {
        if (layers < 1 || dim < 1) fail_input("latent", "latent needs L >= 1 and D >= 1");
    }
    LatentWPlus(int layers, int dim, std::vector<float> values) : layers_(layers), dim_(dim), values_(std::move(values)) {
        if (layers < 1 || dim < 1 || values_.size() != static_cast<std::size_t>(layers) * dim)
            fail_input("latent", "latent payload does not match L x D");
    }

    static LatentWPlus broadcast(const LatentW& w, int layers) {
        LatentWPlus out(layers, w.dim());
        for (int l = 0; l < layers; ++l) std::copy(w.values.begin(), w.values.end(), out.row(l).begin());
        return out;
    }

    int layers() const noexcept { return layers_; }
    int dim() const noexcept { return dim_; }
    std::span<float> row(int l) { return {values_.data() + static_cast<std::size_t>(l) * dim_, static_cast<std::size_t>(dim_)}; }
    std::span<const float> row(int l) const {
        return {values_.data() + static_cast<std::size_t>(l) * dim_, static_cast<std::size_t>(dim_)};
    }
    const std::vector<float>& values() const noexcept { return values_; }
    std::vector<float>& values() noexcept { return values_; }
    bool same_shape(const LatentWPlus& o) const noexcept { return layers_ == o.layers_ && dim_ == o.dim_; }

    bool finite() const {
        return std::all_of(values_.begin(), values_.end(), [](float v) { return std::isfinite(v); });
    }

    bool operator==(const LatentWPlus& o) const {
        return layers_ == o.layers_ && dim_ == o.dim_ &&
               std::memcmp(values_.data(), o.values_.data(), values_.size() * sizeof(float)) == 0;
    }

private:
    int layers_ = 0;
    int dim_ = 0;
    std::vector<float> values_;
};

inline std::string encode_latent(const LatentWPlus& w, const std::string& bundle_version) {
    static_assert(std::endian::native == std::endian::little, "latent files assume a little-endian host");
    nlohmann::json header = {{"L", w.layers()}, {"D", w.dim()}, {"bundle_version", bundle_version}};
    std::string out = header.dump() + "\n";
    out.append(reinterpret_cast<const char*>(w.values().data()), w.values().size() * sizeof(float));
    return out;
}

struct LatentFile {
    LatentWPlus latent;
    std::string bundle_version;
};

inline LatentFile decode_latent(const std::string& bytes) {
    const auto nl = bytes.find('\n');
    if (nl == std::string::npos) throw IoError("latent: missing header line");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(0, nl));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("latent: bad header: ") + e.what());
    }
    const int L = header.at("L").get<int>();
    const int D = header.at("D").get<int>();
    const std::size_t payload = static_cast<std::size_t>(L) * D * sizeof(float);
    if (L < 1 || D < 1 || bytes.size() - nl - 1 != payload) throw IoError("latent: payload size does not match header");
    std::vector<float> values(static_cast<std::size_t>(L) * D);
    std::memcpy(values.data(), bytes.data() + nl + 1, payload);
    return {LatentWPlus(L, D, std::move(values)), header.value("bundle_version", std::string{})};
}

inline void save_latent(const LatentWPlus& w, const std::string& bundle_version, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    const std::string bytes = encode_latent(w, bundle_version);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline LatentFile load_latent(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return decode_latent({std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()});
}

}  // namespace styledem
