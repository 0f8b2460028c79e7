#pragma once

// Reader/writer for the safetensors container: an 8-byte little-endian header
// length, a JSON header mapping tensor names to {dtype, shape, data_offsets},
// then the raw little-endian payload. Only F32 is produced or accepted.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "styledem/error.hpp"
#include "styledem/nn/tensor.hpp"

namespace styledem::nn {

static_assert(std::endian::native == std::endian::little, "tensor files assume a little-endian host");

inline std::string encode_safetensors(const std::map<std::string, Tensor<float>>& tensors,
                                      const std::map<std::string, std::string>& metadata = {}) {
    nlohmann::json header = nlohmann::json::object();
    std::size_t offset = 0;
    for (const auto& [name, t] : tensors) {
        const std::size_t bytes = t.size() * sizeof(float);
        header[name] = {{"dtype", "F32"}, {"shape", t.shape}, {"data_offsets", {offset, offset + bytes}}};
        offset += bytes;
    }
    if (!metadata.empty()) header["__metadata__"] = metadata;
    std::string head = header.dump();
    // Pad so the payload starts 8-byte aligned.
    while ((head.size() + 8) % 8 != 0) head.push_back(' ');
    std::string out(8, '\0');
    const std::uint64_t n = head.size();
    std::memcpy(out.data(), &n, 8);
    out += head;
    out.reserve(out.size() + offset);
    for (const auto& [_, t] : tensors)
        out.append(reinterpret_cast<const char*>(t.ptr()), t.size() * sizeof(float));
    return out;
}

inline std::map<std::string, Tensor<float>> decode_safetensors(const std::string& bytes,
                                                               std::map<std::string, std::string>* metadata = nullptr) {
    if (bytes.size() < 8) throw IoError("safetensors: truncated header");
    std::uint64_t n = 0;
    std::memcpy(&n, bytes.data(), 8);
    if (n > bytes.size() - 8) throw IoError("safetensors: header length exceeds file size");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(n));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("safetensors: bad header: ") + e.what());
    }
    const std::size_t base = 8 + n;
    std::map<std::string, Tensor<float>> out;
    for (auto it = header.begin(); it != header.end(); ++it) {
        if (it.key() == "__metadata__") {
            if (metadata)
                for (auto m = it.value().begin(); m != it.value().end(); ++m) (*metadata)[m.key()] = m.value().get<std::string>();
            continue;
        }
        const auto& e = it.value();
        if (e.at("dtype").get<std::string>() != "F32") throw IoError("safetensors: unsupported dtype for " + it.key());
        Shape shape = e.at("shape").get<Shape>();
        const auto begin = e.at("data_offsets")[0].get<std::size_t>();
        const auto end = e.at("data_offsets")[1].get<std::size_t>();
        if (end < begin || base + end > bytes.size() || end - begin != numel(shape) * sizeof(float))
            throw IoError("safetensors: bad offsets for " + it.key());
        Tensor<float> t(shape);
        std::memcpy(t.ptr(), bytes.data() + base + begin, end - begin);
        out.emplace(it.key(), std::move(t));
    }
    return out;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + path.string());
}

}  // namespace styledem::nn
