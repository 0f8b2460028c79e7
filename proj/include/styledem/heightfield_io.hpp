#pragma once

// Heightfield files: a 16-bit grayscale PNG holding round(65535 * v) for the
// normalized value v, next to a JSON sidecar (same stem, ".json") carrying
// {"min_m", "max_m", "cell_size_m"}. PNG stores 16-bit samples big-endian on
// disk; buffers in memory are native (little-endian) uint16.

#include <png.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "styledem/error.hpp"
#include "styledem/heightfield.hpp"

namespace styledem {

struct Sidecar {
    double min_m = 0.0;
    double max_m = 1000.0;
    double cell_size_m = 30.0;
};

inline constexpr double kQuantum = 1.0 / 65535.0;

inline std::vector<std::uint16_t> quantize(const NormalizedField& n) {
    std::vector<std::uint16_t> q(n.grid.size());
    for (std::size_t i = 0; i < q.size(); ++i)
        q[i] = static_cast<std::uint16_t>(std::lround(std::clamp(n.grid.values[i], 0.0, 1.0) * 65535.0));
    return q;
}

namespace detail {

inline void png_write_to_string(png_structp png, png_bytep data, png_size_t length) {
    auto* out = static_cast<std::string*>(png_get_io_ptr(png));
    out->append(reinterpret_cast<const char*>(data), length);
}

inline void png_flush_noop(png_structp) {}

struct PngReadState {
    const std::string* bytes;
    std::size_t pos;
};

inline void png_read_from_string(png_structp png, png_bytep data, png_size_t length) {
    auto* st = static_cast<PngReadState*>(png_get_io_ptr(png));
    if (st->pos + length > st->bytes->size()) png_error(png, "truncated PNG stream");
    std::memcpy(data, st->bytes->data() + st->pos, length);
    st->pos += length;
}

inline void png_error_throw(png_structp, png_const_charp msg) { throw IoError(std::string("png: ") + msg); }
inline void png_warning_ignore(png_structp, png_const_charp) {}

}  // namespace detail

// Encodes a grayscale image; bit_depth is 8 or 16.
inline std::string encode_png_gray(int width, int height, const std::vector<std::uint16_t>& samples, int bit_depth = 16) {
    if (samples.size() != static_cast<std::size_t>(width) * height) throw IoError("png: sample count mismatch");
    std::string out;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_error_throw, detail::png_warning_ignore);
    if (!png) throw IoError("png: cannot create write struct");
    png_infop info = png_create_info_struct(png);
    try {
        png_set_write_fn(png, &out, detail::png_write_to_string, detail::png_flush_noop);
        png_set_IHDR(png, info, width, height, bit_depth, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                     PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
        png_write_info(png, info);
        if (bit_depth == 16) {
            png_set_swap(png);
            std::vector<std::uint16_t> row(width);
            for (int y = 0; y < height; ++y) {
                std::copy_n(samples.begin() + static_cast<std::ptrdiff_t>(y) * width, width, row.begin());
                png_write_row(png, reinterpret_cast<png_bytep>(row.data()));
            }
        } else {
            std::vector<std::uint8_t> row(width);
            for (int y = 0; y < height; ++y) {
                for (int x = 0; x < width; ++x)
                    row[x] = static_cast<std::uint8_t>(std::min<std::uint16_t>(samples[static_cast<std::size_t>(y) * width + x], 255));
                png_write_row(png, row.data());
            }
        }
        png_write_end(png, nullptr);
    } catch (...) {
        png_destroy_write_struct(&png, &info);
        throw;
    }
    png_destroy_write_struct(&png, &info);
    return out;
}

struct GrayImage {
    int width = 0;
    int height = 0;
    int bit_depth = 16;
    std::vector<std::uint16_t> samples;
};

// Decodes a single-channel PNG. 8-bit input is widened to 16 bits.
inline GrayImage decode_png_gray(const std::string& bytes) {
    if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0)
        throw IoError("png: not a PNG stream");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_error_throw, detail::png_warning_ignore);
    if (!png) throw IoError("png: cannot create read struct");
    png_infop info = png_create_info_struct(png);
    GrayImage img;
    detail::PngReadState st{&bytes, 0};
    try {
        png_set_read_fn(png, &st, detail::png_read_from_string);
        png_read_info(png, info);
        img.width = static_cast<int>(png_get_image_width(png, info));
        img.height = static_cast<int>(png_get_image_height(png, info));
        img.bit_depth = png_get_bit_depth(png, info);
        const int color = png_get_color_type(png, info);
        if (color != PNG_COLOR_TYPE_GRAY) throw IoError("png: heightfields must be single-channel grayscale");
        if (img.bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
        if (img.bit_depth == 16) png_set_swap(png);
        png_read_update_info(png, info);
        img.samples.resize(static_cast<std::size_t>(img.width) * img.height);
        if (img.bit_depth == 16) {
            std::vector<std::uint16_t> row(img.width);
            for (int y = 0; y < img.height; ++y) {
                png_read_row(png, reinterpret_cast<png_bytep>(row.data()), nullptr);
                std::copy(row.begin(), row.end(), img.samples.begin() + static_cast<std::ptrdiff_t>(y) * img.width);
            }
        } else {
            std::vector<std::uint8_t> row(img.width);
            for (int y = 0; y < img.height; ++y) {
                png_read_row(png, row.data(), nullptr);
                for (int x = 0; x < img.width; ++x)
                    img.samples[static_cast<std::size_t>(y) * img.width + x] = static_cast<std::uint16_t>(row[x] * 257);
            }
            img.bit_depth = 8;
        }
    } catch (...) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& png_path) {
    auto p = png_path;
    return p.replace_extension(".json");
}

inline nlohmann::json sidecar_json(const Sidecar& s) {
    return {{"min_m", s.min_m}, {"max_m", s.max_m}, {"cell_size_m", s.cell_size_m}};
}

inline Sidecar sidecar_from_json(const nlohmann::json& j) {
    Sidecar s;
    s.min_m = j.at("min_m").get<double>();
    s.max_m = j.at("max_m").get<double>();
    s.cell_size_m = j.at("cell_size_m").get<double>();
    if (!(s.min_m <= s.max_m) || !(s.cell_size_m > 0)) throw IoError("sidecar: invalid range or cell size");
    return s;
}

// In-memory encoding: PNG bytes plus sidecar metadata.
inline std::pair<std::string, Sidecar> encode_heightfield(const Heightfield& h) {
    const NormalizedField n = normalize(h);
    return {encode_png_gray(n.width(), n.height(), quantize(n)), Sidecar{n.min_m, n.max_m, h.cell_size}};
}

inline Heightfield decode_heightfield(const std::string& png_bytes, const Sidecar& meta) {
    const GrayImage img = decode_png_gray(png_bytes);
    NormalizedField n;
    n.grid = Grid<double>(img.width, img.height);
    for (std::size_t i = 0; i < img.samples.size(); ++i) n.grid.values[i] = img.samples[i] / 65535.0;
    n.min_m = meta.min_m;
    n.max_m = meta.max_m;
    return denormalize(n, meta.cell_size_m);
}

inline void save_heightfield(const Heightfield& h, const std::filesystem::path& png_path) {
    auto [bytes, meta] = encode_heightfield(h);
    std::ofstream png(png_path, std::ios::binary | std::ios::trunc);
    if (!png) throw IoError("cannot write " + png_path.string());
    png.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    std::ofstream side(sidecar_path(png_path), std::ios::trunc);
    if (!side) throw IoError("cannot write " + sidecar_path(png_path).string());
    side << sidecar_json(meta).dump(2) << "\n";
}

// Loads PNG + sidecar. A missing sidecar falls back to 0..1000 m at 30 m cells
// and logs a warning on stderr.
inline Heightfield load_heightfield(const std::filesystem::path& png_path) {
    std::ifstream png(png_path, std::ios::binary);
    if (!png) throw IoError("cannot open " + png_path.string());
    std::string bytes{std::istreambuf_iterator<char>(png), std::istreambuf_iterator<char>()};
    Sidecar meta;
    const auto side = sidecar_path(png_path);
    if (std::filesystem::exists(side)) {
        std::ifstream in(side);
        try {
            meta = sidecar_from_json(nlohmann::json::parse(in));
        } catch (const nlohmann::json::exception& e) {
            throw IoError("bad sidecar " + side.string() + ": " + e.what());
        }
    } else {
        std::cerr << "warning: no sidecar for " << png_path.string()
                  << ", assuming min_m=0 max_m=1000 cell_size_m=30\n";
    }
    return decode_heightfield(bytes, meta);
}

}  // namespace styledem
