#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <png.h>

#include "zeroloc/config.hpp"
#include "zeroloc/errors.hpp"

namespace zeroloc {

// Interleaved 8-bit RGB.
struct ImageU8 {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<unsigned char> rgb;
};

// Planar CHW f32, 3 channels.
struct ImageTensor {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> data;

    float& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
    float at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * height + y) * width + x]; }
};

// Row-major score grid in [0,1].
struct AnomalyMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> values;

    float& at(std::size_t y, std::size_t x) { return values[y * width + x]; }
    float at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

namespace detail {

struct PngReadState {
    const unsigned char* data;
    std::size_t size;
    std::size_t pos;
};

inline void png_mem_read(png_structp png, png_bytep out, png_size_t n) {
    auto* st = static_cast<PngReadState*>(png_get_io_ptr(png));
    if (st->pos + n > st->size) {
        png_error(png, "read past end of buffer");
    }
    std::memcpy(out, st->data + st->pos, n);
    st->pos += n;
}

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw_io("cannot open '", path, "' for reading");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (f.bad()) throw_io("failed reading '", path, "'");
    return bytes;
}

}  // namespace detail

inline ImageU8 decode_png(const std::vector<unsigned char>& bytes, const std::string& path) {
    if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) {
        throw_input("'", path, "' is not a PNG file");
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw_io("libpng initialization failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw_io("libpng initialization failed");
    }

    ImageU8 img;
    std::vector<png_bytep> row_ptrs;
    detail::PngReadState state{bytes.data(), bytes.size(), 0};

    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw_input("'", path, "' is not decodable as PNG");
    }

    png_set_read_fn(png, &state, detail::png_mem_read);
    png_read_info(png, info);

    const png_byte color = png_get_color_type(png, info);
    const png_byte depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    img.height = png_get_image_height(png, info);
    img.width = png_get_image_width(png, info);
    if (png_get_rowbytes(png, info) != img.width * 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw_input("'", path, "': unsupported PNG layout after RGB expansion");
    }
    img.rgb.resize(img.height * img.width * 3);
    row_ptrs.resize(img.height);
    for (std::size_t y = 0; y < img.height; ++y) row_ptrs[y] = img.rgb.data() + y * img.width * 3;
    png_read_image(png, row_ptrs.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

// Binary PPM (P6) and PGM (P5), maxval up to 255. PGM expands to gray RGB.
inline ImageU8 decode_pnm(const std::vector<unsigned char>& bytes, const std::string& path) {
    std::size_t pos = 0;
    auto next_token = [&]() -> std::string {
        while (pos < bytes.size()) {
            unsigned char c = bytes[pos];
            if (c == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(c)) {
                ++pos;
            } else {
                break;
            }
        }
        std::string tok;
        while (pos < bytes.size() && !std::isspace(bytes[pos]) && bytes[pos] != '#') {
            tok.push_back(static_cast<char>(bytes[pos++]));
        }
        if (tok.empty()) throw_input("'", path, "': truncated PNM header");
        return tok;
    };

    auto next_number = [&]() -> long {
        const std::string tok = next_token();
        long v = 0;
        for (char c : tok) {
            if (c < '0' || c > '9') throw_input("'", path, "': non-numeric PNM header field '", tok, "'");
            v = v * 10 + (c - '0');
            if (v > 1'000'000'000) throw_input("'", path, "': PNM header field out of range");
        }
        return v;
    };

    const std::string magic = next_token();
    if (magic != "P6" && magic != "P5") {
        throw_input("'", path, "': unsupported PNM magic '", magic, "' (P5/P6 only)");
    }
    const long w = next_number();
    const long h = next_number();
    const long maxval = next_number();
    if (w <= 0 || h <= 0) throw_input("'", path, "': bad PNM dimensions");
    if (maxval <= 0 || maxval > 255) throw_input("'", path, "': PNM maxval ", maxval, " unsupported (<=255)");
    if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw_input("'", path, "': bad PNM header");
    ++pos;  // single whitespace after maxval

    ImageU8 img;
    img.height = static_cast<std::size_t>(h);
    img.width = static_cast<std::size_t>(w);
    const std::size_t ch = magic == "P6" ? 3 : 1;
    const std::size_t need = img.height * img.width * ch;
    if (bytes.size() - pos < need) throw_input("'", path, "': PNM pixel data truncated");
    img.rgb.resize(img.height * img.width * 3);
    for (std::size_t i = 0; i < img.height * img.width; ++i) {
        for (std::size_t c = 0; c < 3; ++c) {
            const unsigned char v = bytes[pos + i * ch + (ch == 3 ? c : 0)];
            img.rgb[i * 3 + c] =
                maxval == 255 ? v : static_cast<unsigned char>((v * 255L + maxval / 2) / maxval);
        }
    }
    return img;
}

inline ImageU8 load_image(const std::string& path) {
    const std::vector<unsigned char> bytes = detail::read_file_bytes(path);
    if (bytes.size() >= 8 && png_sig_cmp(bytes.data(), 0, 8) == 0) return decode_png(bytes, path);
    if (bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '5' || bytes[1] == '6')) {
        return decode_pnm(bytes, path);
    }
    throw_input("'", path, "' is neither PNG nor binary PNM");
}

namespace detail {

// Catmull-Rom weights (bicubic, a = -0.5) for the four taps around frac.
inline void catmull_rom_weights(double frac, double w[4]) {
    constexpr double a = -0.5;
    const double t0 = 1.0 + frac, t1 = frac, t2 = 1.0 - frac, t3 = 2.0 - frac;
    w[0] = ((a * t0 - 5.0 * a) * t0 + 8.0 * a) * t0 - 4.0 * a;
    w[1] = ((a + 2.0) * t1 - (a + 3.0)) * t1 * t1 + 1.0;
    w[2] = ((a + 2.0) * t2 - (a + 3.0)) * t2 * t2 + 1.0;
    w[3] = ((a * t3 - 5.0 * a) * t3 + 8.0 * a) * t3 - 4.0 * a;
}

}  // namespace detail

// Separable Catmull-Rom resize of one plane; source sampled at
// (dst + 0.5) * src/dst - 0.5 with clamped borders. Exact identity when the
// sizes match. Horizontal pass first, then vertical.
inline std::vector<float> bicubic_resize_plane(const std::vector<float>& src, std::size_t sh, std::size_t sw,
                                               std::size_t dh, std::size_t dw) {
    if (src.size() != sh * sw) throw_shape("bicubic_resize_plane: plane size does not match dimensions");
    if (sh == 0 || sw == 0 || dh == 0 || dw == 0) throw_shape("bicubic_resize_plane: empty plane");

    auto clamp_idx = [](long i, std::size_t n) {
        return static_cast<std::size_t>(std::clamp<long>(i, 0, static_cast<long>(n) - 1));
    };

    std::vector<float> mid(sh * dw);
    {
        const double ratio = static_cast<double>(sw) / static_cast<double>(dw);
        for (std::size_t x = 0; x < dw; ++x) {
            const double sx = (static_cast<double>(x) + 0.5) * ratio - 0.5;
            const double base = std::floor(sx);
            double w[4];
            detail::catmull_rom_weights(sx - base, w);
            const long b = static_cast<long>(base);
            const std::size_t i0 = clamp_idx(b - 1, sw), i1 = clamp_idx(b, sw), i2 = clamp_idx(b + 1, sw),
                              i3 = clamp_idx(b + 2, sw);
            for (std::size_t y = 0; y < sh; ++y) {
                const float* row = &src[y * sw];
                mid[y * dw + x] = static_cast<float>(w[0] * row[i0] + w[1] * row[i1] + w[2] * row[i2] +
                                                     w[3] * row[i3]);
            }
        }
    }

    std::vector<float> out(dh * dw);
    {
        const double ratio = static_cast<double>(sh) / static_cast<double>(dh);
        for (std::size_t y = 0; y < dh; ++y) {
            const double sy = (static_cast<double>(y) + 0.5) * ratio - 0.5;
            const double base = std::floor(sy);
            double w[4];
            detail::catmull_rom_weights(sy - base, w);
            const long b = static_cast<long>(base);
            const std::size_t i0 = clamp_idx(b - 1, sh), i1 = clamp_idx(b, sh), i2 = clamp_idx(b + 1, sh),
                              i3 = clamp_idx(b + 2, sh);
            for (std::size_t x = 0; x < dw; ++x) {
                out[y * dw + x] = static_cast<float>(w[0] * mid[i0 * dw + x] + w[1] * mid[i1 * dw + x] +
                                                     w[2] * mid[i2 * dw + x] + w[3] * mid[i3 * dw + x]);
            }
        }
    }
    return out;
}

// Decoded image -> model input: per-channel bicubic resize to image_size²,
// scale to [0,1], then (x - mean) / std.
inline ImageTensor preprocess(const ImageU8& img, const ModelConfig& cfg) {
    if (img.height == 0 || img.width == 0 || img.rgb.size() != img.height * img.width * 3) {
        throw_input("preprocess: empty or malformed image");
    }
    const std::size_t s = cfg.image_size;
    ImageTensor out;
    out.height = s;
    out.width = s;
    out.data.resize(3 * s * s);

    std::vector<float> plane(img.height * img.width);
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < img.height * img.width; ++i) {
            plane[i] = static_cast<float>(img.rgb[i * 3 + c]);
        }
        std::vector<float> resized = bicubic_resize_plane(plane, img.height, img.width, s, s);
        const float mean = cfg.mean[c], inv_std = 1.0f / cfg.stddev[c];
        for (std::size_t i = 0; i < s * s; ++i) {
            out.data[c * s * s + i] = (resized[i] * (1.0f / 255.0f) - mean) * inv_std;
        }
    }
    return out;
}

inline ImageTensor preprocess_file(const std::string& path, const ModelConfig& cfg) {
    return preprocess(load_image(path), cfg);
}

// Ground-truth mask: any pixel with first channel >= 128 counts as anomalous.
inline std::vector<std::uint8_t> load_mask(const std::string& path, std::size_t* height, std::size_t* width) {
    const ImageU8 img = load_image(path);
    std::vector<std::uint8_t> mask(img.height * img.width);
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = img.rgb[i * 3] >= 128 ? 1 : 0;
    if (height) *height = img.height;
    if (width) *width = img.width;
    return mask;
}

inline void check_renderable(const AnomalyMap& m, const char* what) {
    if (m.values.size() != m.height * m.width || m.height == 0 || m.width == 0) {
        throw_shape(what, ": malformed map");
    }
    for (std::size_t i = 0; i < m.values.size(); ++i) {
        const float v = m.values[i];
        if (!(v >= 0.0f && v <= 1.0f)) {
            throw_input(what, ": map value ", v, " at flat index ", i, " outside [0,1]");
        }
    }
}

// 16-bit binary PGM, big-endian samples, score * 65535 rounded.
inline void render_map_pgm(const AnomalyMap& m, const std::string& path) {
    check_renderable(m, "render_map_pgm");
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw_io("cannot open '", path, "' for writing");
    f << "P5\n" << m.width << " " << m.height << "\n65535\n";
    std::vector<unsigned char> row(m.width * 2);
    for (std::size_t y = 0; y < m.height; ++y) {
        for (std::size_t x = 0; x < m.width; ++x) {
            const auto v = static_cast<std::uint16_t>(std::lround(m.at(y, x) * 65535.0));
            row[x * 2] = static_cast<unsigned char>(v >> 8);
            row[x * 2 + 1] = static_cast<unsigned char>(v & 0xff);
        }
        f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    f.flush();
    if (!f) throw_io("failed writing '", path, "'");
}

// Raw grid: u32 LE height, u32 LE width, then row-major f32 LE values.
inline void render_map_raw(const AnomalyMap& m, const std::string& path) {
    check_renderable(m, "render_map_raw");
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw_io("cannot open '", path, "' for writing");
    const std::uint32_t hw[2] = {static_cast<std::uint32_t>(m.height), static_cast<std::uint32_t>(m.width)};
    f.write(reinterpret_cast<const char*>(hw), 8);
    f.write(reinterpret_cast<const char*>(m.values.data()),
            static_cast<std::streamsize>(m.values.size() * 4));
    f.flush();
    if (!f) throw_io("failed writing '", path, "'");
}

inline AnomalyMap load_map_raw(const std::string& path) {
    const std::vector<unsigned char> bytes = detail::read_file_bytes(path);
    if (bytes.size() < 8) throw_input("'", path, "': truncated raw map");
    std::uint32_t hw[2];
    std::memcpy(hw, bytes.data(), 8);
    AnomalyMap m;
    m.height = hw[0];
    m.width = hw[1];
    if (bytes.size() != 8 + static_cast<std::size_t>(m.height) * m.width * 4) {
        throw_input("'", path, "': raw map size does not match ", m.height, "x", m.width, " header");
    }
    m.values.resize(m.height * m.width);
    std::memcpy(m.values.data(), bytes.data() + 8, m.values.size() * 4);
    return m;
}

}  // namespace zeroloc
