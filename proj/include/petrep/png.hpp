#pragma once

#include "petrep/image.hpp"
#include "petrep/io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace petrep {

/// byte = round-half-up(255 * clamp((v - lo) / (hi - lo), 0, 1))
inline std::uint8_t window_byte(double v, double lo, double hi) noexcept
{
    const double t = std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
    return static_cast<std::uint8_t>(std::floor(255.0 * t + 0.5));
}

inline std::vector<std::uint8_t> window_bytes(const Image& img, double lo, double hi)
{
    if (!(lo < hi)) {
        throw std::invalid_argument("export_png: window requires lo < hi");
    }
    std::vector<std::uint8_t> out(img.size());
    for (std::size_t j = 0; j < img.size(); ++j) {
        out[j] = window_byte(img[j], lo, hi);
    }
    return out;
}

namespace detail {

inline void put_u32_be(std::string& s, std::uint32_t v)
{
    for (int shift = 24; shift >= 0; shift -= 8) {
        s.push_back(static_cast<char>((v >> shift) & 0xffu));
    }
}

inline void put_chunk(std::string& png, const char* type, const std::string& payload)
{
    put_u32_be(png, static_cast<std::uint32_t>(payload.size()));
    std::string body(type, 4);
    body += payload;
    png += body;
    const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(body.data()),
                           static_cast<uInt>(body.size()));
    put_u32_be(png, static_cast<std::uint32_t>(crc));
}

} // namespace detail

/// Encodes an 8-bit grayscale PNG (row 0 of `pixels` is the top row).
inline std::string encode_png_gray(int width, int height, const std::vector<std::uint8_t>& pixels)
{
    if (width < 1 || height < 1 ||
        pixels.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height)) {
        throw std::invalid_argument("encode_png_gray: bad dimensions");
    }
    std::string raw;
    raw.reserve(pixels.size() + static_cast<std::size_t>(height));
    for (int y = 0; y < height; ++y) {
        raw.push_back('\0'); // filter: none
        const auto* row = pixels.data() + static_cast<std::size_t>(y) * width;
        raw.append(reinterpret_cast<const char*>(row), static_cast<std::size_t>(width));
    }
    uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
    std::string z(zlen, '\0');
    if (compress2(reinterpret_cast<Bytef*>(z.data()), &zlen, reinterpret_cast<const Bytef*>(raw.data()),
                  static_cast<uLong>(raw.size()), 6) != Z_OK) {
        throw std::runtime_error("encode_png_gray: zlib compression failed");
    }
    z.resize(zlen);

    std::string png("\x89PNG\r\n\x1a\n", 8);
    std::string ihdr;
    detail::put_u32_be(ihdr, static_cast<std::uint32_t>(width));
    detail::put_u32_be(ihdr, static_cast<std::uint32_t>(height));
    ihdr += std::string("\x08\x00\x00\x00\x00", 5); // depth 8, grayscale, deflate, no filter, no interlace
    detail::put_chunk(png, "IHDR", ihdr);
    detail::put_chunk(png, "IDAT", z);
    detail::put_chunk(png, "IEND", {});
    return png;
}

inline void export_png(const Image& img, double lo, double hi, const fs::path& path)
{
    write_file_atomic(path, encode_png_gray(img.width(), img.height(), window_bytes(img, lo, hi)));
}

/// Window spanning the given lower/upper percentiles (nearest-rank) of the pixel values.
inline std::pair<double, double> percentile_window(const Image& img, double lo_pct = 1.0,
                                                   double hi_pct = 99.0)
{
    std::vector<double> v(img.values().begin(), img.values().end());
    std::sort(v.begin(), v.end());
    auto pick = [&](double pct) {
        const auto k = static_cast<std::size_t>(std::llround(pct / 100.0 * static_cast<double>(v.size() - 1)));
        return v[std::min(k, v.size() - 1)];
    };
    double lo = pick(lo_pct);
    double hi = pick(hi_pct);
    if (!(lo < hi)) {
        hi = lo + 1.0;
    }
    return {lo, hi};
}

} // namespace petrep
