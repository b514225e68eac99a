#pragma once

#include "petrep/error.hpp"
#include "petrep/image.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

namespace petrep {

namespace fs = std::filesystem;
using json = nlohmann::json;

/// foo.img -> foo.json
inline fs::path sidecar_path(const fs::path& raw)
{
    fs::path p = raw;
    p.replace_extension(".json");
    return p;
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
inline void write_file_atomic(const fs::path& path, std::string_view bytes)
{
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw std::runtime_error("cannot open '" + tmp.string() + "' for writing");
        }
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw std::runtime_error("write failed for '" + tmp.string() + "'");
        }
    }
    fs::rename(tmp, path);
}

inline std::string read_file(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open '" + path.string() + "'");
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline json read_json(const fs::path& path)
{
    try {
        return json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw FormatError("'" + path.string() + "': " + e.what());
    }
}

inline void write_json(const fs::path& path, const json& j)
{
    write_file_atomic(path, j.dump(2) + "\n");
}

// Little-endian encoders, independent of host byte order.

inline std::string encode_f32(std::span<const double> values)
{
    std::string out(values.size() * 4, '\0');
    for (std::size_t i = 0; i < values.size(); ++i) {
        const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(values[i]));
        for (int b = 0; b < 4; ++b) {
            out[4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xffu);
        }
    }
    return out;
}

inline std::vector<double> decode_f32(std::string_view bytes)
{
    if (bytes.size() % 4 != 0) {
        throw FormatError("raw float32 payload length is not a multiple of 4");
    }
    std::vector<double> out(bytes.size() / 4);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) {
            bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[4 * i + b])) << (8 * b);
        }
        out[i] = static_cast<double>(std::bit_cast<float>(bits));
    }
    return out;
}

inline std::string encode_f64(std::span<const double> values)
{
    std::string out(values.size() * 8, '\0');
    for (std::size_t i = 0; i < values.size(); ++i) {
        const auto bits = std::bit_cast<std::uint64_t>(values[i]);
        for (int b = 0; b < 8; ++b) {
            out[8 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xffu);
        }
    }
    return out;
}

inline std::vector<double> decode_f64(std::string_view bytes)
{
    if (bytes.size() % 8 != 0) {
        throw FormatError("raw float64 payload length is not a multiple of 8");
    }
    std::vector<double> out(bytes.size() / 8);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) {
            bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 * i + b])) << (8 * b);
        }
        out[i] = std::bit_cast<double>(bits);
    }
    return out;
}

inline void write_f64(const fs::path& path, std::span<const double> values)
{
    write_file_atomic(path, encode_f64(values));
}

inline std::vector<double> read_f64(const fs::path& path) { return decode_f64(read_file(path)); }

/// Raw little-endian float32 pixels plus a JSON sidecar (width, height, pixel_size_mm).
inline void save_image(const Image& img, const fs::path& path)
{
    if (!img.all_finite()) {
        throw std::invalid_argument("save_image: image has non-finite values");
    }
    const json header = {{"width", img.width()},
                         {"height", img.height()},
                         {"pixel_size_mm", img.grid().pixel_size}};
    write_file_atomic(path, encode_f32(img.values()));
    write_json(sidecar_path(path), header);
}

inline ImageGrid grid_from_json(const json& j)
{
    try {
        ImageGrid g{j.at("width").get<int>(), j.at("height").get<int>(),
                    j.at("pixel_size_mm").get<double>()};
        g.validate();
        return g;
    } catch (const json::exception& e) {
        throw FormatError(std::string("image header: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw FormatError(std::string("image header: ") + e.what());
    }
}

inline Image load_image(const fs::path& path)
{
    const fs::path side = sidecar_path(path);
    if (!fs::exists(side)) {
        throw FormatError("missing sidecar '" + side.string() + "'");
    }
    const ImageGrid grid = grid_from_json(read_json(side));
    std::vector<double> values = decode_f32(read_file(path));
    if (values.size() != grid.size()) {
        throw FormatError("'" + path.string() + "': expected " + std::to_string(grid.size()) +
                          " floats, found " + std::to_string(values.size()));
    }
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw FormatError("'" + path.string() + "': non-finite pixel value");
        }
    }
    return Image(grid, std::move(values));
}

inline json to_json(const CircleRoi& roi)
{
    return {{"center_mm", {roi.center_x, roi.center_y}},
            {"diameter_mm", roi.diameter},
            {"label", roi.label}};
}

inline CircleRoi circle_roi_from_json(const json& j)
{
    try {
        const auto& c = j.at("center_mm");
        return {c.at(0).get<double>(), c.at(1).get<double>(), j.at("diameter_mm").get<double>(),
                j.value("label", std::string{})};
    } catch (const json::exception& e) {
        throw FormatError(std::string("ROI: ") + e.what());
    }
}

inline void save_rois(const std::vector<CircleRoi>& rois, const fs::path& path)
{
    json arr = json::array();
    for (const auto& r : rois) {
        arr.push_back(to_json(r));
    }
    write_json(path, arr);
}

inline std::vector<CircleRoi> load_rois(const fs::path& path)
{
    const json j = read_json(path);
    std::vector<CircleRoi> out;
    if (j.is_array()) {
        for (const auto& e : j) {
            out.push_back(circle_roi_from_json(e));
        }
    } else {
        out.push_back(circle_roi_from_json(j));
    }
    return out;
}

/// Shortest round-trip text for a double, used in CSV output.
inline std::string format_number(double v)
{
    return json(v).dump();
}

} // namespace petrep
