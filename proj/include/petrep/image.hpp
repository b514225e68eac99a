#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace petrep {

/// Regular 2D pixel grid. Physical coordinates are in mm with the origin at
/// the grid center; x grows with the column index, y with the row index.
struct ImageGrid {
    int width = 0;
    int height = 0;
    double pixel_size = 1.0; // mm, isotropic

    [[nodiscard]] std::size_t size() const noexcept
    {
        return static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
    }

    void validate() const
    {
        if (width < 1 || height < 1) {
            throw std::invalid_argument("ImageGrid: width and height must be >= 1");
        }
        if (!(pixel_size > 0.0) || !std::isfinite(pixel_size)) {
            throw std::invalid_argument("ImageGrid: pixel_size must be positive");
        }
    }

    [[nodiscard]] double center_x(int ix) const noexcept
    {
        return (ix + 0.5 - 0.5 * width) * pixel_size;
    }
    [[nodiscard]] double center_y(int iy) const noexcept
    {
        return (iy + 0.5 - 0.5 * height) * pixel_size;
    }
    [[nodiscard]] double min_x() const noexcept { return -0.5 * width * pixel_size; }
    [[nodiscard]] double min_y() const noexcept { return -0.5 * height * pixel_size; }

    [[nodiscard]] std::size_t index(int ix, int iy) const noexcept
    {
        return static_cast<std::size_t>(iy) * static_cast<std::size_t>(width) +
               static_cast<std::size_t>(ix);
    }

    friend bool operator==(const ImageGrid&, const ImageGrid&) = default;
};

/// Row-major scalar image. Arithmetic is done in double; files store float32.
class Image {
  public:
    Image() = default;

    explicit Image(ImageGrid grid, double fill = 0.0) : grid_(grid)
    {
        grid_.validate();
        values_.assign(grid_.size(), fill);
    }

    Image(ImageGrid grid, std::vector<double> values) : grid_(grid), values_(std::move(values))
    {
        grid_.validate();
        if (values_.size() != grid_.size()) {
            throw std::invalid_argument("Image: value count does not match grid");
        }
    }

    [[nodiscard]] const ImageGrid& grid() const noexcept { return grid_; }
    [[nodiscard]] std::size_t size() const noexcept { return values_.size(); }
    [[nodiscard]] int width() const noexcept { return grid_.width; }
    [[nodiscard]] int height() const noexcept { return grid_.height; }

    [[nodiscard]] std::span<const double> values() const noexcept { return values_; }
    [[nodiscard]] std::span<double> values() noexcept { return values_; }
    [[nodiscard]] const std::vector<double>& data() const noexcept { return values_; }

    double& operator[](std::size_t j) noexcept { return values_[j]; }
    double operator[](std::size_t j) const noexcept { return values_[j]; }
    double& at(int ix, int iy) noexcept { return values_[grid_.index(ix, iy)]; }
    [[nodiscard]] double at(int ix, int iy) const noexcept { return values_[grid_.index(ix, iy)]; }

    [[nodiscard]] bool all_finite() const noexcept
    {
        return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
    }
    [[nodiscard]] bool nonnegative() const noexcept
    {
        return std::all_of(values_.begin(), values_.end(), [](double v) { return v >= 0.0; });
    }

    friend bool operator==(const Image&, const Image&) = default;

  private:
    ImageGrid grid_{};
    std::vector<double> values_;
};

inline void require_same_grid(const ImageGrid& a, const ImageGrid& b, const char* where)
{
    if (!(a == b)) {
        throw std::invalid_argument(std::string(where) + ": grid mismatch");
    }
}

/// Binary region of interest on a grid.
struct RoiMask {
    ImageGrid grid{};
    std::vector<bool> members;
    std::string label;

    [[nodiscard]] std::size_t count() const noexcept
    {
        return static_cast<std::size_t>(std::count(members.begin(), members.end(), true));
    }

    /// Mean of `img` over member pixels.
    [[nodiscard]] double mean(const Image& img) const
    {
        require_same_grid(grid, img.grid(), "RoiMask::mean");
        double sum = 0.0;
        std::size_t n = 0;
        for (std::size_t j = 0; j < members.size(); ++j) {
            if (members[j]) {
                sum += img[j];
                ++n;
            }
        }
        if (n == 0) {
            throw std::invalid_argument("RoiMask::mean: empty mask '" + label + "'");
        }
        return sum / static_cast<double>(n);
    }
};

/// Description of a circular ROI in physical coordinates, as serialized to JSON.
struct CircleRoi {
    double center_x = 0.0; // mm
    double center_y = 0.0; // mm
    double diameter = 0.0; // mm
    std::string label;
};

/// Pixels whose centers lie within diameter/2 of `center` (mm).
inline RoiMask circular_roi(const ImageGrid& grid, double cx, double cy, double diameter,
                            std::string label = {})
{
    grid.validate();
    if (!(diameter > 0.0)) {
        throw std::invalid_argument("circular_roi: diameter must be positive");
    }
    RoiMask roi{grid, std::vector<bool>(grid.size(), false), std::move(label)};
    const double r2 = 0.25 * diameter * diameter;
    for (int iy = 0; iy < grid.height; ++iy) {
        const double dy = grid.center_y(iy) - cy;
        for (int ix = 0; ix < grid.width; ++ix) {
            const double dx = grid.center_x(ix) - cx;
            if (dx * dx + dy * dy <= r2) {
                roi.members[grid.index(ix, iy)] = true;
            }
        }
    }
    if (roi.count() == 0) {
        throw std::invalid_argument("circular_roi: ROI '" + roi.label + "' has no member pixels");
    }
    return roi;
}

inline RoiMask circular_roi(const ImageGrid& grid, const CircleRoi& c)
{
    return circular_roi(grid, c.center_x, c.center_y, c.diameter, c.label);
}

} // namespace petrep
