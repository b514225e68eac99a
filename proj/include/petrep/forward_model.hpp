#pragma once

#include "petrep/image.hpp"
#include "petrep/io.hpp"

#include <algorithm>
#include <cmath>
#include <concepts>
#include <limits>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <tuple>
#include <vector>

namespace petrep {

/// Compressed sparse row matrix that also keeps its transpose, so both products
/// gather in a fixed order per output element.
class SparseMatrix {
  public:
    struct Triplet {
        std::int32_t row;
        std::int32_t col;
        double value;
    };

    SparseMatrix() = default;

    /// Duplicate (row, col) entries are summed.
    SparseMatrix(std::size_t rows, std::size_t cols, std::vector<Triplet> triplets)
        : rows_(rows), cols_(cols)
    {
        std::sort(triplets.begin(), triplets.end(), [](const Triplet& a, const Triplet& b) {
            return std::tie(a.row, a.col) < std::tie(b.row, b.col);
        });
        row_ptr_.assign(rows_ + 1, 0);
        for (std::size_t k = 0; k < triplets.size(); ++k) {
            const auto& t = triplets[k];
            if (t.row < 0 || static_cast<std::size_t>(t.row) >= rows_ || t.col < 0 ||
                static_cast<std::size_t>(t.col) >= cols_) {
                throw std::out_of_range("SparseMatrix: triplet index out of range");
            }
            if (!col_idx_.empty() && k > 0 && triplets[k - 1].row == t.row &&
                triplets[k - 1].col == t.col) {
                values_.back() += t.value;
                continue;
            }
            col_idx_.push_back(t.col);
            values_.push_back(t.value);
            ++row_ptr_[static_cast<std::size_t>(t.row) + 1];
        }
        for (std::size_t i = 0; i < rows_; ++i) {
            row_ptr_[i + 1] += row_ptr_[i];
        }
        build_transpose();
    }

    [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
    [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
    [[nodiscard]] std::size_t nnz() const noexcept { return values_.size(); }

    void apply(std::span<const double> x, std::span<double> out) const
    {
        check(x.size() == cols_ && out.size() == rows_, "SparseMatrix::apply: size mismatch");
        for (std::size_t i = 0; i < rows_; ++i) {
            double acc = 0.0;
            for (std::size_t k = row_ptr_[i]; k < row_ptr_[i + 1]; ++k) {
                acc += values_[k] * x[static_cast<std::size_t>(col_idx_[k])];
            }
            out[i] = acc;
        }
    }

    void apply_adjoint(std::span<const double> r, std::span<double> out) const
    {
        check(r.size() == rows_ && out.size() == cols_, "SparseMatrix::apply_adjoint: size mismatch");
        for (std::size_t j = 0; j < cols_; ++j) {
            double acc = 0.0;
            for (std::size_t k = col_ptr_[j]; k < col_ptr_[j + 1]; ++k) {
                acc += t_values_[k] * r[static_cast<std::size_t>(row_idx_[k])];
            }
            out[j] = acc;
        }
    }

    /// Nonzeros of row i as (column, value) spans.
    [[nodiscard]] std::pair<std::span<const std::int32_t>, std::span<const double>> row(std::size_t i) const
    {
        const auto b = row_ptr_[i];
        const auto n = row_ptr_[i + 1] - b;
        return {std::span(col_idx_).subspan(b, n), std::span(values_).subspan(b, n)};
    }

    [[nodiscard]] std::vector<Triplet> triplets() const
    {
        std::vector<Triplet> out;
        out.reserve(values_.size());
        for (std::size_t i = 0; i < rows_; ++i) {
            for (std::size_t k = row_ptr_[i]; k < row_ptr_[i + 1]; ++k) {
                out.push_back({static_cast<std::int32_t>(i), col_idx_[k], values_[k]});
            }
        }
        return out;
    }

    [[nodiscard]] std::vector<double> to_dense() const
    {
        std::vector<double> d(rows_ * cols_, 0.0);
        for (std::size_t i = 0; i < rows_; ++i) {
            for (std::size_t k = row_ptr_[i]; k < row_ptr_[i + 1]; ++k) {
                d[i * cols_ + static_cast<std::size_t>(col_idx_[k])] += values_[k];
            }
        }
        return d;
    }

  private:
    static void check(bool ok, const char* msg)
    {
        if (!ok) {
            throw std::invalid_argument(msg);
        }
    }

    void build_transpose()
    {
        col_ptr_.assign(cols_ + 1, 0);
        for (auto c : col_idx_) {
            ++col_ptr_[static_cast<std::size_t>(c) + 1];
        }
        for (std::size_t j = 0; j < cols_; ++j) {
            col_ptr_[j + 1] += col_ptr_[j];
        }
        row_idx_.resize(values_.size());
        t_values_.resize(values_.size());
        std::vector<std::size_t> fill(col_ptr_.begin(), col_ptr_.end() - 1);
        for (std::size_t i = 0; i < rows_; ++i) {
            for (std::size_t k = row_ptr_[i]; k < row_ptr_[i + 1]; ++k) {
                const auto j = static_cast<std::size_t>(col_idx_[k]);
                row_idx_[fill[j]] = static_cast<std::int32_t>(i);
                t_values_[fill[j]] = values_[k];
                ++fill[j];
            }
        }
    }

    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<std::size_t> row_ptr_;
    std::vector<std::int32_t> col_idx_;
    std::vector<double> values_;
    std::vector<std::size_t> col_ptr_;
    std::vector<std::int32_t> row_idx_;
    std::vector<double> t_values_;
};

/// Linear map from an image grid to a measurement vector with an available adjoint.
template <class Op>
concept ImagingOperator = requires(const Op& op, std::span<const double> in, std::span<double> out) {
    { op.grid() } -> std::convertible_to<const ImageGrid&>;
    { op.rows() } -> std::convertible_to<std::size_t>;
    op.apply(in, out);
    op.apply_adjoint(in, out);
    { op.column_sums() } -> std::convertible_to<std::span<const double>>;
};

/// 2D parallel-beam geometry. Angles are k*pi/n_angles; bin b sits at detector
/// coordinate (b + 0.5 - n_bins/2) * bin_size. Ray (angle a, coordinate t) is the
/// line {p : p . (cos a, sin a) = t}.
struct ProjectionGeometry {
    int n_angles = 1;
    int n_bins = 1;
    double bin_size = 1.0; // mm

    void validate() const
    {
        if (n_angles < 1 || n_bins < 1) {
            throw std::invalid_argument("ProjectionGeometry: n_angles and n_bins must be >= 1");
        }
        if (!(bin_size > 0.0)) {
            throw std::invalid_argument("ProjectionGeometry: bin_size must be positive");
        }
    }

    [[nodiscard]] std::size_t size() const noexcept
    {
        return static_cast<std::size_t>(n_angles) * static_cast<std::size_t>(n_bins);
    }
    [[nodiscard]] double angle(int k) const noexcept
    {
        return std::numbers::pi * static_cast<double>(k) / static_cast<double>(n_angles);
    }
    [[nodiscard]] double bin_center(int b) const noexcept { return (b + 0.5 - 0.5 * n_bins) * bin_size; }

    /// Enough bins of one pixel width to cover the grid diagonal, one angle per bin.
    static ProjectionGeometry covering(const ImageGrid& grid)
    {
        const double diag = std::hypot(grid.width, grid.height);
        int bins = static_cast<int>(std::ceil(diag)) + 2;
        bins += bins % 2;
        return {bins, bins, grid.pixel_size};
    }

    friend bool operator==(const ProjectionGeometry&, const ProjectionGeometry&) = default;
};

/// Nonnegative system matrix A (rows: LORs or output pixels, columns: image pixels)
/// with cached column sums A.j = sum_i A_ij.
class SystemMatrix {
  public:
    SystemMatrix() = default;

    SystemMatrix(ImageGrid grid, SparseMatrix matrix, std::optional<ProjectionGeometry> geometry = {})
        : grid_(grid), matrix_(std::move(matrix)), geometry_(geometry)
    {
        if (matrix_.cols() != grid_.size()) {
            throw std::invalid_argument("SystemMatrix: column count must equal pixel count");
        }
        std::vector<double> ones(matrix_.rows(), 1.0);
        column_sums_.assign(grid_.size(), 0.0);
        matrix_.apply_adjoint(ones, column_sums_);
    }

    [[nodiscard]] const ImageGrid& grid() const noexcept { return grid_; }
    [[nodiscard]] std::size_t rows() const noexcept { return matrix_.rows(); }
    [[nodiscard]] std::size_t cols() const noexcept { return matrix_.cols(); }
    [[nodiscard]] const SparseMatrix& matrix() const noexcept { return matrix_; }
    [[nodiscard]] const std::optional<ProjectionGeometry>& geometry() const noexcept { return geometry_; }
    [[nodiscard]] std::span<const double> column_sums() const noexcept { return column_sums_; }

    void apply(std::span<const double> x, std::span<double> out) const { matrix_.apply(x, out); }
    void apply_adjoint(std::span<const double> r, std::span<double> out) const
    {
        matrix_.apply_adjoint(r, out);
    }

  private:
    ImageGrid grid_{};
    SparseMatrix matrix_;
    std::optional<ProjectionGeometry> geometry_;
    std::vector<double> column_sums_;
};

/// Siddon-style trace of one ray: appends (pixel, intersection length in mm).
inline void trace_ray(const ImageGrid& grid, double angle, double t,
                      std::vector<std::pair<std::int32_t, double>>& out)
{
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    const double px = t * c;
    const double py = t * s;
    const double dx = -s;
    const double dy = c;
    const double ps = grid.pixel_size;
    const double x0 = grid.min_x();
    const double y0 = grid.min_y();
    const double x1 = -x0;
    const double y1 = -y0;
    constexpr double tiny = 1e-14;

    double smin = -std::numeric_limits<double>::infinity();
    double smax = std::numeric_limits<double>::infinity();
    auto clip = [&](double p, double d, double lo, double hi) {
        if (std::fabs(d) < tiny) {
            return p >= lo && p <= hi;
        }
        const double a = (lo - p) / d;
        const double b = (hi - p) / d;
        smin = std::max(smin, std::min(a, b));
        smax = std::min(smax, std::max(a, b));
        return true;
    };
    if (!clip(px, dx, x0, x1) || !clip(py, dy, y0, y1) || !(smax > smin)) {
        return;
    }

    std::vector<double> knots{smin, smax};
    auto add_planes = [&](double p, double d, double lo, int count) {
        if (std::fabs(d) < tiny) {
            return;
        }
        for (int k = 1; k < count; ++k) {
            const double sk = (lo + k * ps - p) / d;
            if (sk > smin && sk < smax) {
                knots.push_back(sk);
            }
        }
    };
    add_planes(px, dx, x0, grid.width);
    add_planes(py, dy, y0, grid.height);
    std::sort(knots.begin(), knots.end());

    for (std::size_t k = 0; k + 1 < knots.size(); ++k) {
        const double len = knots[k + 1] - knots[k];
        if (len <= 1e-12 * ps) {
            continue;
        }
        const double sm = 0.5 * (knots[k] + knots[k + 1]);
        const int ix = std::clamp(static_cast<int>(std::floor((px + sm * dx - x0) / ps)), 0, grid.width - 1);
        const int iy = std::clamp(static_cast<int>(std::floor((py + sm * dy - y0) / ps)), 0, grid.height - 1);
        out.emplace_back(static_cast<std::int32_t>(grid.index(ix, iy)), len);
    }
}

/// Row i = angle * n_bins + bin holds the intersection lengths of that ray with each pixel.
inline SystemMatrix build_system_matrix(const ImageGrid& grid, const ProjectionGeometry& geometry)
{
    grid.validate();
    geometry.validate();
    std::vector<SparseMatrix::Triplet> triplets;
    std::vector<std::pair<std::int32_t, double>> hits;
    for (int a = 0; a < geometry.n_angles; ++a) {
        const double angle = geometry.angle(a);
        for (int b = 0; b < geometry.n_bins; ++b) {
            hits.clear();
            trace_ray(grid, angle, geometry.bin_center(b), hits);
            const auto row = static_cast<std::int32_t>(a * geometry.n_bins + b);
            for (const auto& [pixel, len] : hits) {
                triplets.push_back({row, pixel, len});
            }
        }
    }
    return {grid, SparseMatrix(geometry.size(), grid.size(), std::move(triplets)), geometry};
}

/// Square convolution kernel with odd side length, centered.
struct Kernel2D {
    int size = 1;
    std::vector<double> weights{1.0};

    [[nodiscard]] double at(int u, int v) const { return weights[static_cast<std::size_t>(v * size + u)]; }

    static Kernel2D delta() { return {}; }

    static Kernel2D gaussian(double sigma_px, int radius)
    {
        Kernel2D k{2 * radius + 1, {}};
        k.weights.resize(static_cast<std::size_t>(k.size * k.size));
        double sum = 0.0;
        for (int v = -radius; v <= radius; ++v) {
            for (int u = -radius; u <= radius; ++u) {
                const double w = std::exp(-(u * u + v * v) / (2.0 * sigma_px * sigma_px));
                k.weights[static_cast<std::size_t>((v + radius) * k.size + (u + radius))] = w;
                sum += w;
            }
        }
        for (auto& w : k.weights) {
            w /= sum;
        }
        return k;
    }
};

/// Mirror index into [0, n) with the edge sample repeated (... 1 0 | 0 1 ... n-1 | n-1 n-2 ...).
inline int reflect_index(int i, int n) noexcept
{
    if (n == 1) {
        return 0;
    }
    const int period = 2 * n;
    i %= period;
    if (i < 0) {
        i += period;
    }
    return i < n ? i : period - 1 - i;
}

/// Convolution with `psf` under symmetric boundary handling, as an explicit matrix.
/// Its adjoint is the corresponding correlation.
inline SystemMatrix build_blur_matrix(const ImageGrid& grid, const Kernel2D& psf)
{
    grid.validate();
    if (psf.size < 1 || psf.size % 2 == 0 ||
        psf.weights.size() != static_cast<std::size_t>(psf.size * psf.size)) {
        throw std::invalid_argument("build_blur_matrix: psf must be square with odd side");
    }
    double sum = 0.0;
    for (double w : psf.weights) {
        if (w < 0.0) {
            throw std::invalid_argument("build_blur_matrix: psf must be nonnegative");
        }
        sum += w;
    }
    if (std::fabs(sum - 1.0) > 1e-9) {
        throw std::invalid_argument("build_blur_matrix: psf must sum to 1");
    }
    const int r = psf.size / 2;
    std::vector<SparseMatrix::Triplet> triplets;
    for (int iy = 0; iy < grid.height; ++iy) {
        for (int ix = 0; ix < grid.width; ++ix) {
            const auto row = static_cast<std::int32_t>(grid.index(ix, iy));
            for (int v = -r; v <= r; ++v) {
                for (int u = -r; u <= r; ++u) {
                    const double w = psf.at(u + r, v + r);
                    if (w == 0.0) {
                        continue;
                    }
                    const int jx = reflect_index(ix - u, grid.width);
                    const int jy = reflect_index(iy - v, grid.height);
                    triplets.push_back({row, static_cast<std::int32_t>(grid.index(jx, jy)), w});
                }
            }
        }
    }
    return {grid, SparseMatrix(grid.size(), grid.size(), std::move(triplets))};
}

template <ImagingOperator Op>
std::vector<double> project(const Op& A, const Image& x)
{
    require_same_grid(A.grid(), x.grid(), "project");
    std::vector<double> out(A.rows());
    A.apply(x.values(), out);
    return out;
}

template <ImagingOperator Op>
Image backproject(const Op& A, std::span<const double> r)
{
    if (r.size() != A.rows()) {
        throw std::invalid_argument("backproject: length mismatch");
    }
    Image out(A.grid());
    A.apply_adjoint(r, out.values());
    return out;
}

/// ybar = A x + s
template <ImagingOperator Op>
std::vector<double> forward_mean(const Op& A, const Image& x, std::span<const double> s)
{
    if (s.size() != A.rows()) {
        throw std::invalid_argument("forward_mean: additive term length mismatch");
    }
    for (double v : s) {
        if (v < 0.0) {
            throw std::invalid_argument("forward_mean: negative additive term");
        }
    }
    auto out = project(A, x);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += s[i];
    }
    return out;
}

/// Measured counts y with known additive expectation s.
struct Sinogram {
    ProjectionGeometry geometry{};
    std::vector<double> counts;
    std::vector<double> additive;

    Sinogram() = default;
    Sinogram(ProjectionGeometry g, std::vector<double> y, std::vector<double> s = {})
        : geometry(g), counts(std::move(y)), additive(std::move(s))
    {
        if (additive.empty()) {
            additive.assign(counts.size(), 0.0);
        }
        validate();
    }

    [[nodiscard]] std::size_t size() const noexcept { return counts.size(); }

    void validate() const
    {
        if (counts.size() != additive.size()) {
            throw std::invalid_argument("Sinogram: counts and additive lengths differ");
        }
        for (std::size_t i = 0; i < counts.size(); ++i) {
            if (!(counts[i] >= 0.0) || !(additive[i] >= 0.0) || !std::isfinite(counts[i]) ||
                !std::isfinite(additive[i])) {
                throw std::invalid_argument("Sinogram: counts and additive must be finite and >= 0");
            }
        }
    }

    friend bool operator==(const Sinogram&, const Sinogram&) = default;
};

inline json to_json(const ProjectionGeometry& g)
{
    return {{"n_angles", g.n_angles}, {"n_bins", g.n_bins}, {"bin_size_mm", g.bin_size}};
}

inline ProjectionGeometry geometry_from_json(const json& j)
{
    try {
        ProjectionGeometry g{j.at("n_angles").get<int>(), j.at("n_bins").get<int>(),
                             j.at("bin_size_mm").get<double>()};
        g.validate();
        return g;
    } catch (const json::exception& e) {
        throw FormatError(std::string("geometry: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw FormatError(std::string("geometry: ") + e.what());
    }
}

/// Raw float32 counts (followed by the additive term when has_additive) + JSON sidecar.
inline void save_sinogram(const Sinogram& sino, const fs::path& path)
{
    const bool has_additive =
        std::any_of(sino.additive.begin(), sino.additive.end(), [](double v) { return v != 0.0; });
    std::string bytes = encode_f32(sino.counts);
    if (has_additive) {
        bytes += encode_f32(sino.additive);
    }
    json header = to_json(sino.geometry);
    header["has_additive"] = has_additive;
    write_file_atomic(path, bytes);
    write_json(sidecar_path(path), header);
}

inline Sinogram load_sinogram(const fs::path& path)
{
    const fs::path side = sidecar_path(path);
    if (!fs::exists(side)) {
        throw FormatError("missing sidecar '" + side.string() + "'");
    }
    const json header = read_json(side);
    const ProjectionGeometry g = geometry_from_json(header);
    const bool has_additive = header.value("has_additive", false);
    auto values = decode_f32(read_file(path));
    const std::size_t m = g.size();
    if (values.size() != (has_additive ? 2 * m : m)) {
        throw FormatError("'" + path.string() + "': sinogram length does not match header");
    }
    std::vector<double> y(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(m));
    std::vector<double> s = has_additive
                                ? std::vector<double>(values.begin() + static_cast<std::ptrdiff_t>(m), values.end())
                                : std::vector<double>(m, 0.0);
    try {
        return Sinogram(g, std::move(y), std::move(s));
    } catch (const std::invalid_argument& e) {
        throw FormatError("'" + path.string() + "': " + e.what());
    }
}

} // namespace petrep
