#pragma once

#include "petrep/error.hpp"
#include "petrep/forward_model.hpp"
#include "petrep/io.hpp"
#include "petrep/poisson_model.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

namespace petrep {

struct KernelConfig {
    int patch_radius = 1;  // 3x3 feature patches
    int neighbors = 20;
    int search_radius = 4; // 9x9 candidate window
    std::optional<double> sigma; // unset: mean nonzero neighbor distance
    bool normalize_rows = true;

    void validate() const
    {
        if (patch_radius < 0 || search_radius < 0) {
            throw std::invalid_argument("KernelConfig: radii must be >= 0");
        }
        if (neighbors < 1) {
            throw std::invalid_argument("KernelConfig: neighbors must be >= 1");
        }
        if (sigma && !(*sigma > 0.0)) {
            throw std::invalid_argument("KernelConfig: sigma must be positive");
        }
    }
};

namespace detail {

inline std::vector<double> patch_features(const Image& img, int radius)
{
    const int w = img.width();
    const int h = img.height();
    const int side = 2 * radius + 1;
    const auto dim = static_cast<std::size_t>(side * side);
    std::vector<double> feat(img.size() * dim);
    for (int iy = 0; iy < h; ++iy) {
        for (int ix = 0; ix < w; ++ix) {
            double* f = &feat[img.grid().index(ix, iy) * dim];
            for (int dy = -radius; dy <= radius; ++dy) {
                for (int dx = -radius; dx <= radius; ++dx) {
                    *f++ = img.at(reflect_index(ix + dx, w), reflect_index(iy + dy, h));
                }
            }
        }
    }
    return feat;
}

inline double squared_distance(const std::vector<double>& feat, std::size_t dim, std::size_t i, std::size_t j)
{
    double d = 0.0;
    for (std::size_t k = 0; k < dim; ++k) {
        const double r = feat[i * dim + k] - feat[j * dim + k];
        d += r * r;
    }
    return d;
}

} // namespace detail

/// Row-stochastic kNN radial-basis kernel on prior-image patches:
/// K_ij = exp(-|p_i - p_j|^2 / (2 sigma^2)) for the k nearest j inside the search window.
/// Ties in distance put the pixel itself first, then lower pixel index.
inline SparseMatrix build_kernel_matrix(const Image& prior, const KernelConfig& cfg = {})
{
    cfg.validate();
    const std::size_t n = prior.size();
    if (static_cast<std::size_t>(cfg.neighbors) > n) {
        throw std::invalid_argument("build_kernel_matrix: more neighbors than pixels");
    }
    if (!prior.all_finite()) {
        throw std::invalid_argument("build_kernel_matrix: prior has non-finite values");
    }
    const int w = prior.width();
    const int h = prior.height();
    const int side = 2 * cfg.patch_radius + 1;
    const auto dim = static_cast<std::size_t>(side * side);
    const auto feat = detail::patch_features(prior, cfg.patch_radius);

    struct Candidate {
        double d2;
        bool not_self;
        std::size_t j;
    };
    std::vector<std::vector<Candidate>> chosen(n);
    std::vector<Candidate> cand;
    double dist_sum = 0.0;
    std::size_t dist_count = 0;
    for (int iy = 0; iy < h; ++iy) {
        for (int ix = 0; ix < w; ++ix) {
            const std::size_t i = prior.grid().index(ix, iy);
            cand.clear();
            for (int jy = std::max(0, iy - cfg.search_radius); jy <= std::min(h - 1, iy + cfg.search_radius); ++jy) {
                for (int jx = std::max(0, ix - cfg.search_radius); jx <= std::min(w - 1, ix + cfg.search_radius);
                     ++jx) {
                    const std::size_t j = prior.grid().index(jx, jy);
                    cand.push_back({detail::squared_distance(feat, dim, i, j), j != i, j});
                }
            }
            const auto keep = std::min(cand.size(), static_cast<std::size_t>(cfg.neighbors));
            std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(keep), cand.end(),
                              [](const Candidate& a, const Candidate& b) {
                                  return std::tie(a.d2, a.not_self, a.j) < std::tie(b.d2, b.not_self, b.j);
                              });
            chosen[i].assign(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(keep));
            for (const auto& c : chosen[i]) {
                if (c.d2 > 0.0) {
                    dist_sum += std::sqrt(c.d2);
                    ++dist_count;
                }
            }
        }
    }
    double sigma = 1.0;
    if (cfg.sigma) {
        sigma = *cfg.sigma;
    } else if (dist_count > 0) {
        sigma = dist_sum / static_cast<double>(dist_count);
    }

    std::vector<SparseMatrix::Triplet> trip;
    trip.reserve(n * static_cast<std::size_t>(cfg.neighbors));
    for (std::size_t i = 0; i < n; ++i) {
        double total = 0.0;
        std::vector<double> weights;
        weights.reserve(chosen[i].size());
        for (const auto& c : chosen[i]) {
            weights.push_back(std::exp(-c.d2 / (2.0 * sigma * sigma)));
            total += weights.back();
        }
        for (std::size_t k = 0; k < chosen[i].size(); ++k) {
            const double v = cfg.normalize_rows ? weights[k] / total : weights[k];
            trip.push_back({static_cast<std::int32_t>(i), static_cast<std::int32_t>(chosen[i][k].j), v});
        }
    }
    return SparseMatrix(n, n, std::move(trip));
}

/// The composite operator A K acting on kernel coefficients alpha.
template <ImagingOperator Op>
class KernelSystem {
  public:
    KernelSystem(const Op& A, const SparseMatrix& K) : A_(&A), K_(&K), tmp_(A.grid().size())
    {
        if (K.rows() != A.grid().size() || K.cols() != A.grid().size()) {
            throw std::invalid_argument("KernelSystem: kernel matrix does not match the image grid");
        }
        sens_.resize(K.cols());
        K.apply_adjoint(A.column_sums(), sens_);
    }

    [[nodiscard]] const ImageGrid& grid() const noexcept { return A_->grid(); }
    [[nodiscard]] std::size_t rows() const noexcept { return A_->rows(); }
    [[nodiscard]] std::span<const double> column_sums() const noexcept { return sens_; }

    void apply(std::span<const double> alpha, std::span<double> out) const
    {
        K_->apply(alpha, tmp_);
        A_->apply(tmp_, out);
    }
    void apply_adjoint(std::span<const double> r, std::span<double> out) const
    {
        A_->apply_adjoint(r, tmp_);
        K_->apply_adjoint(tmp_, out);
    }

  private:
    const Op* A_;
    const SparseMatrix* K_;
    mutable std::vector<double> tmp_;
    std::vector<double> sens_;
};

inline Image apply_kernel(const SparseMatrix& K, const Image& alpha)
{
    Image x(alpha.grid());
    K.apply(alpha.values(), x.values());
    return x;
}

/// EM on kernel coefficients with system A K; returns x = K alpha.
/// The callback receives x = K alpha after each iteration.
template <ImagingOperator Op>
Image kernel_em_reconstruct(const Sinogram& sino, const Op& A, const SparseMatrix& K, int n_iters,
                            std::optional<Image> alpha0 = {}, const IterationCallback& on_iteration = {})
{
    const KernelSystem<Op> AK(A, K);
    Image a0 = alpha0 ? std::move(*alpha0) : default_initial_image(sino, AK);
    IterationCallback cb;
    if (on_iteration) {
        cb = [&](int n, const Image& alpha) { on_iteration(n, apply_kernel(K, alpha)); };
    }
    return apply_kernel(K, mlem_reconstruct(sino, AK, n_iters, std::move(a0), cb));
}

/// EM followed by a Gaussian post-filter; fwhm == 0 skips the filter.
template <ImagingOperator Op>
Image em_filter_reconstruct(const Sinogram& sino, const Op& A, int n_iters, double fwhm_px,
                            std::optional<Image> x0 = {})
{
    if (fwhm_px < 0.0) {
        throw std::invalid_argument("em_filter_reconstruct: fwhm must be >= 0");
    }
    Image x = mlem_reconstruct(sino, A, n_iters, x0 ? std::move(*x0) : default_initial_image(sino, A));
    return fwhm_px > 0.0 ? gaussian_filter(x, fwhm_px) : x;
}

struct NlmConfig {
    int window = 5;
    int patch = 3;
    double h = 0.1;

    void validate() const
    {
        if (window < 1 || window % 2 == 0 || patch < 1 || patch % 2 == 0) {
            throw std::invalid_argument("NlmConfig: window and patch sizes must be odd and positive");
        }
        if (!(h > 0.0)) {
            throw std::invalid_argument("NlmConfig: h must be positive");
        }
    }
};

/// Non-local means whose weights come from the guide image:
///   out_i = sum_j w_ij noisy_j / sum_j w_ij,  w_ij = exp(-|G_i - G_j|^2 / h^2)
/// over the search window clipped to the image; G are guide patches (symmetric borders).
inline Image nlm_guided_filter(const Image& noisy, const Image& guide, const NlmConfig& cfg = {})
{
    cfg.validate();
    require_same_grid(noisy.grid(), guide.grid(), "nlm_guided_filter");
    const int w = noisy.width();
    const int h = noisy.height();
    const int pr = cfg.patch / 2;
    const int wr = cfg.window / 2;
    const auto dim = static_cast<std::size_t>(cfg.patch * cfg.patch);
    const auto feat = detail::patch_features(guide, pr);
    const double inv_h2 = 1.0 / (cfg.h * cfg.h);
    Image out(noisy.grid());
    for (int iy = 0; iy < h; ++iy) {
        for (int ix = 0; ix < w; ++ix) {
            const std::size_t i = noisy.grid().index(ix, iy);
            double num = 0.0;
            double den = 0.0;
            for (int jy = std::max(0, iy - wr); jy <= std::min(h - 1, iy + wr); ++jy) {
                for (int jx = std::max(0, ix - wr); jx <= std::min(w - 1, ix + wr); ++jx) {
                    const std::size_t j = noisy.grid().index(jx, jy);
                    const double wt = std::exp(-detail::squared_distance(feat, dim, i, j) * inv_h2);
                    num += wt * noisy[j];
                    den += wt;
                }
            }
            out[i] = num / den;
        }
    }
    return out;
}

/// Sparse kernel matrix as "row,col,weight" CSV with a header line and exact round-trip digits.
inline void save_kernel_csv(const SparseMatrix& K, const fs::path& path)
{
    std::string text = "row,col,weight\n";
    text += "# " + std::to_string(K.rows()) + "," + std::to_string(K.cols()) + "\n";
    for (const auto& t : K.triplets()) {
        text += std::to_string(t.row) + "," + std::to_string(t.col) + "," + format_number(t.value) + "\n";
    }
    write_file_atomic(path, text);
}

inline SparseMatrix load_kernel_csv(const fs::path& path)
{
    std::istringstream in(read_file(path));
    std::string line;
    if (!std::getline(in, line) || line != "row,col,weight") {
        throw FormatError("kernel CSV: missing header in " + path.string());
    }
    std::size_t rows = 0;
    std::size_t cols = 0;
    if (!std::getline(in, line) || std::sscanf(line.c_str(), "# %zu,%zu", &rows, &cols) != 2) {
        throw FormatError("kernel CSV: missing shape line in " + path.string());
    }
    std::vector<SparseMatrix::Triplet> trip;
    int line_no = 2;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        SparseMatrix::Triplet t{};
        const char* p = line.data();
        const char* end = p + line.size();
        auto r1 = std::from_chars(p, end, t.row);
        bool ok = r1.ec == std::errc{} && r1.ptr < end && *r1.ptr == ',';
        if (ok) {
            auto r2 = std::from_chars(r1.ptr + 1, end, t.col);
            ok = r2.ec == std::errc{} && r2.ptr < end && *r2.ptr == ',';
            if (ok) {
                auto r3 = std::from_chars(r2.ptr + 1, end, t.value);
                ok = r3.ec == std::errc{} && r3.ptr == end;
            }
        }
        if (!ok) {
            throw FormatError("kernel CSV: malformed line " + std::to_string(line_no));
        }
        trip.push_back(t);
    }
    try {
        return SparseMatrix(rows, cols, std::move(trip));
    } catch (const std::out_of_range& e) {
        throw FormatError(std::string("kernel CSV: ") + e.what());
    }
}

} // namespace petrep
