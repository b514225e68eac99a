#pragma once

#include "petrep/error.hpp"
#include "petrep/forward_model.hpp"
#include "petrep/image.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

namespace petrep {

/// Denominator floor used when a bin with counts has an underflowing mean.
inline constexpr double kEmGuard = 1e-12;

/// sum_i y_i log(ybar_i) - ybar_i, without the -log(y_i!) constant.
/// Terms with y_i = 0 contribute -ybar_i; ybar_i = 0 with y_i > 0 gives -infinity.
inline double log_likelihood_from_mean(std::span<const double> y, std::span<const double> ybar)
{
    if (y.size() != ybar.size()) {
        throw std::invalid_argument("log_likelihood: length mismatch");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (y[i] > 0.0) {
            if (ybar[i] <= 0.0) {
                return -std::numeric_limits<double>::infinity();
            }
            total += y[i] * std::log(ybar[i]);
        }
        total -= ybar[i];
    }
    return total;
}

template <ImagingOperator Op>
double log_likelihood(const Sinogram& sino, const Image& x, const Op& A)
{
    if (!x.nonnegative()) {
        throw std::invalid_argument("log_likelihood: image has negative entries");
    }
    return log_likelihood_from_mean(sino.counts, forward_mean(A, x, sino.additive));
}

/// Gradient of the log-likelihood w.r.t. x: A^T (y / ybar) - A.j.
template <ImagingOperator Op>
Image log_likelihood_gradient(const Sinogram& sino, const Image& x, const Op& A)
{
    const auto ybar = forward_mean(A, x, sino.additive);
    std::vector<double> ratio(ybar.size());
    for (std::size_t i = 0; i < ratio.size(); ++i) {
        ratio[i] = sino.counts[i] > 0.0 ? sino.counts[i] / ybar[i] : 0.0;
    }
    Image g = backproject(A, ratio);
    const auto sens = A.column_sums();
    for (std::size_t j = 0; j < g.size(); ++j) {
        g[j] -= sens[j];
    }
    return g;
}

/// One ML-EM step: x_em_j = x_j / A.j * sum_i A_ij y_i / ([A x]_i + s_i).
/// Pixels with A.j = 0 are held at 0.
template <ImagingOperator Op>
Image em_update(const Sinogram& sino, const Op& A, const Image& x)
{
    require_same_grid(A.grid(), x.grid(), "em_update");
    if (sino.size() != A.rows()) {
        throw std::invalid_argument("em_update: sinogram length does not match system matrix");
    }
    if (!x.nonnegative()) {
        throw std::invalid_argument("em_update: image has negative entries");
    }
    const auto ybar = forward_mean(A, x, sino.additive);
    std::vector<double> ratio(ybar.size(), 0.0);
    for (std::size_t i = 0; i < ratio.size(); ++i) {
        const double y = sino.counts[i];
        if (y == 0.0) {
            continue;
        }
        if (ybar[i] == 0.0) {
            throw ModelError("em_update: bin " + std::to_string(i) +
                             " has positive counts but zero expected value");
        }
        ratio[i] = y / std::max(ybar[i], kEmGuard);
    }
    Image out = backproject(A, ratio);
    const auto sens = A.column_sums();
    for (std::size_t j = 0; j < out.size(); ++j) {
        out[j] = sens[j] > 0.0 ? x[j] / sens[j] * out[j] : 0.0;
    }
    return out;
}

/// Separable EM surrogate at expansion point x_n: sum_j A.j (x_em_j log x_j - x_j).
template <ImagingOperator Op>
double surrogate_value(const Image& x, const Image& x_n, const Sinogram& sino, const Op& A)
{
    require_same_grid(x.grid(), x_n.grid(), "surrogate_value");
    const Image x_em = em_update(sino, A, x_n);
    const auto sens = A.column_sums();
    double total = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) {
        if (sens[j] <= 0.0) {
            continue;
        }
        if (x_em[j] > 0.0) {
            if (x[j] <= 0.0) {
                throw std::invalid_argument("surrogate_value: nonpositive pixel where the EM image is positive");
            }
            total += sens[j] * (x_em[j] * std::log(x[j]) - x[j]);
        } else {
            total -= sens[j] * x[j];
        }
    }
    return total;
}

/// Maximizer over x >= 0 of A.j (x_em log x - x) - rho/2 (x - target)^2:
///   x = (b + sqrt(b^2 + 4 x_em A.j / rho)) / 2,  b = target - A.j / rho.
/// For b < 0 the algebraically equal form 2c / (sqrt(b^2 + 4c) - b) avoids cancellation.
inline double penalized_pixel_update(double x_em, double sens, double rho, double target)
{
    if (!(rho > 0.0)) {
        throw std::invalid_argument("penalized_pixel_update: rho must be positive");
    }
    if (!(sens > 0.0)) {
        throw std::invalid_argument("penalized_pixel_update: A.j must be positive");
    }
    if (!(x_em >= 0.0)) {
        throw std::invalid_argument("penalized_pixel_update: x_em must be >= 0");
    }
    const double b = target - sens / rho;
    const double c = x_em * sens / rho;
    const double root = std::hypot(b, 2.0 * std::sqrt(c));
    if (b >= 0.0) {
        return 0.5 * (b + root);
    }
    const double denom = root - b;
    return denom > 0.0 ? 2.0 * c / denom : 0.0;
}

/// Uniform (sum y - sum s) / sum_j A.j on pixels with A.j > 0, zero elsewhere.
/// Falls back to sum y / sum A.j (then 1) when that level is not positive.
template <ImagingOperator Op>
Image default_initial_image(const Sinogram& sino, const Op& A)
{
    const auto sens = A.column_sums();
    const double sens_total = std::accumulate(sens.begin(), sens.end(), 0.0);
    const double y_total = std::accumulate(sino.counts.begin(), sino.counts.end(), 0.0);
    const double s_total = std::accumulate(sino.additive.begin(), sino.additive.end(), 0.0);
    double level = sens_total > 0.0 ? (y_total - s_total) / sens_total : 0.0;
    if (!(level > 0.0)) {
        level = sens_total > 0.0 ? y_total / sens_total : 0.0;
    }
    if (!(level > 0.0)) {
        level = 1.0;
    }
    Image x(A.grid());
    for (std::size_t j = 0; j < x.size(); ++j) {
        x[j] = sens[j] > 0.0 ? level : 0.0;
    }
    return x;
}

/// Called after each iteration with (iteration number starting at 1, current image).
using IterationCallback = std::function<void(int, const Image&)>;

template <ImagingOperator Op>
Image mlem_reconstruct(const Sinogram& sino, const Op& A, int n_iters, Image x0,
                       const IterationCallback& on_iteration = {})
{
    if (n_iters < 0) {
        throw std::invalid_argument("mlem_reconstruct: negative iteration count");
    }
    require_same_grid(A.grid(), x0.grid(), "mlem_reconstruct");
    const auto sens = A.column_sums();
    for (std::size_t j = 0; j < x0.size(); ++j) {
        if (sens[j] > 0.0 && !(x0[j] > 0.0)) {
            throw std::invalid_argument("mlem_reconstruct: x0 must be positive on supported pixels");
        }
    }
    for (int n = 1; n <= n_iters; ++n) {
        x0 = em_update(sino, A, x0);
        if (on_iteration) {
            on_iteration(n, x0);
        }
    }
    return x0;
}

/// Normalized 1D Gaussian taps for the given FWHM (pixels), truncated at 4 sigma.
inline std::vector<double> gaussian_taps(double fwhm_px)
{
    if (!(fwhm_px > 0.0)) {
        throw std::invalid_argument("gaussian_filter: fwhm must be positive");
    }
    const double sigma = fwhm_px / 2.3548;
    const int radius = std::max(1, static_cast<int>(std::ceil(4.0 * sigma)));
    std::vector<double> taps(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0.0;
    for (int k = -radius; k <= radius; ++k) {
        const double w = std::exp(-0.5 * (k * k) / (sigma * sigma));
        taps[static_cast<std::size_t>(k + radius)] = w;
        sum += w;
    }
    for (auto& w : taps) {
        w /= sum;
    }
    return taps;
}

/// Separable Gaussian smoothing with symmetric (edge-repeating) borders; fwhm in pixels.
inline Image gaussian_filter(const Image& img, double fwhm_px)
{
    const auto taps = gaussian_taps(fwhm_px);
    const int radius = static_cast<int>(taps.size() / 2);
    const int w = img.width();
    const int h = img.height();
    Image tmp(img.grid());
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int k = -radius; k <= radius; ++k) {
                acc += taps[static_cast<std::size_t>(k + radius)] * img.at(reflect_index(x + k, w), y);
            }
            tmp.at(x, y) = acc;
        }
    }
    Image out(img.grid());
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int k = -radius; k <= radius; ++k) {
                acc += taps[static_cast<std::size_t>(k + radius)] * tmp.at(x, reflect_index(y + k, h));
            }
            out.at(x, y) = acc;
        }
    }
    return out;
}

} // namespace petrep
