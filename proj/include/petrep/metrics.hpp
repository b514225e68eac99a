#pragma once

#include "petrep/image.hpp"
#include "petrep/io.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace petrep {

/// Reconstructions of i.i.d. noise realizations on a shared grid.
class RealizationSet {
  public:
    RealizationSet() = default;
    explicit RealizationSet(std::vector<Image> images) : images_(std::move(images))
    {
        for (const auto& img : images_) {
            require_same_grid(images_.front().grid(), img.grid(), "RealizationSet");
        }
    }

    [[nodiscard]] std::size_t size() const noexcept { return images_.size(); }
    [[nodiscard]] bool empty() const noexcept { return images_.empty(); }
    [[nodiscard]] const std::vector<Image>& images() const noexcept { return images_; }
    [[nodiscard]] const Image& operator[](std::size_t r) const { return images_.at(r); }

    /// ROI mean in each realization.
    [[nodiscard]] std::vector<double> roi_means(const RoiMask& roi) const
    {
        std::vector<double> m;
        m.reserve(images_.size());
        for (const auto& img : images_) {
            m.push_back(roi.mean(img));
        }
        return m;
    }

  private:
    std::vector<Image> images_;
};

inline double mean_of(std::span<const double> v)
{
    double s = 0.0;
    for (double x : v) {
        s += x;
    }
    return s / static_cast<double>(v.size());
}

/// Sample standard deviation (n - 1 denominator).
inline double sample_sd(std::span<const double> v)
{
    if (v.size() < 2) {
        throw std::invalid_argument("sample_sd: need at least two values");
    }
    const double m = mean_of(v);
    double ss = 0.0;
    for (double x : v) {
        ss += (x - m) * (x - m);
    }
    return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

/// CR = mean over realizations of (tumor ROI mean / l_true).
inline double contrast_recovery(const RealizationSet& set, const RoiMask& tumor, double l_true)
{
    if (set.empty()) {
        throw std::invalid_argument("contrast_recovery: no realizations");
    }
    if (!(l_true > 0.0)) {
        throw std::invalid_argument("contrast_recovery: true uptake must be positive");
    }
    return mean_of(set.roi_means(tumor)) / l_true;
}

/// Ensemble noise: per ROI, SD over realizations of the ROI mean divided by the mean of
/// the ROI means; averaged over ROIs.
inline double background_std(const RealizationSet& set, const std::vector<RoiMask>& rois)
{
    if (set.size() < 2) {
        throw std::invalid_argument("background_std: need at least two realizations");
    }
    if (rois.empty()) {
        throw std::invalid_argument("background_std: no background ROIs");
    }
    double total = 0.0;
    for (const auto& roi : rois) {
        const auto m = set.roi_means(roi);
        const double mean = mean_of(m);
        if (mean == 0.0) {
            throw std::domain_error("background_std: zero mean in ROI '" + roi.label + "'");
        }
        total += sample_sd(m) / std::fabs(mean);
    }
    return total / static_cast<double>(rois.size());
}

/// CRC = mean over realizations of (m_target / m_background - 1) / (true_target / true_background - 1).
inline double crc(const RealizationSet& set, const RoiMask& target, const RoiMask& background, double true_target,
                  double true_background)
{
    if (set.empty()) {
        throw std::invalid_argument("crc: no realizations");
    }
    if (true_background == 0.0 || true_target / true_background == 1.0) {
        throw std::domain_error("crc: true contrast is degenerate");
    }
    const double true_c = true_target / true_background - 1.0;
    double total = 0.0;
    for (const auto& img : set.images()) {
        const double mb = background.mean(img);
        if (mb == 0.0) {
            throw std::domain_error("crc: zero background mean");
        }
        total += (target.mean(img) / mb - 1.0) / true_c;
    }
    return total / static_cast<double>(set.size());
}

/// CNR = (lesion mean - pooled muscle mean) / sample SD of the pooled muscle pixels.
inline double cnr(const Image& img, const RoiMask& lesion, const std::vector<RoiMask>& muscle_rois)
{
    std::vector<double> pooled;
    for (const auto& roi : muscle_rois) {
        require_same_grid(roi.grid, img.grid(), "cnr");
        for (std::size_t j = 0; j < roi.members.size(); ++j) {
            if (roi.members[j]) {
                pooled.push_back(img[j]);
            }
        }
    }
    if (pooled.size() < 2) {
        throw std::invalid_argument("cnr: need at least two muscle pixels");
    }
    const double sd = sample_sd(pooled);
    if (sd == 0.0) {
        throw std::domain_error("cnr: muscle region has zero variance");
    }
    return (lesion.mean(img) - mean_of(pooled)) / sd;
}

/// PSNR in dB with the reference maximum as peak.
inline double psnr(const Image& img, const Image& reference)
{
    require_same_grid(img.grid(), reference.grid(), "psnr");
    double mse = 0.0;
    for (std::size_t j = 0; j < img.size(); ++j) {
        const double r = img[j] - reference[j];
        mse += r * r;
    }
    mse /= static_cast<double>(img.size());
    const double peak = *std::max_element(reference.values().begin(), reference.values().end());
    if (!(peak > 0.0)) {
        throw std::domain_error("psnr: reference peak must be positive");
    }
    if (mse == 0.0) {
        return std::numeric_limits<double>::infinity();
    }
    return 10.0 * std::log10(peak * peak / mse);
}

struct CurvePoint {
    int iteration = 0;
    double metric = 0.0;
    double std = 0.0;
};

/// Produces one image per checkpoint for realization r.
using CheckpointRunner = std::function<std::vector<Image>(std::size_t r, const std::vector<int>& checkpoints)>;
using SetMetric = std::function<double(const RealizationSet&)>;

/// Runs every realization once, then evaluates (metric, STD) across realizations at each checkpoint.
inline std::vector<CurvePoint> curve_sweep(std::size_t n_realizations, const std::vector<int>& checkpoints,
                                           const CheckpointRunner& run, const SetMetric& metric,
                                           const SetMetric& noise)
{
    if (checkpoints.empty()) {
        throw std::invalid_argument("curve_sweep: no checkpoints");
    }
    if (n_realizations == 0) {
        throw std::invalid_argument("curve_sweep: no realizations");
    }
    std::vector<std::vector<Image>> by_checkpoint(checkpoints.size());
    for (std::size_t r = 0; r < n_realizations; ++r) {
        auto imgs = run(r, checkpoints);
        if (imgs.size() != checkpoints.size()) {
            throw std::runtime_error("curve_sweep: runner returned the wrong number of checkpoints");
        }
        for (std::size_t c = 0; c < imgs.size(); ++c) {
            by_checkpoint[c].push_back(std::move(imgs[c]));
        }
    }
    std::vector<CurvePoint> points;
    for (std::size_t c = 0; c < checkpoints.size(); ++c) {
        const RealizationSet set(std::move(by_checkpoint[c]));
        points.push_back({checkpoints[c], metric(set), noise(set)});
    }
    return points;
}

inline std::string curve_csv_header() { return "iteration,metric,std,method,seed_set\n"; }

inline std::string curve_to_csv(const std::vector<CurvePoint>& points, const std::string& method, int seed_set,
                                bool header = true)
{
    std::string out = header ? curve_csv_header() : std::string();
    for (const auto& p : points) {
        out += std::to_string(p.iteration) + "," + format_number(p.metric) + "," + format_number(p.std) + "," +
               method + "," + std::to_string(seed_set) + "\n";
    }
    return out;
}

/// Metric value where the curve (in checkpoint order) first reaches `std_level`, by linear
/// interpolation between neighbouring points; empty when the level is never reached.
inline std::optional<double> interpolate_at_std(const std::vector<CurvePoint>& curve, double std_level)
{
    for (std::size_t k = 0; k < curve.size(); ++k) {
        if (curve[k].std == std_level) {
            return curve[k].metric;
        }
        if (k + 1 < curve.size()) {
            const auto& a = curve[k];
            const auto& b = curve[k + 1];
            if ((a.std - std_level) * (b.std - std_level) < 0.0) {
                const double t = (std_level - a.std) / (b.std - a.std);
                return a.metric + t * (b.metric - a.metric);
            }
        }
    }
    return std::nullopt;
}

/// Midpoint of the STD interval covered by both curves, or empty if they do not overlap.
inline std::optional<double> matched_std(const std::vector<CurvePoint>& a, const std::vector<CurvePoint>& b)
{
    if (a.empty() || b.empty()) {
        return std::nullopt;
    }
    auto range = [](const std::vector<CurvePoint>& c) {
        auto [lo, hi] = std::minmax_element(c.begin(), c.end(),
                                            [](const CurvePoint& p, const CurvePoint& q) { return p.std < q.std; });
        return std::pair{lo->std, hi->std};
    };
    const auto [alo, ahi] = range(a);
    const auto [blo, bhi] = range(b);
    const double lo = std::max(alo, blo);
    const double hi = std::min(ahi, bhi);
    if (lo > hi) {
        return std::nullopt;
    }
    return 0.5 * (lo + hi);
}

} // namespace petrep
