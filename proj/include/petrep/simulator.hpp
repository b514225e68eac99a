#pragma once

#include "petrep/forward_model.hpp"
#include "petrep/image.hpp"
#include "petrep/random.hpp"

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace petrep {

struct Ellipse {
    double center_x = 0.0; // mm
    double center_y = 0.0;
    double axis_x = 1.0; // semi-axes, mm
    double axis_y = 1.0;
    double rotation = 0.0; // rad
    std::string label;

    [[nodiscard]] bool contains(double x, double y) const noexcept
    {
        const double c = std::cos(rotation);
        const double s = std::sin(rotation);
        const double dx = x - center_x;
        const double dy = y - center_y;
        const double u = (c * dx + s * dy) / axis_x;
        const double v = (-s * dx + c * dy) / axis_y;
        return u * u + v * v <= 1.0;
    }
};

struct TumorInsert {
    double center_x = 0.0; // mm
    double center_y = 0.0;
    double diameter = 16.0; // mm
    double activity = 8.0;
};

/// Ellipses are painted in list order, so later (inner) ellipses override earlier ones.
/// Tumors overwrite the activity image only.
struct PhantomSpec {
    ImageGrid grid{64, 64, 3.0};
    std::vector<Ellipse> ellipses;
    std::map<std::string, double> activities;
    std::map<std::string, double> prior_intensities;
    std::vector<TumorInsert> tumors;
    std::uint64_t seed = 0;

    /// Gray/white/ventricle brain slice with deep nuclei, cortical folds and three
    /// 16 mm tumors absent from the prior.
    static PhantomSpec brain(ImageGrid grid = {64, 64, 3.0})
    {
        PhantomSpec spec;
        spec.grid = grid;
        spec.ellipses = {
            {0.0, 0.0, 74.0, 90.0, 0.0, "skull"},
            {0.0, 0.0, 68.0, 84.0, 0.0, "gray"},
            {0.0, 0.0, 58.0, 74.0, 0.0, "white"},
            {0.0, 70.0, 6.0, 12.0, 0.0, "gray"},
            {-48.0, 30.0, 11.0, 5.0, 0.5, "gray"},
            {48.0, 30.0, 11.0, 5.0, -0.5, "gray"},
            {-47.0, -34.0, 11.0, 5.0, -0.5, "gray"},
            {47.0, -34.0, 11.0, 5.0, 0.5, "gray"},
            {0.0, -70.0, 5.0, 10.0, 0.0, "gray"},
            {-20.0, -8.0, 8.0, 13.0, 0.2, "gray"},
            {20.0, -8.0, 8.0, 13.0, -0.2, "gray"},
            {-8.0, 8.0, 5.0, 16.0, 0.25, "ventricle"},
            {8.0, 8.0, 5.0, 16.0, -0.25, "ventricle"},
        };
        spec.activities = {{"skull", 0.0}, {"gray", 4.0}, {"white", 1.0}, {"ventricle", 0.5}};
        spec.prior_intensities = {{"skull", 0.3}, {"gray", 0.6}, {"white", 1.0}, {"ventricle", 0.2}};
        spec.tumors = {{-28.0, 40.0, 16.0, 8.0}, {30.0, 38.0, 16.0, 8.0}, {0.0, -46.0, 16.0, 8.0}};
        return spec;
    }
};

struct PhantomPair {
    Image activity;
    Image prior;
    std::vector<RoiMask> tumor_masks;
    std::map<std::string, RoiMask> tissue_masks;
    Image activity_without_tumors;
};

inline PhantomPair make_phantom(const PhantomSpec& spec)
{
    spec.grid.validate();
    if (spec.ellipses.empty()) {
        throw std::invalid_argument("make_phantom: ellipse list is empty");
    }
    for (const auto& e : spec.ellipses) {
        if (!spec.activities.contains(e.label) || !spec.prior_intensities.contains(e.label)) {
            throw std::invalid_argument("make_phantom: tissue '" + e.label +
                                        "' lacks an activity or prior intensity");
        }
        if (!(e.axis_x > 0.0 && e.axis_y > 0.0)) {
            throw std::invalid_argument("make_phantom: ellipse axes must be positive");
        }
    }
    for (const auto& [label, a] : spec.activities) {
        if (!(a >= 0.0)) {
            throw std::invalid_argument("make_phantom: activity for '" + label + "' is negative");
        }
    }
    for (const auto& t : spec.tumors) {
        if (!(t.activity >= 0.0) || !(t.diameter > 0.0)) {
            throw std::invalid_argument("make_phantom: tumor needs diameter > 0 and activity >= 0");
        }
    }

    const ImageGrid& g = spec.grid;
    std::vector<int> label_of(g.size(), -1);
    for (int iy = 0; iy < g.height; ++iy) {
        for (int ix = 0; ix < g.width; ++ix) {
            for (std::size_t k = 0; k < spec.ellipses.size(); ++k) {
                if (spec.ellipses[k].contains(g.center_x(ix), g.center_y(iy))) {
                    label_of[g.index(ix, iy)] = static_cast<int>(k);
                }
            }
        }
    }

    PhantomPair pair{Image(g), Image(g), {}, {}, Image(g)};
    for (std::size_t j = 0; j < g.size(); ++j) {
        if (label_of[j] < 0) {
            continue;
        }
        const auto& label = spec.ellipses[static_cast<std::size_t>(label_of[j])].label;
        pair.activity[j] = spec.activities.at(label);
        pair.prior[j] = spec.prior_intensities.at(label);
        auto& mask = pair.tissue_masks[label];
        if (mask.members.empty()) {
            mask = RoiMask{g, std::vector<bool>(g.size(), false), label};
        }
        mask.members[j] = true;
    }
    pair.activity_without_tumors = pair.activity;
    for (std::size_t t = 0; t < spec.tumors.size(); ++t) {
        const auto& tumor = spec.tumors[t];
        RoiMask m = circular_roi(g, tumor.center_x, tumor.center_y, tumor.diameter,
                                 "tumor" + std::to_string(t));
        for (std::size_t j = 0; j < g.size(); ++j) {
            if (m.members[j]) {
                pair.activity[j] = tumor.activity;
            }
        }
        pair.tumor_masks.push_back(std::move(m));
    }
    return pair;
}

/// Union of several masks.
inline RoiMask union_mask(const std::vector<RoiMask>& masks, std::string label)
{
    if (masks.empty()) {
        throw std::invalid_argument("union_mask: no masks");
    }
    RoiMask out{masks.front().grid, std::vector<bool>(masks.front().grid.size(), false), std::move(label)};
    for (const auto& m : masks) {
        require_same_grid(out.grid, m.grid, "union_mask");
        for (std::size_t j = 0; j < m.members.size(); ++j) {
            if (m.members[j]) {
                out.members[j] = true;
            }
        }
    }
    return out;
}

/// Places up to `count` circles of `diameter` mm fully inside `region`, clear of
/// `exclude` (by one pixel), spread out by greedy farthest-point selection.
inline std::vector<CircleRoi> place_background_rois(const RoiMask& region, const RoiMask* exclude,
                                                    int count, double diameter,
                                                    const std::string& label_prefix = "background")
{
    const ImageGrid& g = region.grid;
    const double margin = g.pixel_size;
    std::vector<CircleRoi> candidates;
    for (int iy = 0; iy < g.height; ++iy) {
        for (int ix = 0; ix < g.width; ++ix) {
            const double cx = g.center_x(ix);
            const double cy = g.center_y(iy);
            bool ok = true;
            const double r_in = 0.5 * diameter;
            const double r_ex = r_in + margin;
            for (int jy = 0; jy < g.height && ok; ++jy) {
                for (int jx = 0; jx < g.width && ok; ++jx) {
                    const double dx = g.center_x(jx) - cx;
                    const double dy = g.center_y(jy) - cy;
                    const double d2 = dx * dx + dy * dy;
                    const auto j = g.index(jx, jy);
                    if (d2 <= r_in * r_in && !region.members[j]) {
                        ok = false;
                    }
                    if (exclude != nullptr && d2 <= r_ex * r_ex && exclude->members[j]) {
                        ok = false;
                    }
                }
            }
            if (ok) {
                candidates.push_back({cx, cy, diameter, {}});
            }
        }
    }
    std::vector<CircleRoi> chosen;
    if (candidates.empty() || count < 1) {
        return chosen;
    }
    double mx = 0.0;
    double my = 0.0;
    for (const auto& c : candidates) {
        mx += c.center_x;
        my += c.center_y;
    }
    mx /= static_cast<double>(candidates.size());
    my /= static_cast<double>(candidates.size());
    std::size_t first = 0;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < candidates.size(); ++k) {
        const double d = std::hypot(candidates[k].center_x - mx, candidates[k].center_y - my);
        if (d < best) {
            best = d;
            first = k;
        }
    }
    chosen.push_back(candidates[first]);
    while (static_cast<int>(chosen.size()) < count) {
        std::size_t pick = candidates.size();
        double far = -1.0;
        for (std::size_t k = 0; k < candidates.size(); ++k) {
            double dmin = std::numeric_limits<double>::infinity();
            for (const auto& c : chosen) {
                dmin = std::min(dmin, std::hypot(candidates[k].center_x - c.center_x,
                                                 candidates[k].center_y - c.center_y));
            }
            if (dmin >= diameter && dmin > far) {
                far = dmin;
                pick = k;
            }
        }
        if (pick == candidates.size()) {
            break;
        }
        chosen.push_back(candidates[pick]);
    }
    for (std::size_t k = 0; k < chosen.size(); ++k) {
        chosen[k].label = label_prefix + std::to_string(k);
    }
    return chosen;
}

/// Noisy sinogram plus the factor that maps phantom activity to the data's image scale.
struct SimulatedData {
    Sinogram sinogram;
    double activity_scale = 1.0;
};

namespace detail {

inline std::vector<double> draw_poisson(std::span<const double> mean, std::uint64_t seed)
{
    Rng rng(seed);
    std::vector<double> y(mean.size());
    for (std::size_t i = 0; i < mean.size(); ++i) {
        y[i] = static_cast<double>(rng.poisson(mean[i]));
    }
    return y;
}

} // namespace detail

/// Scales A x_true so that sum(ybar + s) = total_counts with a uniform s carrying
/// s_fraction of the total, then draws independent Poisson counts.
inline SimulatedData simulate_counts(const SystemMatrix& A, const Image& x_true, double s_fraction,
                                     double total_counts, std::uint64_t seed)
{
    if (!(total_counts > 0.0)) {
        throw std::invalid_argument("simulate_counts: total_counts must be positive");
    }
    if (!(s_fraction >= 0.0 && s_fraction < 1.0)) {
        throw std::invalid_argument("simulate_counts: s_fraction must be in [0, 1)");
    }
    if (!x_true.nonnegative()) {
        throw std::invalid_argument("simulate_counts: activity must be nonnegative");
    }
    if (!A.geometry()) {
        throw std::invalid_argument("simulate_counts: system matrix has no projection geometry");
    }
    std::vector<double> p = project(A, x_true);
    const double total_proj = std::accumulate(p.begin(), p.end(), 0.0);
    if (!(total_proj > 0.0)) {
        throw std::invalid_argument("simulate_counts: noise-free projection is identically zero");
    }
    const double scale = (1.0 - s_fraction) * total_counts / total_proj;
    const double s_bin = s_fraction * total_counts / static_cast<double>(p.size());
    std::vector<double> s(p.size(), s_bin);
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = scale * p[i] + s_bin;
    }
    return {Sinogram(*A.geometry(), detail::draw_poisson(p, seed), std::move(s)), scale};
}

/// Data for the tumor-difference protocol: the tumor component is simulated as
/// independent extra counts, so `with_tumor = tumor_free + tumor_only` bin by bin.
struct TumorPairData {
    Sinogram with_tumor;
    Sinogram tumor_free;
    Sinogram tumor_only;
    double activity_scale = 1.0;
};

inline TumorPairData simulate_tumor_pair(const SystemMatrix& A, const PhantomPair& phantom,
                                         double s_fraction, double total_counts, std::uint64_t seed)
{
    if (!(total_counts > 0.0) || !(s_fraction >= 0.0 && s_fraction < 1.0)) {
        throw std::invalid_argument("simulate_tumor_pair: invalid count settings");
    }
    if (!A.geometry()) {
        throw std::invalid_argument("simulate_tumor_pair: system matrix has no projection geometry");
    }
    Image excess(phantom.activity.grid());
    for (std::size_t j = 0; j < excess.size(); ++j) {
        excess[j] = std::max(0.0, phantom.activity[j] - phantom.activity_without_tumors[j]);
    }
    std::vector<double> p0 = project(A, phantom.activity_without_tumors);
    std::vector<double> pt = project(A, excess);
    const double total_proj = std::accumulate(p0.begin(), p0.end(), 0.0) + std::accumulate(pt.begin(), pt.end(), 0.0);
    if (!(total_proj > 0.0)) {
        throw std::invalid_argument("simulate_tumor_pair: noise-free projection is identically zero");
    }
    const double scale = (1.0 - s_fraction) * total_counts / total_proj;
    const double s_bin = s_fraction * total_counts / static_cast<double>(p0.size());
    for (std::size_t i = 0; i < p0.size(); ++i) {
        p0[i] = scale * p0[i] + s_bin;
        pt[i] = scale * pt[i];
    }
    auto y0 = detail::draw_poisson(p0, derive_seed(seed, "tumor-free"));
    auto yt = detail::draw_poisson(pt, derive_seed(seed, "tumor-only"));
    std::vector<double> y(y0.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
        y[i] = y0[i] + yt[i];
    }
    const auto& g = *A.geometry();
    std::vector<double> s(p0.size(), s_bin);
    return {Sinogram(g, std::move(y), s), Sinogram(g, std::move(y0), s),
            Sinogram(g, std::move(yt)), scale};
}

/// Binomial thinning: realization r keeps each count with probability `ratio`, using
/// the stream derive_seed(seed, "thin", r). The additive term is scaled by `ratio`.
inline std::vector<Sinogram> thin_counts(const Sinogram& y, double ratio, int n_realizations,
                                         std::uint64_t seed)
{
    if (!(ratio > 0.0 && ratio <= 1.0)) {
        throw std::invalid_argument("thin_counts: ratio must be in (0, 1]");
    }
    if (n_realizations < 0) {
        throw std::invalid_argument("thin_counts: negative realization count");
    }
    for (double c : y.counts) {
        if (c != std::floor(c)) {
            throw std::invalid_argument("thin_counts: counts must be integer-valued");
        }
    }
    std::vector<Sinogram> out;
    out.reserve(static_cast<std::size_t>(n_realizations));
    for (int r = 0; r < n_realizations; ++r) {
        Rng rng(derive_seed(seed, "thin", static_cast<std::uint64_t>(r)));
        std::vector<double> counts(y.size());
        std::vector<double> add(y.size());
        for (std::size_t i = 0; i < y.size(); ++i) {
            counts[i] = static_cast<double>(rng.binomial(static_cast<std::int64_t>(y.counts[i]), ratio));
            add[i] = y.additive[i] * ratio;
        }
        out.emplace_back(y.geometry, std::move(counts), std::move(add));
    }
    return out;
}

/// Adds N(0, sigma^2) noise per pixel.
inline Image add_gaussian_noise(const Image& img, double sigma, std::uint64_t seed)
{
    Rng rng(seed);
    Image out = img;
    for (std::size_t j = 0; j < out.size(); ++j) {
        out[j] += sigma * rng.normal();
    }
    return out;
}

} // namespace petrep
