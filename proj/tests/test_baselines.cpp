#include "petrep/baselines.hpp"
#include "petrep/simulator.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

using namespace petrep;

namespace {

std::vector<std::map<int, double>> rows_of(const SparseMatrix& K)
{
    std::vector<std::map<int, double>> rows(K.rows());
    for (const auto& t : K.triplets()) {
        rows[static_cast<std::size_t>(t.row)][t.col] = t.value;
    }
    return rows;
}

// All-pairs kNN on 3x3 reflected patches, written independently of the library.
std::vector<std::map<int, double>> brute_force_kernel(const Image& prior, int k)
{
    const int w = prior.width();
    const int h = prior.height();
    const int n = w * h;
    auto pix = [&](int x, int y) {
        auto refl = [](int i, int len) {
            if (i < 0) {
                return -i - 1;
            }
            if (i >= len) {
                return 2 * len - 1 - i;
            }
            return i;
        };
        return prior.at(refl(x, w), refl(y, h));
    };
    auto dist2 = [&](int i, int j) {
        double d = 0.0;
        for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
                const double r = pix(i % w + dx, i / w + dy) - pix(j % w + dx, j / w + dy);
                d += r * r;
            }
        }
        return d;
    };
    std::vector<std::vector<std::pair<double, int>>> nn(static_cast<std::size_t>(n));
    double dsum = 0.0;
    int dcount = 0;
    for (int i = 0; i < n; ++i) {
        std::vector<std::pair<double, int>> all;
        for (int j = 0; j < n; ++j) {
            all.emplace_back(dist2(i, j), j);
        }
        std::sort(all.begin(), all.end(), [&](const auto& a, const auto& b) {
            if (a.first != b.first) {
                return a.first < b.first;
            }
            if ((a.second == i) != (b.second == i)) {
                return a.second == i;
            }
            return a.second < b.second;
        });
        all.resize(static_cast<std::size_t>(k));
        for (const auto& [d, j] : all) {
            if (d > 0.0) {
                dsum += std::sqrt(d);
                ++dcount;
            }
        }
        nn[static_cast<std::size_t>(i)] = all;
    }
    const double sigma = dsum / dcount;
    std::vector<std::map<int, double>> rows(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        double total = 0.0;
        for (const auto& [d, j] : nn[static_cast<std::size_t>(i)]) {
            total += std::exp(-d / (2.0 * sigma * sigma));
        }
        for (const auto& [d, j] : nn[static_cast<std::size_t>(i)]) {
            rows[static_cast<std::size_t>(i)][j] = std::exp(-d / (2.0 * sigma * sigma)) / total;
        }
    }
    return rows;
}

SparseMatrix identity(std::size_t n)
{
    std::vector<SparseMatrix::Triplet> t;
    for (std::size_t i = 0; i < n; ++i) {
        t.push_back({static_cast<std::int32_t>(i), static_cast<std::int32_t>(i), 1.0});
    }
    return SparseMatrix(n, n, std::move(t));
}

struct Problem {
    ImageGrid grid{16, 16, 4.0};
    SystemMatrix A;
    Image truth;
    Sinogram data;
};

Problem problem(std::uint64_t seed, double total = 3e4)
{
    Problem p;
    p.A = build_system_matrix(p.grid, ProjectionGeometry::covering(p.grid));
    std::mt19937_64 rng(seed);
    p.truth = testutil::random_image(p.grid, rng, 0.5, 2.0);
    p.data = simulate_counts(p.A, p.truth, 0.1, total, seed).sinogram;
    return p;
}

} // namespace

TEST(KernelMatrix, OneNeighborIsIdentity)
{
    const ImageGrid g{10, 10, 1.0};
    std::mt19937_64 rng(1);
    KernelConfig cfg;
    cfg.neighbors = 1;
    const auto rows = rows_of(build_kernel_matrix(testutil::random_image(g, rng), cfg));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        ASSERT_EQ(rows[i].size(), 1u);
        EXPECT_EQ(rows[i].begin()->first, static_cast<int>(i));
        EXPECT_EQ(rows[i].begin()->second, 1.0);
    }
}

TEST(KernelMatrix, ConstantPriorGivesEqualWeights)
{
    const ImageGrid g{8, 8, 1.0};
    KernelConfig cfg;
    cfg.neighbors = 5;
    const auto rows = rows_of(build_kernel_matrix(Image(g, 2.0), cfg));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        ASSERT_EQ(rows[i].size(), 5u);
        EXPECT_TRUE(rows[i].count(static_cast<int>(i)));
        for (const auto& [j, v] : rows[i]) {
            EXPECT_DOUBLE_EQ(v, 0.2);
        }
    }
    // pixel 0: itself, then the four lowest indices inside its window
    EXPECT_EQ(rows[0].rbegin()->first, 4);
}

TEST(KernelMatrix, MatchesBruteForceKnn)
{
    const ImageGrid g{16, 16, 1.0};
    std::mt19937_64 rng(2);
    const Image prior = testutil::random_image(g, rng);
    KernelConfig cfg;
    cfg.neighbors = 9;
    cfg.search_radius = 16;
    const auto got = rows_of(build_kernel_matrix(prior, cfg));
    const auto expected = brute_force_kernel(prior, 9);
    ASSERT_EQ(got.size(), expected.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
        ASSERT_EQ(got[i].size(), expected[i].size());
        for (const auto& [j, v] : expected[i]) {
            ASSERT_TRUE(got[i].count(j)) << "row " << i << " missing column " << j;
            EXPECT_NEAR(got[i].at(j), v, 1e-12);
        }
    }
}

TEST(KernelMatrix, RowsAreStochastic)
{
    const auto pair = make_phantom(PhantomSpec::brain());
    const SparseMatrix K = build_kernel_matrix(pair.prior);
    std::vector<double> ones(K.cols(), 1.0);
    std::vector<double> sums(K.rows());
    K.apply(ones, sums);
    for (double s : sums) {
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
    for (const auto& t : K.triplets()) {
        EXPECT_GT(t.value, 0.0);
    }
}

TEST(KernelMatrix, FixedBandwidthAndUnnormalizedRows)
{
    const ImageGrid g{6, 6, 1.0};
    std::mt19937_64 rng(3);
    const Image prior = testutil::random_image(g, rng);
    KernelConfig cfg;
    cfg.neighbors = 4;
    cfg.sigma = 0.5;
    cfg.normalize_rows = false;
    for (const auto& t : build_kernel_matrix(prior, cfg).triplets()) {
        if (t.row == t.col) {
            EXPECT_EQ(t.value, 1.0);
        }
        EXPECT_LE(t.value, 1.0);
    }
}

TEST(KernelMatrix, RejectsInvalidInput)
{
    const ImageGrid g{3, 3, 1.0};
    KernelConfig cfg;
    cfg.neighbors = 10;
    EXPECT_THROW(build_kernel_matrix(Image(g, 1.0), cfg), std::invalid_argument);
    cfg.neighbors = 0;
    EXPECT_THROW(build_kernel_matrix(Image(g, 1.0), cfg), std::invalid_argument);
    cfg.neighbors = 2;
    cfg.sigma = -1.0;
    EXPECT_THROW(build_kernel_matrix(Image(g, 1.0), cfg), std::invalid_argument);
}

TEST(KernelEm, IdentityKernelIsMlem)
{
    const auto p = problem(4);
    const SparseMatrix K = identity(p.grid.size());
    const Image a = kernel_em_reconstruct(p.data, p.A, K, 25);
    const Image b = mlem_reconstruct(p.data, p.A, 25, default_initial_image(p.data, p.A));
    for (std::size_t j = 0; j < a.size(); ++j) {
        EXPECT_LE(testutil::rel_diff(a[j], b[j]), 1e-12);
    }
}

TEST(KernelEm, LikelihoodNonDecreasing)
{
    const auto p = problem(5);
    std::mt19937_64 rng(6);
    const SparseMatrix K = build_kernel_matrix(testutil::random_image(p.grid, rng));
    std::vector<double> L;
    kernel_em_reconstruct(p.data, p.A, K, 60, std::nullopt,
                          [&](int, const Image& x) { L.push_back(log_likelihood(p.data, x, p.A)); });
    ASSERT_EQ(L.size(), 60u);
    for (std::size_t n = 1; n < L.size(); ++n) {
        EXPECT_GE(L[n], L[n - 1] - 1e-9 * std::fabs(L[n - 1]));
    }
}

TEST(KernelEm, ConstantCoefficientsMapToConstantImage)
{
    const ImageGrid g{12, 12, 1.0};
    std::mt19937_64 rng(7);
    const SparseMatrix K = build_kernel_matrix(testutil::random_image(g, rng));
    const Image x = apply_kernel(K, Image(g, 1.7));
    for (double v : x.values()) {
        EXPECT_NEAR(v, 1.7, 1e-12);
    }
}

TEST(KernelEm, ProjectedMassMatchesDataOnNoiseFreeInput)
{
    const auto p = problem(8);
    const Sinogram clean(*p.A.geometry(), project(p.A, p.truth));
    std::mt19937_64 rng(9);
    const SparseMatrix K = build_kernel_matrix(testutil::random_image(p.grid, rng));
    const Image x = kernel_em_reconstruct(clean, p.A, K, 300);
    const auto proj = project(p.A, x);
    double a = 0.0;
    double b = 0.0;
    for (std::size_t i = 0; i < proj.size(); ++i) {
        a += proj[i];
        b += clean.counts[i];
    }
    EXPECT_NEAR(a / b, 1.0, 1e-3);
}

TEST(EmFilter, ZeroWidthIsMlemAndCompositionHolds)
{
    const auto p = problem(10);
    const Image em = mlem_reconstruct(p.data, p.A, 30, default_initial_image(p.data, p.A));
    const Image unfiltered = em_filter_reconstruct(p.data, p.A, 30, 0.0);
    for (std::size_t j = 0; j < em.size(); ++j) {
        EXPECT_LE(testutil::rel_diff(unfiltered[j], em[j]), 1e-6);
    }
    EXPECT_EQ(em_filter_reconstruct(p.data, p.A, 30, 2.5), gaussian_filter(em, 2.5));
    EXPECT_THROW(em_filter_reconstruct(p.data, p.A, 30, -1.0), std::invalid_argument);
}

TEST(EmFilter, EnsembleStdFallsWithFilterWidth)
{
    const auto p = problem(11, 2e4);
    std::vector<Sinogram> reps;
    for (std::uint64_t r = 0; r < 8; ++r) {
        reps.push_back(simulate_counts(p.A, p.truth, 0.1, 2e4, 100 + r).sinogram);
    }
    const RoiMask roi = circular_roi(p.grid, 0.0, 0.0, 24.0);
    auto ensemble_sd = [&](double fwhm) {
        std::vector<double> means;
        for (const auto& y : reps) {
            means.push_back(roi.mean(em_filter_reconstruct(y, p.A, 40, fwhm)));
        }
        double m = 0.0;
        for (double v : means) {
            m += v;
        }
        m /= static_cast<double>(means.size());
        double s = 0.0;
        for (double v : means) {
            s += (v - m) * (v - m);
        }
        return std::sqrt(s / static_cast<double>(means.size() - 1)) / m;
    };
    double prev = ensemble_sd(0.0);
    for (double fwhm : {1.0, 2.0, 4.0}) {
        const double cur = ensemble_sd(fwhm);
        EXPECT_LT(cur, prev) << "fwhm " << fwhm;
        prev = cur;
    }
}

TEST(Nlm, ConstantGuideGivesBoxAverage)
{
    const ImageGrid g{9, 7, 1.0};
    std::mt19937_64 rng(12);
    const Image noisy = testutil::random_image(g, rng);
    const Image out = nlm_guided_filter(noisy, Image(g, 1.0));
    for (int y = 0; y < g.height; ++y) {
        for (int x = 0; x < g.width; ++x) {
            double s = 0.0;
            int c = 0;
            for (int v = std::max(0, y - 2); v <= std::min(g.height - 1, y + 2); ++v) {
                for (int u = std::max(0, x - 2); u <= std::min(g.width - 1, x + 2); ++u) {
                    s += noisy.at(u, v);
                    ++c;
                }
            }
            EXPECT_NEAR(out.at(x, y), s / c, 1e-14);
        }
    }
}

TEST(Nlm, TinyStrengthReturnsInput)
{
    const ImageGrid g{12, 12, 1.0};
    std::mt19937_64 rng(13);
    const Image noisy = testutil::random_image(g, rng);
    const Image guide = testutil::random_image(g, rng);
    NlmConfig cfg;
    cfg.h = 1e-3;
    const Image out = nlm_guided_filter(noisy, guide, cfg);
    for (std::size_t j = 0; j < noisy.size(); ++j) {
        EXPECT_NEAR(out[j], noisy[j], 1e-10);
    }
}

TEST(Nlm, MatchesDoubleLoopOracle)
{
    const ImageGrid g{32, 32, 1.0};
    std::mt19937_64 rng(14);
    const Image noisy = testutil::random_image(g, rng);
    const Image guide = testutil::random_image(g, rng);
    NlmConfig cfg;
    cfg.h = 0.8;
    const Image out = nlm_guided_filter(noisy, guide, cfg);
    auto gp = [&](int x, int y) {
        auto refl = [](int i, int n) { return i < 0 ? -i - 1 : (i >= n ? 2 * n - 1 - i : i); };
        return guide.at(refl(x, g.width), refl(y, g.height));
    };
    double worst = 0.0;
    for (int y = 0; y < g.height; ++y) {
        for (int x = 0; x < g.width; ++x) {
            double num = 0.0;
            double den = 0.0;
            for (int v = y - 2; v <= y + 2; ++v) {
                for (int u = x - 2; u <= x + 2; ++u) {
                    if (u < 0 || v < 0 || u >= g.width || v >= g.height) {
                        continue;
                    }
                    double d = 0.0;
                    for (int b = -1; b <= 1; ++b) {
                        for (int a = -1; a <= 1; ++a) {
                            const double r = gp(x + a, y + b) - gp(u + a, v + b);
                            d += r * r;
                        }
                    }
                    const double w = std::exp(-d / (cfg.h * cfg.h));
                    num += w * noisy.at(u, v);
                    den += w;
                }
            }
            worst = std::max(worst, std::fabs(out.at(x, y) - num / den));
        }
    }
    EXPECT_LE(worst, 1e-10);
}

TEST(Nlm, GuideShiftInvariance)
{
    const ImageGrid g{16, 16, 1.0};
    std::mt19937_64 rng(15);
    const Image noisy = testutil::random_image(g, rng);
    const Image guide = testutil::random_image(g, rng);
    Image shifted = guide;
    for (auto& v : shifted.values()) {
        v += 5.0;
    }
    NlmConfig cfg;
    cfg.h = 0.5;
    const Image a = nlm_guided_filter(noisy, guide, cfg);
    const Image b = nlm_guided_filter(noisy, shifted, cfg);
    for (std::size_t j = 0; j < a.size(); ++j) {
        EXPECT_NEAR(a[j], b[j], 1e-12);
    }
}

TEST(Nlm, WeightsAreSymmetric)
{
    // Filtering a delta at j reads off the normalized weight n_ij = w_ij / den_i; since
    // w_ii = 1, the ratio n_ij / n_ii recovers the raw weight w_ij.
    const ImageGrid g{10, 10, 1.0};
    std::mt19937_64 rng(16);
    const Image guide = testutil::random_image(g, rng);
    NlmConfig cfg;
    cfg.h = 0.7;
    auto normalized = [&](std::size_t i, std::size_t j) {
        Image delta(g);
        delta[j] = 1.0;
        return nlm_guided_filter(delta, guide, cfg)[i];
    };
    for (const auto& [a, b] : {std::pair{g.index(4, 4), g.index(5, 6)}, std::pair{g.index(0, 0), g.index(2, 1)},
                               std::pair{g.index(9, 3), g.index(7, 5)}}) {
        const double wab = normalized(a, b) / normalized(a, a);
        const double wba = normalized(b, a) / normalized(b, b);
        EXPECT_GT(wab, 0.0);
        EXPECT_NEAR(wab, wba, 1e-12 * std::max(1.0, wab));
    }
}

TEST(Nlm, RejectsInvalidConfig)
{
    const ImageGrid g{4, 4, 1.0};
    NlmConfig cfg;
    cfg.window = 4;
    EXPECT_THROW(nlm_guided_filter(Image(g), Image(g), cfg), std::invalid_argument);
    cfg = {};
    cfg.h = 0.0;
    EXPECT_THROW(nlm_guided_filter(Image(g), Image(g), cfg), std::invalid_argument);
    EXPECT_THROW(nlm_guided_filter(Image(g), Image(ImageGrid{4, 5, 1.0}), NlmConfig{}), std::invalid_argument);
}

TEST(KernelCsv, RoundTripAndErrors)
{
    testutil::TempDir dir;
    const ImageGrid g{8, 8, 1.0};
    std::mt19937_64 rng(17);
    const SparseMatrix K = build_kernel_matrix(testutil::random_image(g, rng));
    save_kernel_csv(K, dir / "k.csv");
    const SparseMatrix L = load_kernel_csv(dir / "k.csv");
    EXPECT_EQ(L.rows(), K.rows());
    EXPECT_EQ(L.cols(), K.cols());
    const auto a = K.triplets();
    const auto b = L.triplets();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t k = 0; k < a.size(); ++k) {
        EXPECT_EQ(a[k].row, b[k].row);
        EXPECT_EQ(a[k].col, b[k].col);
        EXPECT_EQ(a[k].value, b[k].value);
    }

    write_file_atomic(dir / "bad.csv", "row,col,weight\n# 2,2\n0,x,1\n");
    EXPECT_THROW(load_kernel_csv(dir / "bad.csv"), FormatError);
    write_file_atomic(dir / "range.csv", "row,col,weight\n# 2,2\n0,5,1\n");
    EXPECT_THROW(load_kernel_csv(dir / "range.csv"), FormatError);
    write_file_atomic(dir / "nohdr.csv", "0,0,1\n");
    EXPECT_THROW(load_kernel_csv(dir / "nohdr.csv"), FormatError);
}
