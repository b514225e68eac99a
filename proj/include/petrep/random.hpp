#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string_view>

namespace petrep {

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept
{
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

/// Seed for stream `component:index` derived from a root seed.
constexpr std::uint64_t derive_seed(std::uint64_t root, std::string_view component,
                                    std::uint64_t index = 0) noexcept
{
    std::uint64_t h = 0xcbf29ce484222325ull; // FNV-1a
    for (char c : component) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    return mix64(mix64(root ^ h) + index);
}

/// Platform-independent random source. std::mt19937_64's output sequence is fixed by
/// the standard; the std distributions are not, so all variates are generated here.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform on (0, 1).
    double uniform_open() noexcept
    {
        double u = 0.0;
        do {
            u = uniform();
        } while (u == 0.0);
        return u;
    }

    /// Standard normal via Box-Muller; pairs are cached.
    double normal() noexcept
    {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform_open();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    /// Poisson variate: sequential inversion for lambda < 30, PTRS (Hormann 1993) above.
    std::int64_t poisson(double lambda)
    {
        if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
            throw std::invalid_argument("poisson: lambda must be finite and >= 0");
        }
        if (lambda == 0.0) {
            return 0;
        }
        if (lambda < 30.0) {
            return poisson_inversion(lambda);
        }
        return poisson_ptrs(lambda);
    }

    /// Binomial(n, p) variate: inversion when n*min(p,1-p) < 10, BTRS (Hormann 1993) otherwise.
    std::int64_t binomial(std::int64_t n, double p)
    {
        if (n < 0 || !(p >= 0.0 && p <= 1.0)) {
            throw std::invalid_argument("binomial: need n >= 0 and 0 <= p <= 1");
        }
        if (n == 0 || p == 0.0) {
            return 0;
        }
        if (p == 1.0) {
            return n;
        }
        if (p > 0.5) {
            return n - binomial(n, 1.0 - p);
        }
        if (static_cast<double>(n) * p < 10.0) {
            return binomial_inversion(n, p);
        }
        return binomial_btrs(n, p);
    }

    std::mt19937_64& engine() noexcept { return engine_; }

  private:
    std::int64_t poisson_inversion(double lambda)
    {
        double u = uniform();
        double prob = std::exp(-lambda);
        std::int64_t k = 0;
        while (u > prob) {
            u -= prob;
            ++k;
            prob *= lambda / static_cast<double>(k);
            if (prob <= 0.0) {
                break; // tail exhausted in floating point
            }
        }
        return k;
    }

    std::int64_t poisson_ptrs(double lambda)
    {
        const double slam = std::sqrt(lambda);
        const double loglam = std::log(lambda);
        const double b = 0.931 + 2.53 * slam;
        const double a = -0.059 + 0.02483 * b;
        const double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
        const double vr = 0.9277 - 3.6224 / (b - 2.0);
        for (;;) {
            const double u = uniform() - 0.5;
            const double v = uniform();
            const double us = 0.5 - std::fabs(u);
            const auto k = static_cast<std::int64_t>(std::floor((2.0 * a / us + b) * u + lambda + 0.43));
            if (us >= 0.07 && v <= vr) {
                return k;
            }
            if (k < 0 || (us < 0.013 && v > us)) {
                continue;
            }
            const double kd = static_cast<double>(k);
            if (std::log(v) + std::log(inv_alpha) - std::log(a / (us * us) + b) <=
                -lambda + kd * loglam - std::lgamma(kd + 1.0)) {
                return k;
            }
        }
    }

    std::int64_t binomial_inversion(std::int64_t n, double p)
    {
        const double q = 1.0 - p;
        const double s = p / q;
        const double a = static_cast<double>(n + 1) * s;
        double r = std::pow(q, static_cast<double>(n));
        double u = uniform();
        std::int64_t x = 0;
        while (u > r) {
            u -= r;
            ++x;
            if (x > n) {
                return n;
            }
            r *= a / static_cast<double>(x) - s;
        }
        return x;
    }

    std::int64_t binomial_btrs(std::int64_t n, double p)
    {
        const double nd = static_cast<double>(n);
        const double q = 1.0 - p;
        const double spq = std::sqrt(nd * p * q);
        const double b = 1.15 + 2.53 * spq;
        const double a = -0.0873 + 0.0248 * b + 0.01 * p;
        const double c = nd * p + 0.5;
        const double vr = 0.92 - 4.2 / b;
        const double alpha = (2.83 + 5.1 / b) * spq;
        const double lpq = std::log(p / q);
        const double m = std::floor((nd + 1.0) * p);
        const double log_fm = -std::lgamma(m + 1.0) - std::lgamma(nd - m + 1.0) + m * lpq;
        for (;;) {
            const double u = uniform() - 0.5;
            double v = uniform();
            const double us = 0.5 - std::fabs(u);
            const double kf = std::floor((2.0 * a / us + b) * u + c);
            if (kf < 0.0 || kf > nd) {
                continue;
            }
            if (us >= 0.07 && v <= vr) {
                return static_cast<std::int64_t>(kf);
            }
            if (v == 0.0) {
                continue;
            }
            v = std::log(v * alpha / (a / (us * us) + b));
            // log f(k) - log f(m) for the binomial pmf
            const double log_fk = -std::lgamma(kf + 1.0) - std::lgamma(nd - kf + 1.0) + kf * lpq;
            if (v <= log_fk - log_fm) {
                return static_cast<std::int64_t>(kf);
            }
        }
    }

    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace petrep
