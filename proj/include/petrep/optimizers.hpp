#pragma once

#include "petrep/io.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <concepts>
#include <deque>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace petrep {

/// f(x) -> value, writing the gradient into g.
template <class F>
concept DifferentiableObjective = requires(F& f, std::span<const double> x, std::span<double> g) {
    { f(x, g) } -> std::convertible_to<double>;
};

/// losses[n] is the objective after n+1 updates; initial_loss is the value at x0.
struct TrainTrace {
    double initial_loss = 0.0;
    std::vector<double> losses;
    std::vector<double> grad_norms;
    std::vector<double> seconds;

    [[nodiscard]] std::size_t size() const noexcept { return losses.size(); }
    [[nodiscard]] double final_loss() const noexcept { return losses.empty() ? initial_loss : losses.back(); }
};

enum class StopReason { max_iterations, gradient_tolerance, line_search_failed };

inline const char* to_string(StopReason r) noexcept
{
    switch (r) {
    case StopReason::max_iterations: return "max_iterations";
    case StopReason::gradient_tolerance: return "gradient_tolerance";
    case StopReason::line_search_failed: return "line_search_failed";
    }
    return "unknown";
}

struct OptimResult {
    std::vector<double> x;
    TrainTrace trace;
    StopReason reason = StopReason::max_iterations;
};

struct LbfgsConfig {
    int memory = 10;
    int max_iterations = 100;
    double c1 = 1e-4;
    double c2 = 0.9;
    double gradient_tolerance = 1e-12;
    int max_line_search_evals = 25;

    void validate() const
    {
        if (!(c1 > 0.0 && c1 < c2 && c2 < 1.0)) {
            throw std::invalid_argument("LbfgsConfig: need 0 < c1 < c2 < 1");
        }
        if (memory < 1 || max_iterations < 0 || max_line_search_evals < 1) {
            throw std::invalid_argument("LbfgsConfig: memory and eval budget must be >= 1");
        }
    }
};

/// Plain NAG steps on the network loss diverge well below Adam's step size.
inline constexpr double kNagStepSize = 3e-6;

struct FirstOrderConfig {
    double step_size = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double momentum = 0.9;
    int max_iterations = 300;

    void validate() const
    {
        if (!(step_size > 0.0)) {
            throw std::invalid_argument("FirstOrderConfig: step size must be positive");
        }
        if (!(momentum >= 0.0 && momentum < 1.0)) {
            throw std::invalid_argument("FirstOrderConfig: momentum must be in [0, 1)");
        }
        if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
            throw std::invalid_argument("FirstOrderConfig: betas must be in [0, 1)");
        }
        if (max_iterations < 0) {
            throw std::invalid_argument("FirstOrderConfig: negative iteration count");
        }
    }
};

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b)
{
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline bool all_finite(std::span<const double> a)
{
    return std::all_of(a.begin(), a.end(), [](double v) { return std::isfinite(v); });
}

template <class F>
double evaluate_checked(F& f, std::span<const double> x, std::span<double> g, const char* who)
{
    const double v = f(x, g);
    if (!std::isfinite(v) || !all_finite(g)) {
        throw std::runtime_error(std::string(who) + ": objective is not finite at the starting point");
    }
    return v;
}

class Stopwatch {
  public:
    double lap()
    {
        const auto now = std::chrono::steady_clock::now();
        const double s = std::chrono::duration<double>(now - last_).count();
        last_ = now;
        return s;
    }

  private:
    std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
};

/// Minimizer of the cubic interpolating (a, fa, da) and (b, fb, db), or NaN.
inline double cubic_minimizer(double a, double fa, double da, double b, double fb, double db)
{
    const double d1 = da + db - 3.0 * (fa - fb) / (a - b);
    const double disc = d1 * d1 - da * db;
    if (!(disc >= 0.0)) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    const double d2 = std::copysign(std::sqrt(disc), b - a);
    const double denom = db - da + 2.0 * d2;
    if (denom == 0.0) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    return b - (b - a) * (db + d2 - d1) / denom;
}

struct LineSearchPoint {
    double step = 0.0;
    double f = 0.0;
    double slope = 0.0;
    std::vector<double> x;
    std::vector<double> g;
};

/// Strong-Wolfe line search (bracketing + zoom with safeguarded cubic interpolation).
/// Returns true with `out` set to an acceptable point; on failure `out` holds the best
/// sufficient-decrease point seen, if any (out.step > 0).
template <class F>
bool strong_wolfe(F& f, std::span<const double> x0, double f0, std::span<const double> dir, double slope0,
                  double step0, const LbfgsConfig& cfg, LineSearchPoint& out)
{
    const std::size_t n = x0.size();
    int evals = 0;
    LineSearchPoint best;
    best.f = f0;
    auto eval = [&](double step) {
        LineSearchPoint p;
        p.step = step;
        p.x.resize(n);
        p.g.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            p.x[i] = x0[i] + step * dir[i];
        }
        p.f = f(std::span<const double>(p.x), std::span<double>(p.g));
        p.slope = dot(p.g, dir);
        ++evals;
        if (std::isfinite(p.f) && p.f <= f0 + cfg.c1 * step * slope0 && p.f < best.f) {
            best = p;
        }
        return p;
    };
    auto armijo_fails = [&](const LineSearchPoint& p) {
        return !std::isfinite(p.f) || p.f > f0 + cfg.c1 * p.step * slope0;
    };
    auto curvature_ok = [&](const LineSearchPoint& p) { return std::fabs(p.slope) <= -cfg.c2 * slope0; };

    auto zoom = [&](LineSearchPoint lo, LineSearchPoint hi) -> bool {
        while (evals < cfg.max_line_search_evals) {
            const double a = lo.step;
            const double b = hi.step;
            double t = std::isfinite(hi.f) ? cubic_minimizer(a, lo.f, lo.slope, b, hi.f, hi.slope)
                                           : std::numeric_limits<double>::quiet_NaN();
            const double lo_b = std::min(a, b);
            const double hi_b = std::max(a, b);
            const double margin = 0.1 * (hi_b - lo_b);
            if (!std::isfinite(hi.f)) {
                t = a + 0.1 * (b - a);
            } else if (!std::isfinite(t)) {
                t = 0.5 * (a + b);
            } else {
                t = std::clamp(t, lo_b + margin, hi_b - margin);
            }
            if (hi_b - lo_b <= 1e-16 * std::max(1.0, hi_b)) {
                return false;
            }
            LineSearchPoint p = eval(t);
            if (armijo_fails(p) || p.f >= lo.f) {
                hi = std::move(p);
            } else {
                if (curvature_ok(p)) {
                    out = std::move(p);
                    return true;
                }
                if (p.slope * (hi.step - lo.step) >= 0.0) {
                    hi = lo;
                }
                lo = std::move(p);
            }
        }
        return false;
    };

    LineSearchPoint prev;
    prev.step = 0.0;
    prev.f = f0;
    prev.slope = slope0;
    prev.x.assign(x0.begin(), x0.end());
    double step = step0;
    bool ok = false;
    for (int i = 0; evals < cfg.max_line_search_evals; ++i) {
        LineSearchPoint p = eval(step);
        if (armijo_fails(p) || (i > 0 && p.f >= prev.f)) {
            ok = zoom(std::move(prev), std::move(p));
            break;
        }
        if (curvature_ok(p)) {
            out = std::move(p);
            ok = true;
            break;
        }
        if (p.slope >= 0.0) {
            ok = zoom(std::move(p), std::move(prev));
            break;
        }
        prev = std::move(p);
        step *= 2.0;
    }
    if (!ok) {
        out = std::move(best);
    }
    return ok;
}

} // namespace detail

/// Curvature pairs (s, y) kept by L-BFGS. Passing the same memory to successive calls
/// warm-starts the inverse-Hessian model when the objective changes only slightly.
struct LbfgsMemory {
    std::deque<std::vector<double>> S;
    std::deque<std::vector<double>> Y;
    std::deque<double> rho;

    void clear()
    {
        S.clear();
        Y.clear();
        rho.clear();
    }
    [[nodiscard]] std::size_t size() const noexcept { return S.size(); }
};

/// Limited-memory BFGS: two-loop recursion and a strong-Wolfe line search. The trial step
/// is 1, or min(1, 1/|g|) while no curvature pairs are stored. Pairs with
/// s.y <= 1e-10 |s||y| are skipped. Every accepted step decreases f.
template <DifferentiableObjective F>
OptimResult lbfgs_minimize(F&& f, std::vector<double> x, const LbfgsConfig& cfg, LbfgsMemory& memory)
{
    cfg.validate();
    const std::size_t n = x.size();
    if (memory.size() > 0 && memory.S.front().size() != n) {
        memory.clear();
    }
    std::vector<double> g(n);
    double fx = detail::evaluate_checked(f, x, g, "lbfgs_minimize");

    OptimResult res;
    res.trace.initial_loss = fx;
    auto& S = memory.S;
    auto& Y = memory.Y;
    auto& rho = memory.rho;
    std::vector<double> d(n);
    std::vector<double> alpha(static_cast<std::size_t>(cfg.memory));
    detail::Stopwatch clock;

    for (int k = 0; k < cfg.max_iterations; ++k) {
        if (detail::norm(g) <= cfg.gradient_tolerance) {
            res.reason = StopReason::gradient_tolerance;
            break;
        }
        // two-loop recursion: d = -H g
        for (std::size_t i = 0; i < n; ++i) {
            d[i] = -g[i];
        }
        const std::size_t m = S.size();
        for (std::size_t i = m; i-- > 0;) {
            alpha[i] = rho[i] * detail::dot(S[i], d);
            for (std::size_t t = 0; t < n; ++t) {
                d[t] -= alpha[i] * Y[i][t];
            }
        }
        if (m > 0) {
            const double gamma = detail::dot(S.back(), Y.back()) / detail::dot(Y.back(), Y.back());
            for (auto& v : d) {
                v *= gamma;
            }
        }
        for (std::size_t i = 0; i < m; ++i) {
            const double beta = rho[i] * detail::dot(Y[i], d);
            for (std::size_t t = 0; t < n; ++t) {
                d[t] += (alpha[i] - beta) * S[i][t];
            }
        }
        double slope = detail::dot(g, d);
        if (!(slope < 0.0)) {
            memory.clear();
            for (std::size_t i = 0; i < n; ++i) {
                d[i] = -g[i];
            }
            slope = detail::dot(g, d);
        }

        const double step0 = S.empty() ? std::min(1.0, 1.0 / detail::norm(g)) : 1.0;
        detail::LineSearchPoint p;
        const bool ok = detail::strong_wolfe(f, x, fx, d, slope, step0, cfg, p);
        if (!ok && !(p.step > 0.0 && p.f < fx)) {
            res.reason = StopReason::line_search_failed;
            break;
        }
        std::vector<double> s(n);
        std::vector<double> y(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = p.x[i] - x[i];
            y[i] = p.g[i] - g[i];
        }
        const double sy = detail::dot(s, y);
        if (sy > 1e-10 * detail::norm(s) * detail::norm(y)) {
            S.push_back(std::move(s));
            Y.push_back(std::move(y));
            rho.push_back(1.0 / sy);
            if (static_cast<int>(S.size()) > cfg.memory) {
                S.pop_front();
                Y.pop_front();
                rho.pop_front();
            }
        }
        x = std::move(p.x);
        g = std::move(p.g);
        fx = p.f;
        res.trace.losses.push_back(fx);
        res.trace.grad_norms.push_back(detail::norm(g));
        res.trace.seconds.push_back(clock.lap());
        if (!ok) {
            // accepted a sufficient-decrease point without the curvature condition
            memory.clear();
        }
    }
    res.x = std::move(x);
    return res;
}

template <DifferentiableObjective F>
OptimResult lbfgs_minimize(F&& f, std::vector<double> x, const LbfgsConfig& cfg = {})
{
    LbfgsMemory memory;
    return lbfgs_minimize(std::forward<F>(f), std::move(x), cfg, memory);
}

/// Bias-corrected Adam with constant step size.
template <DifferentiableObjective F>
OptimResult adam_minimize(F&& f, std::vector<double> x, const FirstOrderConfig& cfg = {})
{
    cfg.validate();
    const std::size_t n = x.size();
    std::vector<double> g(n);
    double fx = detail::evaluate_checked(f, x, g, "adam_minimize");
    OptimResult res;
    res.trace.initial_loss = fx;
    std::vector<double> m(n, 0.0);
    std::vector<double> v(n, 0.0);
    double b1t = 1.0;
    double b2t = 1.0;
    detail::Stopwatch clock;
    for (int t = 1; t <= cfg.max_iterations; ++t) {
        b1t *= cfg.beta1;
        b2t *= cfg.beta2;
        for (std::size_t i = 0; i < n; ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double mhat = m[i] / (1.0 - b1t);
            const double vhat = v[i] / (1.0 - b2t);
            x[i] -= cfg.step_size * mhat / (std::sqrt(vhat) + cfg.epsilon);
        }
        fx = f(std::span<const double>(x), std::span<double>(g));
        if (!std::isfinite(fx)) {
            throw std::runtime_error("adam_minimize: objective became non-finite");
        }
        res.trace.losses.push_back(fx);
        res.trace.grad_norms.push_back(detail::norm(g));
        res.trace.seconds.push_back(clock.lap());
    }
    res.x = std::move(x);
    return res;
}

/// Nesterov accelerated gradient: v <- mu v - eta grad f(x + mu v); x <- x + v.
template <DifferentiableObjective F>
OptimResult nag_minimize(F&& f, std::vector<double> x, const FirstOrderConfig& cfg = {})
{
    cfg.validate();
    const std::size_t n = x.size();
    std::vector<double> g(n);
    double fx = detail::evaluate_checked(f, x, g, "nag_minimize");
    OptimResult res;
    res.trace.initial_loss = fx;
    std::vector<double> vel(n, 0.0);
    std::vector<double> look(n);
    std::vector<double> g_look(n);
    detail::Stopwatch clock;
    for (int t = 1; t <= cfg.max_iterations; ++t) {
        bool at_x = true;
        for (std::size_t i = 0; i < n; ++i) {
            look[i] = x[i] + cfg.momentum * vel[i];
            at_x = at_x && look[i] == x[i];
        }
        if (at_x) {
            g_look = g; // gradient at x is already known
        } else {
            f(std::span<const double>(look), std::span<double>(g_look));
        }
        for (std::size_t i = 0; i < n; ++i) {
            vel[i] = cfg.momentum * vel[i] - cfg.step_size * g_look[i];
            x[i] += vel[i];
        }
        fx = f(std::span<const double>(x), std::span<double>(g));
        if (!std::isfinite(fx)) {
            throw std::runtime_error("nag_minimize: objective became non-finite");
        }
        res.trace.losses.push_back(fx);
        res.trace.grad_norms.push_back(detail::norm(g));
        res.trace.seconds.push_back(clock.lap());
    }
    res.x = std::move(x);
    return res;
}

/// L_n = (phi_ref - phi_n) / (phi_ref - phi_1)
inline std::vector<double> normalized_cost(std::span<const double> losses, double phi_ref, double phi_1)
{
    const double denom = phi_ref - phi_1;
    if (denom == 0.0 || !std::isfinite(denom)) {
        throw std::invalid_argument("normalized_cost: phi_ref and phi_1 must differ");
    }
    std::vector<double> out(losses.size());
    for (std::size_t i = 0; i < losses.size(); ++i) {
        out[i] = (phi_ref - losses[i]) / denom;
    }
    return out;
}

/// CSV with header iteration,loss,grad_norm,seconds (iterations numbered from 1).
inline std::string trace_to_csv(const TrainTrace& trace)
{
    std::string out = "iteration,loss,grad_norm,seconds\n";
    for (std::size_t i = 0; i < trace.size(); ++i) {
        out += std::to_string(i + 1) + "," + format_number(trace.losses[i]) + "," +
               format_number(trace.grad_norms[i]) + "," + format_number(trace.seconds[i]) + "\n";
    }
    return out;
}

} // namespace petrep
