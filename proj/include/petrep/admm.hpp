#pragma once

#include "petrep/forward_model.hpp"
#include "petrep/io.hpp"
#include "petrep/neuralnet.hpp"
#include "petrep/optimizers.hpp"
#include "petrep/poisson_model.hpp"
#include "petrep/random.hpp"

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace petrep {

/// A parameterized image x = f(theta) together with the fitting loss ||f(theta) - target||^2.
template <class R>
concept Representation = requires(R& r, std::span<const double> theta, std::span<const double> target,
                                  std::span<double> out) {
    { r.param_count() } -> std::convertible_to<std::size_t>;
    r.evaluate(theta, out);
    { r.fit_loss(theta, target, out) } -> std::convertible_to<double>;
};

/// f(theta | alpha) for a fixed network input alpha.
class NetworkRepresentation {
  public:
    NetworkRepresentation(const NetConfig& cfg, Image input)
        : net_(cfg, input.height(), input.width()), input_(std::move(input))
    {}

    [[nodiscard]] std::size_t param_count() const noexcept { return net_.param_count(); }
    void evaluate(std::span<const double> theta, std::span<double> out) { net_.forward(theta, input_.values(), out); }
    double fit_loss(std::span<const double> theta, std::span<const double> target, std::span<double> grad)
    {
        return net_.loss_and_grad(theta, input_.values(), target, grad);
    }
    [[nodiscard]] const Image& input() const noexcept { return input_; }
    Network& network() noexcept { return net_; }

  private:
    Network net_;
    Image input_;
};

/// Unconstrained per-pixel parameterization f(theta) = theta.
class PixelRepresentation {
  public:
    explicit PixelRepresentation(std::size_t n) : n_(n) {}

    [[nodiscard]] std::size_t param_count() const noexcept { return n_; }
    void evaluate(std::span<const double> theta, std::span<double> out) const
    {
        std::copy(theta.begin(), theta.end(), out.begin());
    }
    double fit_loss(std::span<const double> theta, std::span<const double> target, std::span<double> grad) const
    {
        double loss = 0.0;
        for (std::size_t j = 0; j < n_; ++j) {
            const double r = theta[j] - target[j];
            loss += r * r;
            grad[j] = 2.0 * r;
        }
        return loss;
    }

  private:
    std::size_t n_;
};

enum class InputMode { prior, noise };

/// Network input: the min-max normalized prior, or seeded uniform noise on [0, 1).
inline Image make_network_input(const Image& prior, InputMode mode, std::uint64_t seed)
{
    if (mode == InputMode::prior) {
        return normalize_minmax(prior);
    }
    Rng rng(derive_seed(seed, "input-noise"));
    Image out(prior.grid());
    for (std::size_t j = 0; j < out.size(); ++j) {
        out[j] = rng.uniform();
    }
    return out;
}

struct AdmmConfig {
    double rho = 3e-3;
    int outer_iterations = 100;
    int em_subiterations = 2;
    /// L-BFGS iterations on the network subproblem per outer iteration; 0 freezes the network.
    int optimizer_iterations = 20;
    InputMode input_mode = InputMode::prior;
    std::uint64_t seed = 0;
    int lbfgs_memory = 10;

    void validate() const
    {
        if (!(rho > 0.0) || !std::isfinite(rho)) {
            throw std::invalid_argument("AdmmConfig: rho must be positive");
        }
        if (outer_iterations < 0 || em_subiterations < 1 || optimizer_iterations < 0 || lbfgs_memory < 1) {
            throw std::invalid_argument("AdmmConfig: iteration counts out of range");
        }
    }
};

struct AdmmState {
    Image x;
    Image mu;
    std::vector<double> theta;
    int n = 0;
    std::vector<double> log_likelihood;   // L(y | max(f(theta), 0)) after each outer iteration
    std::vector<double> primal_residual;  // ||x - f(theta)||
    std::vector<double> fit_loss;         // network subproblem loss after training
    LbfgsMemory lbfgs;                    // curvature pairs carried across outer iterations
};

/// Called after each outer iteration with the state and the network output f(theta).
using AdmmObserver = std::function<void(const AdmmState&, const Image&)>;

struct AdmmResult {
    Image image; // f(theta) clamped at 0
    AdmmState state;
};

inline Image clamp_nonnegative(Image img)
{
    for (auto& v : img.values()) {
        v = std::max(v, 0.0);
    }
    return img;
}

/// x0 from the EM default, mu = 0, theta = theta0.
template <ImagingOperator Op>
AdmmState initial_admm_state(const Sinogram& sino, const Op& A, std::vector<double> theta0)
{
    AdmmState s;
    s.x = default_initial_image(sino, A);
    s.mu = Image(A.grid());
    s.theta = std::move(theta0);
    return s;
}

/// Continues `state` until state.n == cfg.outer_iterations. Each outer iteration:
///   theta <- argmin ||f(theta) - (x + mu)||^2   (L-BFGS, warm-started)
///   x     <- em_subiterations of EM + closed-form penalized update with target f - mu
///   mu    <- mu + x - f(theta)
template <ImagingOperator Op, Representation R>
AdmmResult admm_run(const Sinogram& sino, const Op& A, R& rep, AdmmState state, const AdmmConfig& cfg,
                    const AdmmObserver& observer = {})
{
    cfg.validate();
    const ImageGrid& grid = A.grid();
    require_same_grid(grid, state.x.grid(), "admm_run");
    if (state.theta.size() != rep.param_count()) {
        throw std::invalid_argument("admm_run: parameter vector does not match representation");
    }
    const auto sens = A.column_sums();
    const std::size_t N = grid.size();
    Image f(grid);
    rep.evaluate(state.theta, f.values());
    std::vector<double> target(N);
    LbfgsConfig lcfg;
    lcfg.memory = cfg.lbfgs_memory;
    lcfg.max_iterations = cfg.optimizer_iterations;

    while (state.n < cfg.outer_iterations) {
        // network subproblem
        for (std::size_t j = 0; j < N; ++j) {
            target[j] = state.x[j] + state.mu[j];
        }
        auto objective = [&](std::span<const double> th, std::span<double> g) {
            return rep.fit_loss(th, target, g);
        };
        double fit = 0.0;
        if (cfg.optimizer_iterations > 0) {
            auto res = lbfgs_minimize(objective, state.theta, lcfg, state.lbfgs);
            state.theta = std::move(res.x);
            fit = res.trace.final_loss();
        } else {
            std::vector<double> g(state.theta.size());
            fit = objective(state.theta, g);
        }
        rep.evaluate(state.theta, f.values());

        // penalized likelihood subproblem
        for (int k = 0; k < cfg.em_subiterations; ++k) {
            const Image x_em = em_update(sino, A, state.x);
            for (std::size_t j = 0; j < N; ++j) {
                state.x[j] = sens[j] > 0.0
                                 ? penalized_pixel_update(x_em[j], sens[j], cfg.rho, f[j] - state.mu[j])
                                 : 0.0;
            }
        }

        // dual update
        double resid = 0.0;
        for (std::size_t j = 0; j < N; ++j) {
            const double r = state.x[j] - f[j];
            state.mu[j] += r;
            resid += r * r;
        }
        if (!state.x.all_finite() || !state.mu.all_finite() || !std::isfinite(fit)) {
            throw std::runtime_error("admm_run: non-finite state at outer iteration " +
                                     std::to_string(state.n + 1) + " (check rho and data scaling)");
        }
        ++state.n;
        state.log_likelihood.push_back(log_likelihood(sino, clamp_nonnegative(f), A));
        state.primal_residual.push_back(std::sqrt(resid));
        state.fit_loss.push_back(fit);
        if (observer) {
            observer(state, f);
        }
    }
    return {clamp_nonnegative(f), std::move(state)};
}

template <ImagingOperator Op, Representation R>
AdmmResult admm_reconstruct(const Sinogram& sino, const Op& A, R& rep, std::vector<double> theta0,
                            const AdmmConfig& cfg, const AdmmObserver& observer = {})
{
    return admm_run(sino, A, rep, initial_admm_state(sino, A, std::move(theta0)), cfg, observer);
}

/// Network-backed reconstruction with input alpha (prior image or noise per cfg.input_mode).
template <ImagingOperator Op>
AdmmResult admm_reconstruct(const Sinogram& sino, const Op& A, const Image& alpha, const NetConfig& net,
                            const AdmmConfig& cfg, const AdmmObserver& observer = {})
{
    require_same_grid(A.grid(), alpha.grid(), "admm_reconstruct");
    NetworkRepresentation rep(net, make_network_input(alpha, cfg.input_mode, cfg.seed));
    return admm_reconstruct(sino, A, rep, init_params(net, derive_seed(cfg.seed, "theta0")).values, cfg,
                            observer);
}

/// Direct fit of f(theta | input) to `noisy` under the L2 loss (identity operator,
/// Gaussian noise), at most `epochs` L-BFGS iterations from theta0.
template <Representation R>
Image denoise_direct(R& rep, std::vector<double> theta0, const Image& noisy, int epochs,
                     TrainTrace* trace = nullptr)
{
    LbfgsConfig cfg;
    cfg.max_iterations = epochs;
    auto objective = [&](std::span<const double> th, std::span<double> g) {
        return rep.fit_loss(th, noisy.values(), g);
    };
    auto res = lbfgs_minimize(objective, std::move(theta0), cfg);
    if (trace != nullptr) {
        *trace = res.trace;
    }
    Image out(noisy.grid());
    rep.evaluate(res.x, out.values());
    return out;
}

inline Image denoise_direct(const Image& noisy, const Image& alpha, int epochs, std::uint64_t seed,
                            NetConfig net = {}, InputMode mode = InputMode::prior, TrainTrace* trace = nullptr)
{
    require_same_grid(noisy.grid(), alpha.grid(), "denoise_direct");
    net.seed = seed;
    NetworkRepresentation rep(net, make_network_input(alpha, mode, seed));
    return denoise_direct(rep, init_params(net, derive_seed(seed, "theta0")).values, noisy, epochs, trace);
}

/// Wraps an image as Poisson-style data for an image-domain operator.
inline Sinogram image_as_data(const Image& img)
{
    return Sinogram(ProjectionGeometry{1, static_cast<int>(img.size()), img.grid().pixel_size},
                    std::vector<double>(img.values().begin(), img.values().end()));
}

/// ADMM with A = convolution by `psf` (nonnegative, unit sum). `blurred` must be >= 0.
template <Representation R>
AdmmResult deblur_reconstruct(const Image& blurred, const Kernel2D& psf, R& rep, std::vector<double> theta0,
                              const AdmmConfig& cfg, const AdmmObserver& observer = {})
{
    const SystemMatrix A = build_blur_matrix(blurred.grid(), psf);
    return admm_reconstruct(image_as_data(blurred), A, rep, std::move(theta0), cfg, observer);
}

inline AdmmResult deblur_reconstruct(const Image& blurred, const Kernel2D& psf, const Image& alpha,
                                     const NetConfig& net, const AdmmConfig& cfg)
{
    const SystemMatrix A = build_blur_matrix(blurred.grid(), psf);
    return admm_reconstruct(image_as_data(blurred), A, alpha, net, cfg);
}

// Checkpoints: state.json + exact float64 x, mu, theta and L-BFGS pairs so a run
// resumes bit-identically.

inline void save_admm_checkpoint(const AdmmState& s, const fs::path& dir)
{
    fs::create_directories(dir);
    write_f64(dir / "x.f64", s.x.values());
    write_f64(dir / "mu.f64", s.mu.values());
    write_f64(dir / "theta.f64", s.theta);
    std::vector<double> pairs_s;
    std::vector<double> pairs_y;
    for (std::size_t k = 0; k < s.lbfgs.size(); ++k) {
        pairs_s.insert(pairs_s.end(), s.lbfgs.S[k].begin(), s.lbfgs.S[k].end());
        pairs_y.insert(pairs_y.end(), s.lbfgs.Y[k].begin(), s.lbfgs.Y[k].end());
    }
    write_f64(dir / "lbfgs_s.f64", pairs_s);
    write_f64(dir / "lbfgs_y.f64", pairs_y);
    write_f64(dir / "lbfgs_rho.f64", std::vector<double>(s.lbfgs.rho.begin(), s.lbfgs.rho.end()));
    json hist = json::array();
    for (std::size_t k = 0; k < s.log_likelihood.size(); ++k) {
        hist.push_back({s.log_likelihood[k], s.primal_residual[k], s.fit_loss[k]});
    }
    write_json(dir / "state.json", {{"n", s.n},
                                    {"width", s.x.width()},
                                    {"height", s.x.height()},
                                    {"pixel_size_mm", s.x.grid().pixel_size},
                                    {"history", hist}});
}

inline AdmmState load_admm_checkpoint(const fs::path& dir)
{
    const json j = read_json(dir / "state.json");
    const ImageGrid grid = grid_from_json(j);
    AdmmState s;
    s.x = Image(grid, read_f64(dir / "x.f64"));
    s.mu = Image(grid, read_f64(dir / "mu.f64"));
    s.theta = read_f64(dir / "theta.f64");
    s.n = j.at("n").get<int>();
    for (const auto& h : j.at("history")) {
        // JSON has no infinities; dump() wrote null for -inf likelihoods
        s.log_likelihood.push_back(h.at(0).is_null() ? -std::numeric_limits<double>::infinity()
                                                     : h.at(0).get<double>());
        s.primal_residual.push_back(h.at(1).get<double>());
        s.fit_loss.push_back(h.at(2).get<double>());
    }
    if (static_cast<int>(s.log_likelihood.size()) != s.n) {
        throw FormatError("checkpoint history length does not match iteration count");
    }
    const auto pairs_s = read_f64(dir / "lbfgs_s.f64");
    const auto pairs_y = read_f64(dir / "lbfgs_y.f64");
    const auto rho = read_f64(dir / "lbfgs_rho.f64");
    const std::size_t n = s.theta.size();
    if (pairs_s.size() != rho.size() * n || pairs_y.size() != pairs_s.size()) {
        throw FormatError("checkpoint L-BFGS memory does not match the parameter count");
    }
    for (std::size_t k = 0; k < rho.size(); ++k) {
        const auto off = static_cast<std::ptrdiff_t>(k * n);
        const auto len = static_cast<std::ptrdiff_t>(n);
        s.lbfgs.S.emplace_back(pairs_s.begin() + off, pairs_s.begin() + off + len);
        s.lbfgs.Y.emplace_back(pairs_y.begin() + off, pairs_y.begin() + off + len);
        s.lbfgs.rho.push_back(rho[k]);
    }
    return s;
}

} // namespace petrep
