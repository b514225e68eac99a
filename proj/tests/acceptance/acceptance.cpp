#include "../cli_harness.hpp"
#include "petrep/petrep.hpp"
#include "trend.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <limits>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace petrep;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;

    void require(bool ok, const std::string& what)
    {
        if (!ok) {
            pass = false;
            detail += (detail.empty() ? "" : "; ") + what;
        }
    }
};

std::string fmt(double v, int digits = 4)
{
    std::ostringstream s;
    s.precision(digits);
    s << v;
    return s.str();
}

Image random_image(const ImageGrid& g, std::mt19937_64& rng, double lo, double hi)
{
    std::uniform_real_distribution<double> u(lo, hi);
    Image img(g);
    for (auto& v : img.values()) {
        v = u(rng);
    }
    return img;
}

double rel_diff(double a, double b)
{
    return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1e-300});
}

template <class F>
double golden_argmax(F f, double lo, double hi)
{
    const double g = (std::sqrt(5.0) - 1.0) / 2.0;
    double a = lo;
    double b = hi;
    double c = b - g * (b - a);
    double d = a + g * (b - a);
    double fc = f(c);
    double fd = f(d);
    for (int k = 0; k < 300 && b - a > 1e-14 * std::max(1.0, b); ++k) {
        if (fc < fd) {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        } else {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        }
    }
    return 0.5 * (a + b);
}

struct DefaultSimulation {
    PhantomPair pair = make_phantom(PhantomSpec::brain());
    SystemMatrix A = build_system_matrix(pair.activity.grid(), ProjectionGeometry::covering(pair.activity.grid()));

    [[nodiscard]] Sinogram data(std::uint64_t seed, double counts = 5e5) const
    {
        return simulate_counts(A, pair.activity, 0.1, counts, seed).sinogram;
    }
};

// ---------------------------------------------------------------------------

Outcome math_oracles()
{
    Outcome out;

    {
        const ImageGrid g{24, 20, 1.5};
        const SystemMatrix A = build_system_matrix(g, {30, 37, 1.1});
        std::mt19937_64 rng(1);
        std::normal_distribution<double> n01;
        double worst = 0.0;
        for (int trial = 0; trial < 50; ++trial) {
            Image x(g);
            for (auto& v : x.values()) {
                v = n01(rng);
            }
            std::vector<double> r(A.rows());
            for (auto& v : r) {
                v = n01(rng);
            }
            const auto ax = project(A, x);
            const Image atr = backproject(A, r);
            double lhs = 0.0;
            double rhs = 0.0;
            for (std::size_t i = 0; i < r.size(); ++i) {
                lhs += ax[i] * r[i];
            }
            for (std::size_t j = 0; j < x.size(); ++j) {
                rhs += x[j] * atr[j];
            }
            worst = std::max(worst, rel_diff(lhs, rhs));
        }
        out.require(worst <= 1e-10, "adjointness " + fmt(worst));
    }

    {
        NetConfig cfg;
        Network net(cfg, 32, 32);
        std::mt19937_64 rng(2);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        std::vector<double> input(32 * 32);
        std::vector<double> target(32 * 32);
        for (auto& v : input) {
            v = u(rng);
        }
        for (auto& v : target) {
            v = u(rng) - 0.5;
        }
        auto theta = init_params(cfg, 3).values;
        for (auto& v : theta) {
            v += 0.05 * std::normal_distribution<double>()(rng);
        }
        std::vector<double> grad(theta.size());
        net.loss_and_grad(theta, input, target, grad);
        double gmax = 0.0;
        for (double v : grad) {
            gmax = std::max(gmax, std::fabs(v));
        }
        const auto& layout = net.layout();
        const int per_layer = 200 / static_cast<int>(layout.size()) + 1;
        double worst = 0.0;
        int sampled = 0;
        for (const auto& l : layout) {
            std::uniform_int_distribution<std::size_t> pick(l.weight_offset, l.bias_offset + l.c_out - 1);
            for (int s = 0; s < per_layer; ++s) {
                const std::size_t k = s == 0 ? l.bias_offset : pick(rng);
                const double saved = theta[k];
                // Large steps can straddle a leaky-ReLU kink, small ones drown tiny
                // partials in rounding, so keep the best of a short ladder.
                double best = std::numeric_limits<double>::infinity();
                for (double h : {1e-4, 1e-5, 1e-6, 1e-7}) {
                    theta[k] = saved + h;
                    const double fp = net.loss(theta, input, target);
                    theta[k] = saved - h;
                    const double fm = net.loss(theta, input, target);
                    theta[k] = saved;
                    const double fd = (fp - fm) / (2.0 * h);
                    const double denom = std::max({std::fabs(fd), std::fabs(grad[k]), 1e-6 * gmax});
                    best = std::min(best, std::fabs(fd - grad[k]) / denom);
                }
                worst = std::max(worst, best);
                ++sampled;
            }
        }
        out.require(sampled >= 200 && worst <= 1e-4, "network gradient " + fmt(worst));
    }

    {
        std::mt19937_64 rng(4);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        double worst = 0.0;
        bool nonneg = true;
        for (int trial = 0; trial < 1000; ++trial) {
            const double x_em = trial % 10 == 0 ? 0.0 : 10.0 * u(rng);
            const double sens = 0.1 + 10.0 * u(rng);
            const double rho = std::pow(10.0, -3.0 + 6.0 * u(rng));
            const double t = -10.0 + 20.0 * u(rng);
            const double v = penalized_pixel_update(x_em, sens, rho, t);
            nonneg = nonneg && v >= 0.0;
            auto objective = [&](double x) {
                const double lik = x_em > 0.0 ? sens * (x_em * std::log(x) - x) : -sens * x;
                return lik - 0.5 * rho * (x - t) * (x - t);
            };
            const double oracle = golden_argmax(objective, 0.0, std::max(t, 0.0) + x_em + sens / rho + 1.0);
            worst = std::max(worst, std::fabs(v - oracle) / std::max(1.0, oracle));
        }
        out.require(nonneg && worst <= 1e-6, "pixel update vs golden section " + fmt(worst));

        double lo_worst = 0.0;
        double hi_worst = 0.0;
        for (int trial = 0; trial < 200; ++trial) {
            const double x_em = 0.1 + 10.0 * u(rng);
            const double sens = 0.1 + 10.0 * u(rng);
            const double t = -10.0 + 20.0 * u(rng);
            lo_worst = std::max(lo_worst, rel_diff(penalized_pixel_update(x_em, sens, 1e-12, t), x_em));
            const double want = std::max(t, 0.0);
            hi_worst = std::max(hi_worst, std::fabs(penalized_pixel_update(x_em, sens, 1e12, t) - want) /
                                              std::max(1.0, want));
        }
        out.require(lo_worst <= 1e-4 && hi_worst <= 1e-4,
                    "rho limits " + fmt(lo_worst) + " / " + fmt(hi_worst));
    }

    {
        const ImageGrid g{8, 8, 1.0};
        const SystemMatrix A = build_system_matrix(g, ProjectionGeometry::covering(g));
        std::mt19937_64 rng(5);
        const Image truth = random_image(g, rng, 0.5, 3.0);
        const Sinogram y = simulate_counts(A, truth, 0.1, 5e3, 5).sinogram;
        const Image xn = random_image(g, rng, 0.5, 2.0);
        const Image grad = log_likelihood_gradient(y, xn, A);
        const double h = 1e-5;
        double tangency = 0.0;
        for (std::size_t j = 0; j < xn.size(); ++j) {
            Image up = xn;
            Image dn = xn;
            up[j] += h;
            dn[j] -= h;
            const double dq = (surrogate_value(up, xn, y, A) - surrogate_value(dn, xn, y, A)) / (2.0 * h);
            tangency = std::max(tangency, std::fabs(dq - grad[j]) / std::max(1.0, std::fabs(grad[j])));
        }
        out.require(tangency <= 1e-6, "surrogate tangency " + fmt(tangency));

        const double q0 = surrogate_value(xn, xn, y, A);
        const double l0 = log_likelihood(y, xn, A);
        int violations = 0;
        for (int trial = 0; trial < 100; ++trial) {
            const Image x = random_image(g, rng, 0.01, 6.0);
            const double dq = surrogate_value(x, xn, y, A) - q0;
            const double dl = log_likelihood(y, x, A) - l0;
            violations += dq <= dl + 1e-9 * std::fabs(l0) ? 0 : 1;
        }
        out.require(violations == 0, "minorization violated " + std::to_string(violations) + " times");
    }
    if (out.pass) {
        out.detail = "adjointness, gradient check, pixel update, surrogate and rho limits within tolerance";
    }
    return out;
}

Outcome em_monotonicity()
{
    const DefaultSimulation sim;
    const Sinogram y = sim.data(1);
    std::vector<double> L{log_likelihood(y, default_initial_image(y, sim.A), sim.A)};
    mlem_reconstruct(y, sim.A, 100, default_initial_image(y, sim.A),
                     [&](int, const Image& x) { L.push_back(log_likelihood(y, x, sim.A)); });
    Outcome out;
    int drops = 0;
    for (std::size_t n = 1; n < L.size(); ++n) {
        drops += L[n] >= L[n - 1] - 1e-9 * std::fabs(L[n]) ? 0 : 1;
    }
    out.require(drops == 0, std::to_string(drops) + " decreasing steps");
    if (out.pass) {
        out.detail = "100 iterations, L " + fmt(L.front(), 8) + " -> " + fmt(L.back(), 8);
    }
    return out;
}

Outcome optimizer_comparison()
{
    const DefaultSimulation sim;
    const Sinogram y = sim.data(2);
    const Image target = mlem_reconstruct(y, sim.A, 100, default_initial_image(y, sim.A));
    const NetConfig net;
    NetworkRepresentation rep(net, make_network_input(sim.pair.prior, InputMode::prior, 0));
    const auto theta0 = init_params(net, 3).values;
    auto objective = [&](std::span<const double> th, std::span<double> g) {
        return rep.fit_loss(th, target.values(), g);
    };

    FirstOrderConfig adam;
    adam.max_iterations = 700;
    FirstOrderConfig nag;
    nag.step_size = kNagStepSize;
    nag.max_iterations = 300;
    LbfgsConfig lbfgs;
    lbfgs.max_iterations = 300;
    const auto ra = adam_minimize(objective, theta0, adam);
    const auto rn = nag_minimize(objective, theta0, nag);
    const auto rl = lbfgs_minimize(objective, theta0, lbfgs);

    const double phi_ref = ra.trace.final_loss();
    const double phi_1 = ra.trace.losses.front();
    const auto ln = normalized_cost(rn.trace.losses, phi_ref, phi_1);
    const auto ll = normalized_cost(rl.trace.losses, phi_ref, phi_1);
    const auto la = normalized_cost(ra.trace.losses, phi_ref, phi_1);

    Outcome out;
    out.require(ll.back() < ln.back(), "L-BFGS final " + fmt(ll.back()) + " not below NAG " + fmt(ln.back()));
    bool monotone = rl.trace.losses.front() <= rl.trace.initial_loss;
    for (std::size_t k = 1; k < rl.trace.losses.size(); ++k) {
        monotone = monotone && rl.trace.losses[k] <= rl.trace.losses[k - 1];
    }
    out.require(monotone, "L-BFGS trace increases");
    int adam_up = 0;
    for (std::size_t k = 1; k < ra.trace.losses.size(); ++k) {
        adam_up += ra.trace.losses[k] > ra.trace.losses[k - 1] ? 1 : 0;
    }
    out.require(adam_up > 0, "Adam never increased");
    if (out.pass) {
        out.detail = "normalized cost at 300: Adam " + fmt(la[299]) + ", NAG " + fmt(ln.back()) + ", L-BFGS " +
                     fmt(ll.back()) + "; Adam increases " + std::to_string(adam_up);
    }
    return out;
}

Outcome reconstruction_trend()
{
    trend::Setup s;
    s.admm.rho = 30.0;
    s.admm.optimizer_iterations = 10;
    s.admm_checkpoints = {20, 40, 60, 80};
    s.em_fwhm_px = 1.0;
    const auto p = trend::make_default_phantom(s);
    int crc_wins = 0;
    int cr_wins = 0;
    int both = 0;
    const int sets = 10;
    std::string log;
    for (int k = 0; k < sets; ++k) {
        const auto data = trend::make_seed_set(p, s, derive_seed(7, "seed-set", static_cast<std::uint64_t>(k)));
        std::vector<trend::Snapshots> ef;
        std::vector<trend::Snapshots> ew;
        std::vector<trend::Snapshots> af;
        std::vector<trend::Snapshots> aw;
        for (int r = 0; r < s.realizations; ++r) {
            const auto ri = static_cast<std::size_t>(r);
            ef.push_back(trend::run_em_filter(data.free[ri], p, s));
            ew.push_back(trend::run_em_filter(data.with[ri], p, s));
            af.push_back(trend::run_dip_admm(data.free[ri], p, s));
            aw.push_back(trend::run_dip_admm(data.with[ri], p, s));
        }
        const auto proposed = trend::evaluate(p, data, s.admm_checkpoints, af, aw);
        const auto baseline = trend::evaluate(p, data, s.em_checkpoints, ef, ew);
        const auto cmp = trend::compare(proposed, baseline);
        crc_wins += cmp.crc_wins ? 1 : 0;
        cr_wins += cmp.cr_wins ? 1 : 0;
        both += cmp.crc_wins && cmp.cr_wins ? 1 : 0;
        auto describe = [](const trend::Curves& c) {
            std::string text;
            for (std::size_t i = 0; i < c.crc.size(); ++i) {
                text += (text.empty() ? "" : " ") + std::to_string(c.crc[i].iteration) + ":" + fmt(c.crc[i].std, 3) +
                        "/" + fmt(c.crc[i].metric, 3) + "/" + fmt(c.cr[i].metric, 3);
            }
            return text;
        };
        if (cmp.std_level) {
            std::printf("  seed set %d: std %s CRC %s vs %s, CR %s vs %s\n", k, fmt(*cmp.std_level).c_str(),
                        fmt(cmp.crc_proposed).c_str(), fmt(cmp.crc_baseline).c_str(), fmt(cmp.cr_proposed).c_str(),
                        fmt(cmp.cr_baseline).c_str());
        } else {
            std::printf("  seed set %d: curves do not overlap in STD\n", k);
        }
        std::printf("    dip-admm iteration:std/CRC/CR %s\n    em+filter iteration:std/CRC/CR %s\n",
                    describe(proposed).c_str(), describe(baseline).c_str());
        std::fflush(stdout);
    }
    Outcome out;
    out.require(both >= 8, "");
    out.detail = "gray CRC higher in " + std::to_string(crc_wins) + "/10, tumor CR higher in " +
                 std::to_string(cr_wins) + "/10, both in " + std::to_string(both) + "/10";
    return out;
}

Outcome prior_input_ablation()
{
    const DefaultSimulation sim;
    int wins = 0;
    std::string scores;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto data = simulate_counts(sim.A, sim.pair.activity, 0.1, 5e5, derive_seed(seed, "ablation-counts"));
        const Image noisy = mlem_reconstruct(data.sinogram, sim.A, 100, default_initial_image(data.sinogram, sim.A));
        Image clean = sim.pair.activity;
        for (auto& v : clean.values()) {
            v *= data.activity_scale;
        }
        const double with_prior = psnr(denoise_direct(noisy, sim.pair.prior, 300, seed, {}, InputMode::prior), clean);
        const double with_noise = psnr(denoise_direct(noisy, sim.pair.prior, 300, seed, {}, InputMode::noise), clean);
        wins += with_prior > with_noise ? 1 : 0;
        scores += (scores.empty() ? "" : ", ") + fmt(with_prior) + "/" + fmt(with_noise);
    }
    Outcome out;
    out.require(wins >= 4, "");
    out.detail = "prior input wins " + std::to_string(wins) + "/5 (PSNR prior/noise dB: " + scores + ")";
    return out;
}

Outcome denoising_trend()
{
    const DefaultSimulation sim;
    const trend::Setup s;
    const auto p = trend::make_default_phantom(s);
    int beats_gauss = 0;
    int beats_nlm = 0;
    std::string scores;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const Sinogram y = sim.data(derive_seed(seed, "denoise-trend"));
        const Image noisy = mlem_reconstruct(y, sim.A, 100, default_initial_image(y, sim.A));
        const double c_gauss = cnr(gaussian_filter(noisy, 1.0), p.tumors, p.background);
        const double c_nlm = cnr(nlm_guided_filter(noisy, sim.pair.prior), p.tumors, p.background);
        const double c_dip = cnr(denoise_direct(noisy, sim.pair.prior, 700, seed), p.tumors, p.background);
        beats_gauss += c_dip >= c_gauss ? 1 : 0;
        beats_nlm += c_dip >= c_nlm ? 1 : 0;
        scores += (scores.empty() ? "" : ", ") + fmt(c_dip, 3) + "/" + fmt(c_nlm, 3) + "/" + fmt(c_gauss, 3);
    }
    Outcome out;
    out.require(beats_gauss == 5 && beats_nlm >= 4, "");
    out.detail = "proposed >= Gaussian " + std::to_string(beats_gauss) + "/5, >= NLM " + std::to_string(beats_nlm) +
                 "/5 (CNR proposed/NLM/Gaussian: " + scores + ")";
    return out;
}

Outcome admm_invariants()
{
    Outcome out;
    const DefaultSimulation sim;
    const Sinogram y = sim.data(3);
    AdmmConfig cfg;
    cfg.rho = 1000.0;
    cfg.outer_iterations = 10;
    cfg.optimizer_iterations = 5;
    Image mu_prev(sim.pair.activity.grid());
    double worst_dual = 0.0;
    bool nonneg = true;
    admm_reconstruct(y, sim.A, sim.pair.prior, NetConfig{}, cfg, [&](const AdmmState& st, const Image& f) {
        nonneg = nonneg && st.x.nonnegative();
        for (std::size_t j = 0; j < f.size(); ++j) {
            const double scale = std::max({std::fabs(st.mu[j]), std::fabs(mu_prev[j]), std::fabs(st.x[j]),
                                           std::fabs(f[j]), std::numeric_limits<double>::min()});
            worst_dual = std::max(worst_dual, std::fabs(st.mu[j] - mu_prev[j] - st.x[j] + f[j]) / scale);
        }
        mu_prev = st.mu;
    });
    out.require(worst_dual <= 4.0 * std::numeric_limits<double>::epsilon(), "dual identity " + fmt(worst_dual));
    out.require(nonneg, "negative x iterate");

    const SystemMatrix A1(ImageGrid{1, 1, 1.0}, SparseMatrix(1, 1, {{0, 0, 1.0}}));
    const Sinogram y1(ProjectionGeometry{1, 1, 1.0}, {7.0}, {1.5});
    PixelRepresentation rep(1);
    AdmmConfig scalar;
    scalar.rho = 1.0;
    scalar.outer_iterations = 400;
    const auto res = admm_reconstruct(y1, A1, rep, {1.0}, scalar);
    const double err = std::fabs(res.image[0] - 5.5);
    out.require(err <= 1e-6, "scalar capacity error " + fmt(err));
    if (out.pass) {
        out.detail = "dual identity to " + fmt(worst_dual, 2) + " relative, x >= 0, scalar ML error " + fmt(err, 2);
    }
    return out;
}

Outcome cli_determinism()
{
#ifdef PETREP_CLI_PATH
    namespace fs = std::filesystem;
    using cliharness::run_cli;
    const fs::path dir = fs::temp_directory_path() / "petrep_acceptance_determinism";
    fs::remove_all(dir);
    fs::create_directories(dir);
    json cfg = json::parse(R"({
      "seed": 5,
      "grid": {"width": 32, "height": 32, "pixel_size_mm": 6.0},
      "simulate": {"phantom": {"preset": "brain"}, "total_counts": 2e5, "n_realizations": 3, "background_rois": 5}
    })");
    Outcome out;
    auto run_twice = [&](const std::string& command, const json& c, const std::string& name) {
        write_json(dir / (name + ".json"), c);
        const auto cfg_path = (dir / (name + ".json")).string();
        const auto a = run_cli(PETREP_CLI_PATH, {command, "--config", cfg_path, "--output", name + "_a"}, dir);
        const auto b = run_cli(PETREP_CLI_PATH, {command, "--config", cfg_path, "--output", name + "_b"}, dir);
        if (a.code != 0 || b.code != 0) {
            out.require(false, name + " exited with " + std::to_string(a.code) + ": " + a.err);
            return;
        }
        const auto sa = cliharness::snapshot(dir / (name + "_a"));
        out.require(!sa.empty() && sa == cliharness::snapshot(dir / (name + "_b")), name + " outputs differ");
    };
    run_twice("simulate", cfg, "sim");
    fs::rename(dir / "sim_a", dir / "sim");

    const std::vector<std::pair<std::string, json>> reconstructions{
        {"mlem", {{"method", "mlem"}}},
        {"emf", {{"method", "em-filter"}}},
        {"kmri", {{"method", "kmri"}}},
        {"dip", {{"method", "dip-admm"}, {"admm", {{"rho", 100.0}, {"optimizer_iterations", 3}}},
                 {"net", {{"base_channels", 2}}}}},
    };
    for (const auto& [name, extra] : reconstructions) {
        json c = cfg;
        c["reconstruct"] = {{"input", "sim"}, {"source", "realizations"}, {"iterations", 6}, {"checkpoint_every", 3}};
        c["reconstruct"].update(extra);
        run_twice("reconstruct", c, name);
    }
    fs::rename(dir / "mlem_a", dir / "rec");

    json m = cfg;
    m["metrics"] = {{"simulation", "sim"}, {"reconstruction", "rec"}, {"stride", 3}};
    run_twice("metrics", m, "metrics");

    for (const char* method : {"gaussian", "nlm", "dip"}) {
        json c = cfg;
        c["denoise"] = {{"noisy", "rec/with_tumor/r000/iter_0006.img"},
                        {"guide", "sim/phantom/prior.img"},
                        {"method", method},
                        {"epochs", 10},
                        {"net", {{"base_channels", 2}}}};
        if (std::string(method) != "dip") {
            c["denoise"].erase("epochs");
            c["denoise"].erase("net");
        }
        run_twice("denoise", c, std::string("denoise_") + method);
    }

    json c = cfg;
    c["compare_optimizers"] = {{"target", "rec/with_tumor/r000/iter_0006.img"},
                               {"input", "sim/phantom/prior.img"},
                               {"iterations", 20},
                               {"reference_iterations", 30},
                               {"net", {{"base_channels", 2}}}};
    run_twice("compare-optimizers", c, "compare");
    fs::remove_all(dir);
    if (out.pass) {
        out.detail = "simulate, reconstruct (4 methods), metrics, denoise (3 methods), compare-optimizers";
    }
    return out;
#else
    Outcome out;
    out.require(false, "CLI not built");
    return out;
#endif
}

} // namespace

int main(int argc, char** argv)
{
    struct Criterion {
        std::string name;
        std::function<Outcome()> run;
        double limit_seconds;
    };
    const double none = std::numeric_limits<double>::infinity();
    const std::vector<Criterion> criteria{
        {"math-core oracles", math_oracles, 60.0},
        {"EM monotonicity", em_monotonicity, 60.0},
        {"optimizer comparison", optimizer_comparison, 600.0},
        {"reconstruction trend", reconstruction_trend, 3600.0},
        {"prior-input ablation", prior_input_ablation, 900.0},
        {"denoising trend", denoising_trend, 1200.0},
        {"ADMM invariants", admm_invariants, none},
        {"CLI determinism", cli_determinism, none},
    };
    std::set<int> selected;
    bool strict = false;
    for (int i = 1; i < argc; ++i) {
        if (std::string(argv[i]) == "--strict") {
            strict = true;
        } else {
            selected.insert(std::atoi(argv[i]));
        }
    }
    int failures = 0;
    int errors = 0;
    int ran = 0;
    for (std::size_t k = 0; k < criteria.size(); ++k) {
        const int id = static_cast<int>(k) + 1;
        if (!selected.empty() && !selected.contains(id)) {
            continue;
        }
        ++ran;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[k].run();
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail = std::string("error: ") + e.what();
            ++errors;
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (secs > criteria[k].limit_seconds) {
            o.pass = false;
            o.detail += "; exceeded the " + fmt(criteria[k].limit_seconds) + " s budget";
        }
        failures += o.pass ? 0 : 1;
        std::printf("%s criterion %d (%s): %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", id, criteria[k].name.c_str(),
                    o.detail.c_str(), secs);
        std::fflush(stdout);
    }
    std::printf("%d of %d criteria passed\n", ran - failures, ran);
    // A FAIL verdict is a measured outcome; only a criterion that could not be
    // evaluated fails the run, unless --strict is given.
    return errors > 0 || (strict && failures > 0) ? 1 : 0;
}
