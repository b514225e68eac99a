// petrep: simulation, reconstruction, denoising, optimizer comparison and metrics.

#include "petrep/petrep.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace {

using namespace petrep;

constexpr double kDefaultRho = 100.0;

// ---------------------------------------------------------------------------
// Config access with key tracking

const char* type_name(const json& j)
{
    return j.type_name();
}

/// A JSON object whose reads are recorded. Keys that are never read are reported by
/// finish(), and every read (including defaults) is mirrored into `resolved`.
class Section {
  public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path))
    {
        if (!j_.is_object()) {
            throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
        }
    }

    [[nodiscard]] bool has(const std::string& key) const { return j_.contains(key); }

    template <class T>
    T get(const std::string& key, T fallback)
    {
        if (!j_.contains(key)) {
            used_.insert(key);
            resolved_[key] = fallback;
            return fallback;
        }
        return require<T>(key);
    }

    template <class T>
    T require(const std::string& key)
    {
        used_.insert(key);
        if (!j_.contains(key)) {
            throw ConfigError(name(key), "required key is missing");
        }
        const json& v = j_.at(key);
        T out;
        try {
            if constexpr (std::is_same_v<T, bool>) {
                if (!v.is_boolean()) {
                    throw ConfigError(name(key), std::string("expected a boolean, found ") + type_name(v));
                }
            } else if constexpr (std::is_integral_v<T>) {
                if (!v.is_number_integer()) {
                    throw ConfigError(name(key), std::string("expected an integer, found ") + type_name(v));
                }
            } else if constexpr (std::is_floating_point_v<T>) {
                if (!v.is_number()) {
                    throw ConfigError(name(key), std::string("expected a number, found ") + type_name(v));
                }
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!v.is_string()) {
                    throw ConfigError(name(key), std::string("expected a string, found ") + type_name(v));
                }
            }
            out = v.get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(name(key), e.what());
        }
        resolved_[key] = v;
        return out;
    }

    /// A nested object, empty when absent. Call done(child) after reading it.
    Section child(const std::string& key)
    {
        used_.insert(key);
        if (!j_.contains(key)) {
            return Section(empty_object(), name(key));
        }
        return Section(j_.at(key), name(key));
    }

    Section require_child(const std::string& key)
    {
        if (!j_.contains(key)) {
            throw ConfigError(name(key), "required block is missing");
        }
        return child(key);
    }

    /// Stores a finished child's resolved values.
    void done(const std::string& key, Section& sub)
    {
        sub.finish();
        resolved_[key] = sub.resolved();
    }

    /// Raw passthrough for keys handled elsewhere.
    const json& raw(const std::string& key)
    {
        used_.insert(key);
        resolved_[key] = j_.at(key);
        return j_.at(key);
    }

    void set_resolved(const std::string& key, json value) { resolved_[key] = std::move(value); }

    void finish() const
    {
        for (const auto& [key, value] : j_.items()) {
            if (!used_.contains(key)) {
                throw ConfigError(name(key), "unknown key");
            }
        }
    }

    [[nodiscard]] const json& resolved() const noexcept { return resolved_; }
    [[nodiscard]] std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  private:
    static const json& empty_object()
    {
        static const json e = json::object();
        return e;
    }

    const json& j_;
    std::string path_;
    std::set<std::string> used_;
    json resolved_ = json::object();
};

template <class T>
void check(bool ok, const Section& s, const std::string& key, const T& message)
{
    if (!ok) {
        throw ConfigError(s.name(key), message);
    }
}

// ---------------------------------------------------------------------------
// Run context

struct Globals {
    std::string config;
    std::string output;
    std::optional<std::uint64_t> seed;
    int threads = 1;
};

class RunLog {
  public:
    explicit RunLog(const fs::path& dir)
    {
        fs::create_directories(dir);
        out_.open(dir / "run.log", std::ios::app);
    }

    void info(const std::string& msg) { write("info", msg); }
    void warn(const std::string& msg)
    {
        write("warning", msg);
        std::cerr << "warning: " << msg << "\n";
    }

  private:
    void write(const char* level, const std::string& msg)
    {
        const auto now = std::chrono::system_clock::now();
        const std::time_t t = std::chrono::system_clock::to_time_t(now);
        std::tm tm{};
        gmtime_r(&t, &tm);
        out_ << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ") << " [" << level << "] " << msg << "\n";
        out_.flush();
    }

    std::ofstream out_;
};

struct Context {
    fs::path config_dir;
    fs::path out;
    std::uint64_t seed = 0;
    ImageGrid grid{64, 64, 3.0};
    ProjectionGeometry geometry{};
    json resolved;
    std::unique_ptr<RunLog> log;

    [[nodiscard]] fs::path input_path(const std::string& p) const
    {
        fs::path path(p);
        if (path.is_relative()) {
            path = config_dir / path;
        }
        return fs::weakly_canonical(path);
    }
};

json parse_config(const fs::path& path)
{
    std::string text;
    try {
        text = read_file(path);
    } catch (const FormatError& e) {
        throw ConfigError("", std::string("cannot read config: ") + e.what());
    }
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        const auto upto = text.substr(0, std::min<std::size_t>(e.byte, text.size()));
        const auto line = 1 + std::count(upto.begin(), upto.end(), '\n');
        throw ConfigError("", path.string() + ":" + std::to_string(line) + ": malformed JSON (" + e.what() + ")");
    }
}

const std::set<std::string> kCommandBlocks{"simulate", "reconstruct", "denoise", "compare_optimizers", "metrics"};

/// Reads globals and returns the command's block; other command blocks pass through unread.
Context make_context(const Globals& g, const json& cfg, Section& root)
{
    Context ctx;
    ctx.config_dir = fs::absolute(fs::path(g.config)).parent_path();

    ctx.seed = root.get<std::uint64_t>("seed", 0);
    if (g.seed) {
        ctx.seed = *g.seed;
        root.set_resolved("seed", ctx.seed);
    }

    std::string out = g.output;
    if (out.empty()) {
        out = root.get<std::string>("output", "");
    } else if (root.has("output")) {
        root.raw("output");
    }
    if (out.empty()) {
        throw ConfigError("output", "no output directory (set \"output\" or pass --output)");
    }
    fs::path out_path(out);
    if (out_path.is_relative()) {
        if (const char* env = std::getenv("PETREP_OUTPUT_ROOT"); env != nullptr && *env != '\0') {
            out_path = fs::path(env) / out_path;
        }
    }
    ctx.out = fs::weakly_canonical(fs::absolute(out_path));
    root.set_resolved("output", ctx.out.string());

    Section grid = root.child("grid");
    ctx.grid.width = grid.get<int>("width", 64);
    ctx.grid.height = grid.get<int>("height", 64);
    ctx.grid.pixel_size = grid.get<double>("pixel_size_mm", 3.0);
    try {
        ctx.grid.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError("grid", e.what());
    }
    root.done("grid", grid);

    const ProjectionGeometry cover = ProjectionGeometry::covering(ctx.grid);
    Section geo = root.child("geometry");
    ctx.geometry.n_angles = geo.get<int>("n_angles", cover.n_angles);
    ctx.geometry.n_bins = geo.get<int>("n_bins", cover.n_bins);
    ctx.geometry.bin_size = geo.get<double>("bin_size_mm", cover.bin_size);
    try {
        ctx.geometry.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError("geometry", e.what());
    }
    root.done("geometry", geo);

    for (const auto& [key, value] : cfg.items()) {
        if (kCommandBlocks.contains(key)) {
            root.raw(key);
        }
    }
    return ctx;
}

// ---------------------------------------------------------------------------
// Shared helpers

std::string iter_name(int n)
{
    std::ostringstream s;
    s << "iter_" << std::setw(4) << std::setfill('0') << n << ".img";
    return s.str();
}

std::string unit_name(int r)
{
    std::ostringstream s;
    s << "r" << std::setw(3) << std::setfill('0') << r;
    return s.str();
}

void save_preview(const Image& img, const fs::path& path)
{
    const auto [lo, hi] = percentile_window(img);
    export_png(img, lo, hi, path);
}

Image mask_image(const RoiMask& m)
{
    Image img(m.grid);
    for (std::size_t j = 0; j < img.size(); ++j) {
        img[j] = m.members[j] ? 1.0 : 0.0;
    }
    return img;
}

RoiMask mask_from_image(const Image& img, std::string label)
{
    RoiMask m{img.grid(), std::vector<bool>(img.size(), false), std::move(label)};
    for (std::size_t j = 0; j < img.size(); ++j) {
        m.members[j] = img[j] > 0.5;
    }
    return m;
}

NetConfig read_net(Section& parent)
{
    Section s = parent.child("net");
    NetConfig net;
    net.depth = s.get<int>("depth", net.depth);
    net.base_channels = s.get<int>("base_channels", net.base_channels);
    net.kernel_size = s.get<int>("kernel_size", net.kernel_size);
    net.negative_slope = s.get<double>("negative_slope", net.negative_slope);
    try {
        net.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(parent.name("net"), e.what());
    }
    parent.done("net", s);
    return net;
}

InputMode read_input_mode(Section& s)
{
    const auto mode = s.get<std::string>("input_mode", "prior");
    if (mode == "prior") {
        return InputMode::prior;
    }
    if (mode == "noise") {
        return InputMode::noise;
    }
    throw ConfigError(s.name("input_mode"), "expected \"prior\" or \"noise\", found \"" + mode + "\"");
}

Image load_input_image(const Context& ctx, Section& s, const std::string& key)
{
    const fs::path p = ctx.input_path(s.require<std::string>(key));
    s.set_resolved(key, p.string());
    return load_image(p);
}

// ---------------------------------------------------------------------------
// simulate

int cmd_simulate(Context& ctx, Section& block)
{
    Section ph = block.require_child("phantom");
    const auto preset = ph.get<std::string>("preset", "brain");
    check(preset == "brain", ph, "preset", "only the \"brain\" preset is available");
    PhantomSpec spec = PhantomSpec::brain(ctx.grid);
    if (ph.has("tumors")) {
        const json& arr = ph.raw("tumors");
        check(arr.is_array(), ph, "tumors", "expected an array");
        spec.tumors.clear();
        for (std::size_t k = 0; k < arr.size(); ++k) {
            Section t(arr[k], ph.name("tumors") + "[" + std::to_string(k) + "]");
            TumorInsert ins;
            const json c = t.raw("center_mm");
            if (!c.is_array() || c.size() != 2 || !c[0].is_number() || !c[1].is_number()) {
                throw ConfigError(t.name("center_mm"), "expected [x, y]");
            }
            ins.center_x = c[0].get<double>();
            ins.center_y = c[1].get<double>();
            ins.diameter = t.get<double>("diameter_mm", ins.diameter);
            ins.activity = t.get<double>("activity", ins.activity);
            t.finish();
            spec.tumors.push_back(ins);
        }
    } else {
        json arr = json::array();
        for (const auto& t : spec.tumors) {
            arr.push_back(
                {{"center_mm", {t.center_x, t.center_y}}, {"diameter_mm", t.diameter}, {"activity", t.activity}});
        }
        ph.set_resolved("tumors", std::move(arr));
    }
    block.done("phantom", ph);

    const double total_counts = block.get<double>("total_counts", 5e5);
    const double s_fraction = block.get<double>("s_fraction", 0.1);
    const int n_real = block.get<int>("n_realizations", 0);
    const double ratio = block.get<double>("ratio", 0.125);
    const int n_bg = block.get<int>("background_rois", 11);
    const double bg_diam = block.get<double>("background_roi_diameter_mm", 9.0);
    check(total_counts > 0.0, block, "total_counts", "must be positive");
    check(s_fraction >= 0.0 && s_fraction < 1.0, block, "s_fraction", "must be in [0, 1)");
    check(n_real >= 0, block, "n_realizations", "must be >= 0");
    check(ratio > 0.0 && ratio <= 1.0, block, "ratio", "must be in (0, 1]");
    check(n_bg >= 0, block, "background_rois", "must be >= 0");
    check(bg_diam > 0.0, block, "background_roi_diameter_mm", "must be positive");
    block.finish();

    PhantomPair pair;
    try {
        pair = make_phantom(spec);
    } catch (const std::invalid_argument& e) {
        throw ConfigError("simulate.phantom", e.what());
    }
    ctx.log->info("building system matrix " + std::to_string(ctx.geometry.n_angles) + " angles x " +
                  std::to_string(ctx.geometry.n_bins) + " bins");
    const SystemMatrix A = build_system_matrix(ctx.grid, ctx.geometry);

    const fs::path ph_dir = ctx.out / "phantom";
    save_image(pair.activity, ph_dir / "activity.img");
    save_image(pair.activity_without_tumors, ph_dir / "activity_without_tumors.img");
    save_image(pair.prior, ph_dir / "prior.img");
    save_preview(pair.activity, ph_dir / "activity.png");
    save_preview(pair.prior, ph_dir / "prior.png");
    for (const auto& [label, mask] : pair.tissue_masks) {
        save_image(mask_image(mask), ph_dir / ("mask_" + label + ".img"));
    }
    write_json(ctx.out / "system.json", {{"projector", "siddon"},
                                         {"grid", {{"width", ctx.grid.width},
                                                   {"height", ctx.grid.height},
                                                   {"pixel_size_mm", ctx.grid.pixel_size}}},
                                         {"geometry", to_json(ctx.geometry)}});

    const auto data = simulate_tumor_pair(A, pair, s_fraction, total_counts, derive_seed(ctx.seed, "simulate"));
    save_sinogram(data.with_tumor, ctx.out / "sinogram.sino");
    save_sinogram(data.tumor_free, ctx.out / "tumor_free.sino");
    save_sinogram(data.tumor_only, ctx.out / "tumor_only.sino");

    std::vector<CircleRoi> tumors;
    for (std::size_t t = 0; t < spec.tumors.size(); ++t) {
        const auto& ti = spec.tumors[t];
        tumors.push_back({ti.center_x, ti.center_y, ti.diameter, "tumor" + std::to_string(t)});
    }
    std::vector<CircleRoi> background;
    if (n_bg > 0) {
        if (!pair.tissue_masks.contains("white")) {
            throw ConfigError("simulate.background_rois", "phantom has no white-matter region");
        }
        std::optional<RoiMask> excl;
        if (!pair.tumor_masks.empty()) {
            excl = union_mask(pair.tumor_masks, "tumors");
        }
        background = place_background_rois(pair.tissue_masks.at("white"), excl ? &*excl : nullptr, n_bg, bg_diam);
    }
    json rois = {{"tumors", json::array()}, {"background", json::array()}, {"target_tissue", "gray"},
                 {"reference_tissue", "white"}};
    for (const auto& r : tumors) {
        rois["tumors"].push_back(to_json(r));
    }
    for (const auto& r : background) {
        rois["background"].push_back(to_json(r));
    }
    write_json(ctx.out / "rois.json", rois);
    write_json(ctx.out / "truth.json", {{"activity_scale", data.activity_scale},
                                        {"ratio", ratio},
                                        {"n_realizations", n_real}});

    if (n_real > 0) {
        const auto free = thin_counts(data.tumor_free, ratio, n_real, derive_seed(ctx.seed, "thin-free"));
        const auto only = thin_counts(data.tumor_only, ratio, n_real, derive_seed(ctx.seed, "thin-only"));
        for (int r = 0; r < n_real; ++r) {
            const auto k = static_cast<std::size_t>(r);
            Sinogram with = free[k];
            for (std::size_t i = 0; i < with.size(); ++i) {
                with.counts[i] += only[k].counts[i];
            }
            save_sinogram(with, ctx.out / "realizations" / "with_tumor" / (unit_name(r) + ".sino"));
            save_sinogram(free[k], ctx.out / "realizations" / "tumor_free" / (unit_name(r) + ".sino"));
        }
    }
    ctx.log->info("simulate finished: " + std::to_string(n_real) + " realizations");
    return 0;
}

// ---------------------------------------------------------------------------
// reconstruct

struct Unit {
    std::string dataset;
    std::string name;
    fs::path sinogram;
};

std::string history_header(bool admm)
{
    return admm ? "iteration,log_likelihood,primal_residual,fit_loss\n" : "iteration,log_likelihood\n";
}

int cmd_reconstruct(Context& ctx, Section& block)
{
    const fs::path input = ctx.input_path(block.require<std::string>("input"));
    block.set_resolved("input", input.string());
    const auto source = block.get<std::string>("source", "sinogram");
    check(source == "sinogram" || source == "realizations", block, "source",
          "expected \"sinogram\" or \"realizations\"");
    const auto method = block.get<std::string>("method", "mlem");
    check(method == "mlem" || method == "em-filter" || method == "kmri" || method == "dip-admm", block, "method",
          "expected one of mlem, em-filter, kmri, dip-admm; found \"" + method + "\"");
    const int iterations = block.get<int>("iterations", 100);
    const int every = block.get<int>("checkpoint_every", 20);
    const double fwhm = block.get<double>("fwhm_px", 2.0);
    const bool previews = block.get<bool>("previews", true);
    check(iterations >= 0, block, "iterations", "must be >= 0");
    check(every >= 1, block, "checkpoint_every", "must be >= 1");
    check(fwhm >= 0.0, block, "fwhm_px", "must be >= 0");

    std::vector<std::string> datasets{"with_tumor", "tumor_free"};
    if (block.has("datasets")) {
        const json& d = block.raw("datasets");
        check(d.is_array() && !d.empty(), block, "datasets", "expected a non-empty array");
        datasets.clear();
        for (const auto& e : d) {
            check(e.is_string() && (e == "with_tumor" || e == "tumor_free"), block, "datasets",
                  "entries must be \"with_tumor\" or \"tumor_free\"");
            datasets.push_back(e.get<std::string>());
        }
    } else {
        block.set_resolved("datasets", datasets);
    }

    Section kernel = block.child("kernel");
    KernelConfig kcfg;
    kcfg.neighbors = kernel.get<int>("neighbors", kcfg.neighbors);
    kcfg.patch_radius = kernel.get<int>("patch_radius", kcfg.patch_radius);
    kcfg.search_radius = kernel.get<int>("search_radius", kcfg.search_radius);
    try {
        kcfg.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError("reconstruct.kernel", e.what());
    }
    block.done("kernel", kernel);

    Section admm = block.child("admm");
    AdmmConfig acfg;
    const bool rho_given = admm.has("rho");
    acfg.rho = admm.get<double>("rho", kDefaultRho);
    acfg.em_subiterations = admm.get<int>("em_subiterations", acfg.em_subiterations);
    acfg.optimizer_iterations = admm.get<int>("optimizer_iterations", 10);
    acfg.lbfgs_memory = admm.get<int>("lbfgs_memory", acfg.lbfgs_memory);
    acfg.input_mode = read_input_mode(admm);
    acfg.outer_iterations = iterations;
    acfg.seed = derive_seed(ctx.seed, "reconstruct");
    try {
        acfg.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError("reconstruct.admm", e.what());
    }
    block.done("admm", admm);
    const NetConfig net = read_net(block);
    block.finish();

    std::vector<Unit> units;
    for (const auto& ds : datasets) {
        if (source == "sinogram") {
            units.push_back({ds, "sinogram", input / (ds == "with_tumor" ? "sinogram.sino" : "tumor_free.sino")});
            continue;
        }
        const fs::path dir = input / "realizations" / ds;
        if (!fs::is_directory(dir)) {
            throw std::runtime_error("no realizations found in '" + dir.string() + "'");
        }
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(dir)) {
            if (e.path().extension() == ".sino") {
                files.push_back(e.path());
            }
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            units.push_back({ds, f.stem().string(), f});
        }
    }
    if (units.empty()) {
        throw std::runtime_error("no sinograms to reconstruct in '" + input.string() + "'");
    }

    const fs::path prior_path = input / "phantom" / "prior.img";
    std::optional<Image> prior;
    if (method == "kmri" || method == "dip-admm") {
        prior = load_image(prior_path);
        require_same_grid(prior->grid(), ctx.grid, "reconstruct (prior vs config grid)");
    }
    if (method == "dip-admm" && !rho_given) {
        ctx.log->warn("admm.rho not set; using " + format_number(kDefaultRho) +
                      ", which suits roughly 1e5 counts on a 64x64 grid. Re-tune rho for other count levels.");
    }

    const SystemMatrix A = build_system_matrix(ctx.grid, ctx.geometry);
    std::optional<SparseMatrix> K;
    if (method == "kmri") {
        K = build_kernel_matrix(*prior, kcfg);
    }

    const json truth = read_json(input / "truth.json");
    const double scale = truth.at("activity_scale").get<double>() *
                         (source == "realizations" ? truth.at("ratio").get<double>() : 1.0);
    write_json(ctx.out / "reconstruction.json",
               {{"method", method}, {"source", source}, {"iterations", iterations}, {"truth_scale", scale}});

    auto is_checkpoint = [&](int n) { return n == iterations || (n > 0 && n % every == 0); };

    for (const auto& u : units) {
        const Sinogram y = load_sinogram(u.sinogram);
        if (y.geometry != ctx.geometry) {
            throw std::runtime_error("'" + u.sinogram.string() + "' does not match the configured geometry");
        }
        const fs::path dir = ctx.out / u.dataset / u.name;
        std::string history = history_header(method == "dip-admm");
        auto emit = [&](int n, const Image& img) {
            save_image(img, dir / iter_name(n));
            if (previews) {
                fs::path png = dir / iter_name(n);
                png.replace_extension(".png");
                save_preview(img, png);
            }
        };

        if (method == "dip-admm") {
            const auto res = admm_reconstruct(y, A, *prior, net, acfg, [&](const AdmmState& st, const Image& f) {
                if (is_checkpoint(st.n)) {
                    emit(st.n, clamp_nonnegative(f));
                }
            });
            const auto& st = res.state;
            for (std::size_t k = 0; k < st.log_likelihood.size(); ++k) {
                history += std::to_string(k + 1) + "," + format_number(st.log_likelihood[k]) + "," +
                           format_number(st.primal_residual[k]) + "," + format_number(st.fit_loss[k]) + "\n";
            }
            if (iterations == 0) {
                emit(0, res.image);
            }
        } else if (method == "kmri") {
            const KernelSystem<SystemMatrix> AK(A, *K);
            const Image a0 = default_initial_image(y, AK);
            if (iterations == 0) {
                emit(0, apply_kernel(*K, a0));
            }
            kernel_em_reconstruct(y, A, *K, iterations, a0, [&](int n, const Image& x) {
                history += std::to_string(n) + "," + format_number(log_likelihood(y, x, A)) + "\n";
                if (is_checkpoint(n)) {
                    emit(n, x);
                }
            });
        } else {
            const bool filter = method == "em-filter" && fwhm > 0.0;
            const Image x0 = default_initial_image(y, A);
            if (iterations == 0) {
                emit(0, filter ? gaussian_filter(x0, fwhm) : x0);
            }
            mlem_reconstruct(y, A, iterations, x0, [&](int n, const Image& x) {
                history += std::to_string(n) + "," + format_number(log_likelihood(y, x, A)) + "\n";
                if (is_checkpoint(n)) {
                    emit(n, filter ? gaussian_filter(x, fwhm) : x);
                }
            });
        }
        write_file_atomic(dir / "history.csv", history);
        ctx.log->info("reconstructed " + u.dataset + "/" + u.name);
    }
    return 0;
}

// ---------------------------------------------------------------------------
// denoise

std::vector<RoiMask> masks_from(const json& arr, const ImageGrid& grid, const std::string& key)
{
    if (!arr.is_array() || arr.empty()) {
        throw ConfigError(key, "expected a non-empty array of circular ROIs");
    }
    std::vector<RoiMask> out;
    for (const auto& e : arr) {
        out.push_back(circular_roi(grid, circle_roi_from_json(e)));
    }
    return out;
}

int cmd_denoise(Context& ctx, Section& block)
{
    const auto method = block.get<std::string>("method", "gaussian");
    check(method == "gaussian" || method == "nlm" || method == "dip", block, "method",
          "expected one of gaussian, nlm, dip; found \"" + method + "\"");
    const Image noisy = load_input_image(ctx, block, "noisy");
    std::optional<Image> guide;
    if (block.has("guide")) {
        guide = load_input_image(ctx, block, "guide");
        require_same_grid(noisy.grid(), guide->grid(), "denoise (guide vs noisy)");
    } else if (method != "gaussian") {
        throw ConfigError(block.name("guide"), "a guide image is required for method " + method);
    }
    const double fwhm = block.get<double>("fwhm_px", 1.0);
    check(fwhm > 0.0, block, "fwhm_px", "must be positive");
    Section nlm = block.child("nlm");
    NlmConfig ncfg;
    ncfg.window = nlm.get<int>("window", ncfg.window);
    ncfg.patch = nlm.get<int>("patch", ncfg.patch);
    ncfg.h = nlm.get<double>("h", ncfg.h);
    try {
        ncfg.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError("denoise.nlm", e.what());
    }
    block.done("nlm", nlm);
    const int epochs = block.get<int>("epochs", 700);
    check(epochs >= 0, block, "epochs", "must be >= 0");
    const InputMode mode = read_input_mode(block);
    const NetConfig net = read_net(block);
    std::optional<fs::path> rois_path;
    if (block.has("rois")) {
        rois_path = ctx.input_path(block.require<std::string>("rois"));
        block.set_resolved("rois", rois_path->string());
    }
    block.finish();

    Image out;
    if (method == "gaussian") {
        out = gaussian_filter(noisy, fwhm);
    } else if (method == "nlm") {
        out = nlm_guided_filter(noisy, *guide, ncfg);
    } else {
        TrainTrace trace;
        out = denoise_direct(noisy, *guide, epochs, derive_seed(ctx.seed, "denoise"), net, mode, &trace);
        std::string hist = "iteration,loss\n";
        for (std::size_t i = 0; i < trace.size(); ++i) {
            hist += std::to_string(i + 1) + "," + format_number(trace.losses[i]) + "\n";
        }
        write_file_atomic(ctx.out / "history.csv", hist);
        write_file_atomic(ctx.out / "logs" / "dip_trace.csv", trace_to_csv(trace));
    }
    save_image(out, ctx.out / "denoised.img");
    save_preview(out, ctx.out / "denoised.png");

    if (rois_path) {
        const json r = read_json(*rois_path);
        if (!r.contains("lesion") || !r.contains("muscle")) {
            throw ConfigError("denoise.rois", "ROI file needs \"lesion\" and \"muscle\" entries");
        }
        const auto lesion = masks_from(r.at("lesion"), out.grid(), "denoise.rois.lesion");
        const auto muscle = masks_from(r.at("muscle"), out.grid(), "denoise.rois.muscle");
        std::string csv = "lesion,method,cnr\n";
        for (const auto& l : lesion) {
            csv += l.label + "," + method + "," + format_number(cnr(out, l, muscle)) + "\n";
        }
        write_file_atomic(ctx.out / "cnr.csv", csv);
    }
    ctx.log->info("denoise finished with method " + method);
    return 0;
}

// ---------------------------------------------------------------------------
// compare-optimizers

/// Line plot of several series on a white background; series get distinct gray levels.
std::string plot_png(const std::vector<std::vector<double>>& series, int width = 480, int height = 320)
{
    std::vector<std::uint8_t> px(static_cast<std::size_t>(width * height), 255);
    const int left = 40;
    const int right = width - 10;
    const int top = 10;
    const int bottom = height - 30;
    double lo = 0.0;
    double hi = 0.0;
    std::size_t n = 1;
    for (const auto& s : series) {
        for (double v : s) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        n = std::max(n, s.size());
    }
    if (!(hi > lo)) {
        hi = lo + 1.0;
    }
    auto put = [&](int x, int y, std::uint8_t v) {
        if (x >= 0 && x < width && y >= 0 && y < height) {
            px[static_cast<std::size_t>(y * width + x)] = v;
        }
    };
    auto line = [&](int x0, int y0, int x1, int y1, std::uint8_t v) {
        const int dx = std::abs(x1 - x0);
        const int dy = -std::abs(y1 - y0);
        const int sx = x0 < x1 ? 1 : -1;
        const int sy = y0 < y1 ? 1 : -1;
        int err = dx + dy;
        while (true) {
            put(x0, y0, v);
            if (x0 == x1 && y0 == y1) {
                break;
            }
            const int e2 = 2 * err;
            if (e2 >= dy) {
                err += dy;
                x0 += sx;
            }
            if (e2 <= dx) {
                err += dx;
                y0 += sy;
            }
        }
    };
    line(left, bottom, right, bottom, 0);
    line(left, top, left, bottom, 0);
    const int zero_y = bottom - static_cast<int>(std::lround((0.0 - lo) / (hi - lo) * (bottom - top)));
    for (int x = left; x <= right; x += 4) {
        put(x, zero_y, 160);
    }
    const std::uint8_t shades[] = {170, 100, 0};
    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& s = series[k];
        auto to_xy = [&](std::size_t i) {
            const double fx = n > 1 ? static_cast<double>(i) / static_cast<double>(n - 1) : 0.0;
            return std::pair{left + static_cast<int>(std::lround(fx * (right - left))),
                             bottom - static_cast<int>(std::lround((s[i] - lo) / (hi - lo) * (bottom - top)))};
        };
        for (std::size_t i = 1; i < s.size(); ++i) {
            const auto [x0, y0] = to_xy(i - 1);
            const auto [x1, y1] = to_xy(i);
            line(x0, y0, x1, y1, shades[k % 3]);
        }
    }
    return encode_png_gray(width, height, px);
}

int cmd_compare_optimizers(Context& ctx, Section& block)
{
    const Image target = load_input_image(ctx, block, "target");
    const Image input = load_input_image(ctx, block, "input");
    require_same_grid(target.grid(), input.grid(), "compare-optimizers (input vs target)");
    const int iterations = block.get<int>("iterations", 300);
    const int ref_iterations = block.get<int>("reference_iterations", 700);
    check(iterations >= 1, block, "iterations", "must be >= 1");
    check(ref_iterations >= 1, block, "reference_iterations", "must be >= 1");
    const InputMode mode = read_input_mode(block);
    const NetConfig net = read_net(block);

    Section adam = block.child("adam");
    FirstOrderConfig acfg;
    acfg.step_size = adam.get<double>("step_size", acfg.step_size);
    acfg.beta1 = adam.get<double>("beta1", acfg.beta1);
    acfg.beta2 = adam.get<double>("beta2", acfg.beta2);
    block.done("adam", adam);
    Section nag = block.child("nag");
    FirstOrderConfig ncfg;
    ncfg.step_size = nag.get<double>("step_size", kNagStepSize);
    ncfg.momentum = nag.get<double>("momentum", ncfg.momentum);
    block.done("nag", nag);
    Section lb = block.child("lbfgs");
    LbfgsConfig lcfg;
    lcfg.memory = lb.get<int>("memory", lcfg.memory);
    block.done("lbfgs", lb);
    block.finish();
    acfg.max_iterations = ref_iterations;
    ncfg.max_iterations = iterations;
    lcfg.max_iterations = iterations;
    try {
        acfg.validate();
        ncfg.validate();
        lcfg.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError("compare_optimizers", e.what());
    }

    const std::uint64_t seed = derive_seed(ctx.seed, "compare-optimizers");
    NetworkRepresentation rep(net, make_network_input(input, mode, seed));
    const auto theta0 = init_params(net, derive_seed(seed, "theta0")).values;
    auto objective = [&](std::span<const double> th, std::span<double> g) {
        return rep.fit_loss(th, target.values(), g);
    };

    ctx.log->info("adam: " + std::to_string(ref_iterations) + " iterations");
    const auto ra = adam_minimize(objective, theta0, acfg);
    ctx.log->info("nag: " + std::to_string(iterations) + " iterations");
    const auto rn = nag_minimize(objective, theta0, ncfg);
    ctx.log->info("lbfgs: " + std::to_string(iterations) + " iterations");
    const auto rl = lbfgs_minimize(objective, theta0, lcfg);
    ctx.log->info(std::string("lbfgs stopped: ") + to_string(rl.reason));

    const double phi_ref = ra.trace.final_loss();
    const double phi_1 = ra.trace.losses.front();
    auto first_n = [&](const TrainTrace& t) {
        std::vector<double> v(t.losses.begin(), t.losses.begin() + std::min<std::ptrdiff_t>(iterations, t.size()));
        const double last = v.empty() ? t.initial_loss : v.back();
        v.resize(static_cast<std::size_t>(iterations), last);
        return normalized_cost(v, phi_ref, phi_1);
    };
    const auto la = first_n(ra.trace);
    const auto ln = first_n(rn.trace);
    const auto ll = first_n(rl.trace);

    std::string csv = "iteration,adam,nag,lbfgs\n";
    for (int i = 0; i < iterations; ++i) {
        const auto k = static_cast<std::size_t>(i);
        csv += std::to_string(i + 1) + "," + format_number(la[k]) + "," + format_number(ln[k]) + "," +
               format_number(ll[k]) + "\n";
    }
    write_file_atomic(ctx.out / "normalized_cost.csv", csv);
    write_file_atomic(ctx.out / "normalized_cost.png", plot_png({la, ln, ll}));
    write_json(ctx.out / "summary.json", {{"phi_ref", phi_ref},
                                          {"phi_1", phi_1},
                                          {"final", {{"adam", la.back()}, {"nag", ln.back()}, {"lbfgs", ll.back()}}},
                                          {"lbfgs_stop", to_string(rl.reason)}});
    write_file_atomic(ctx.out / "logs" / "adam_trace.csv", trace_to_csv(ra.trace));
    write_file_atomic(ctx.out / "logs" / "nag_trace.csv", trace_to_csv(rn.trace));
    write_file_atomic(ctx.out / "logs" / "lbfgs_trace.csv", trace_to_csv(rl.trace));
    return 0;
}

// ---------------------------------------------------------------------------
// metrics

std::map<int, fs::path> list_checkpoints(const fs::path& dir)
{
    std::map<int, fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        const auto stem = e.path().stem().string();
        if (e.path().extension() == ".img" && stem.rfind("iter_", 0) == 0) {
            out[std::stoi(stem.substr(5))] = e.path();
        }
    }
    return out;
}

std::vector<std::string> list_units(const fs::path& dir)
{
    std::vector<std::string> out;
    if (fs::is_directory(dir)) {
        for (const auto& e : fs::directory_iterator(dir)) {
            if (e.is_directory()) {
                out.push_back(e.path().filename().string());
            }
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

int cmd_metrics(Context& ctx, Section& block)
{
    const fs::path sim = ctx.input_path(block.require<std::string>("simulation"));
    block.set_resolved("simulation", sim.string());
    const fs::path rec = ctx.input_path(block.require<std::string>("reconstruction"));
    block.set_resolved("reconstruction", rec.string());
    const int stride = block.get<int>("stride", 20);
    check(stride >= 1, block, "stride", "must be >= 1");
    const auto method = block.get<std::string>("method", read_json(rec / "reconstruction.json").at("method").get<std::string>());
    const int seed_set = block.get<int>("seed_set", 0);
    const auto protocol = block.get<std::string>("protocol", "tumor-difference");
    check(protocol == "tumor-difference" || protocol == "direct", block, "protocol",
          "expected \"tumor-difference\" or \"direct\"");
    fs::path rois_path = sim / "rois.json";
    if (block.has("rois")) {
        rois_path = ctx.input_path(block.require<std::string>("rois"));
    }
    block.set_resolved("rois", rois_path.string());
    block.finish();

    if (!fs::exists(rois_path)) {
        throw ConfigError("metrics.rois", "missing ROI definitions: '" + rois_path.string() + "' not found");
    }
    const json rois = read_json(rois_path);
    for (const char* key : {"tumors", "background", "target_tissue", "reference_tissue"}) {
        if (!rois.contains(key)) {
            throw ConfigError("metrics.rois", std::string("ROI definitions lack \"") + key + "\"");
        }
    }

    const auto with_units = list_units(rec / "with_tumor");
    if (with_units.empty()) {
        throw std::runtime_error("empty realization list: no reconstructions under '" +
                                 (rec / "with_tumor").string() + "'");
    }
    const bool diff = protocol == "tumor-difference";
    if (diff && list_units(rec / "tumor_free") != with_units) {
        throw std::runtime_error("tumor-difference protocol needs matching tumor_free reconstructions");
    }

    std::vector<int> iters;
    {
        const auto first = list_checkpoints(rec / "with_tumor" / with_units.front());
        for (const auto& [n, path] : first) {
            if (n > 0 && n % stride == 0) {
                iters.push_back(n);
            }
        }
    }
    if (iters.empty()) {
        throw std::runtime_error("no checkpoints at multiples of the stride " + std::to_string(stride));
    }

    const Image activity = load_image(sim / "phantom" / "activity.img");
    const Image background_truth = load_image(sim / "phantom" / "activity_without_tumors.img");
    const ImageGrid& grid = activity.grid();
    const double scale = read_json(rec / "reconstruction.json").at("truth_scale").get<double>();
    const auto tissue = [&](const std::string& label) {
        return mask_from_image(load_image(sim / "phantom" / ("mask_" + label + ".img")), label);
    };
    const RoiMask target = tissue(rois.at("target_tissue").get<std::string>());
    const RoiMask reference = tissue(rois.at("reference_tissue").get<std::string>());
    std::vector<RoiMask> tumor_masks;
    for (const auto& t : rois.at("tumors")) {
        tumor_masks.push_back(circular_roi(grid, circle_roi_from_json(t)));
    }
    if (tumor_masks.empty()) {
        throw ConfigError("metrics.rois", "no tumor ROIs defined");
    }
    const RoiMask tumors = union_mask(tumor_masks, "tumors");
    std::vector<RoiMask> bg;
    for (const auto& b : rois.at("background")) {
        bg.push_back(circular_roi(grid, circle_roi_from_json(b)));
    }
    if (bg.empty()) {
        throw ConfigError("metrics.rois", "no background ROIs defined");
    }

    const double true_target = target.mean(background_truth);
    const double true_reference = reference.mean(background_truth);
    Image excess(grid);
    for (std::size_t j = 0; j < excess.size(); ++j) {
        excess[j] = (diff ? activity[j] - background_truth[j] : activity[j]) * scale;
    }
    const double l_true = tumors.mean(excess);

    std::vector<CurvePoint> crc_curve;
    std::vector<CurvePoint> cr_curve;
    for (int n : iters) {
        std::vector<Image> noise_set;
        std::vector<Image> tumor_set;
        for (const auto& u : with_units) {
            Image with = load_image(rec / "with_tumor" / u / iter_name(n));
            if (!diff) {
                noise_set.push_back(with);
                tumor_set.push_back(std::move(with));
                continue;
            }
            Image free = load_image(rec / "tumor_free" / u / iter_name(n));
            for (std::size_t j = 0; j < with.size(); ++j) {
                with[j] -= free[j];
            }
            save_image(with, ctx.out / "tumor_only" / u / iter_name(n));
            noise_set.push_back(std::move(free));
            tumor_set.push_back(std::move(with));
        }
        const RealizationSet noise(std::move(noise_set));
        const RealizationSet tumor(std::move(tumor_set));
        const double sd = noise.size() >= 2 ? background_std(noise, bg) : 0.0;
        crc_curve.push_back({n, crc(noise, target, reference, true_target, true_reference), sd});
        cr_curve.push_back({n, contrast_recovery(tumor, tumors, l_true), sd});
    }
    if (with_units.size() < 2) {
        ctx.log->warn("a single realization gives no ensemble STD; the std column is 0");
    }
    write_file_atomic(ctx.out / "crc.csv", curve_to_csv(crc_curve, method, seed_set));
    write_file_atomic(ctx.out / "cr.csv", curve_to_csv(cr_curve, method, seed_set));
    ctx.log->info("metrics over " + std::to_string(with_units.size()) + " realizations");
    return 0;
}

// ---------------------------------------------------------------------------

using Command = int (*)(Context&, Section&);

int run(const Globals& g, const std::string& name, const std::string& block_key, Command cmd)
{
    const json cfg = parse_config(g.config);
    Section root(cfg, "");
    Context ctx = make_context(g, cfg, root);
    if (g.threads < 1) {
        throw ConfigError("--threads", "must be >= 1");
    }
    if (!cfg.contains(block_key)) {
        root.finish();
        throw ConfigError(block_key, "required block is missing");
    }
    Section block(cfg.at(block_key), block_key);
    root.finish();

    fs::create_directories(ctx.out);
    ctx.log = std::make_unique<RunLog>(ctx.out / "logs");
    ctx.log->info("petrep " + name + " seed=" + std::to_string(ctx.seed));

    const int status = cmd(ctx, block);
    json resolved = root.resolved();
    resolved[block_key] = block.resolved();
    write_json(ctx.out / "config.resolved.json", resolved);
    return status;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"petrep: PET reconstruction with a personalized network representation"};
    app.require_subcommand(1);
    Globals g;

    struct Sub {
        const char* name;
        const char* block;
        const char* help;
        Command cmd;
    };
    const std::vector<Sub> subs{
        {"simulate", "simulate", "Generate the phantom pair, system description and noisy sinograms", cmd_simulate},
        {"reconstruct", "reconstruct", "Reconstruct simulated data (mlem, em-filter, kmri, dip-admm)",
         cmd_reconstruct},
        {"denoise", "denoise", "Post-filter an image (gaussian, nlm, dip)", cmd_denoise},
        {"compare-optimizers", "compare_optimizers", "Adam, NAG and L-BFGS on the network fitting loss",
         cmd_compare_optimizers},
        {"metrics", "metrics", "CRC and CR against ensemble STD over realizations", cmd_metrics},
    };
    std::uint64_t seed = 0;
    for (const auto& s : subs) {
        auto* sc = app.add_subcommand(s.name, s.help);
        sc->add_option("--config", g.config, "JSON run configuration")->required()->check(CLI::ExistingFile);
        sc->add_option("--output", g.output, "Output directory (overrides the config)");
        sc->add_option("--seed", seed, "Root seed (overrides the config)");
        sc->add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    for (const auto& s : subs) {
        auto* sc = app.get_subcommand(s.name);
        if (!sc->parsed()) {
            continue;
        }
        if (sc->count("--seed") > 0) {
            g.seed = seed;
        }
        try {
            return run(g, s.name, s.block, s.cmd);
        } catch (const ConfigError& e) {
            std::cerr << "config error: " << e.what() << "\n";
            return 2;
        } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << "\n";
            return 3;
        }
    }
    return 2;
}
