#pragma once

#include "petrep/forward_model.hpp" // reflect_index
#include "petrep/image.hpp"
#include "petrep/io.hpp"
#include "petrep/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace petrep {

/// Encoder-decoder layout: `depth` resolution levels with base_channels * 2^level
/// channels, stride-2 convolutions for downsampling, bilinear x2 upsampling,
/// additive skips and leaky units. The output layer is a linear 1x1 convolution.
struct NetConfig {
    int depth = 3;
    int base_channels = 4;
    int kernel_size = 3;
    double negative_slope = 0.1;
    std::uint64_t seed = 0;
    int input_channels = 1;

    void validate() const
    {
        if (depth < 2) {
            throw std::invalid_argument("NetConfig: depth must be >= 2");
        }
        if (base_channels < 1 || input_channels < 1) {
            throw std::invalid_argument("NetConfig: channel counts must be >= 1");
        }
        if (kernel_size != 1 && kernel_size != 3) {
            throw std::invalid_argument("NetConfig: kernel_size must be 1 or 3");
        }
        if (!(negative_slope >= 0.0) || !std::isfinite(negative_slope)) {
            throw std::invalid_argument("NetConfig: negative_slope must be finite and >= 0");
        }
    }

    void validate_input(int height, int width) const
    {
        validate();
        const int f = 1 << (depth - 1);
        if (height < f || width < f || height % f != 0 || width % f != 0) {
            throw std::invalid_argument("NetConfig: input dims must be divisible by 2^(depth-1)");
        }
    }

    [[nodiscard]] int channels(int level) const noexcept { return base_channels << level; }
};

struct LayerSpec {
    std::string name;
    int c_in = 0;
    int c_out = 0;
    int kernel = 3;
    int stride = 1;
    std::size_t weight_offset = 0;
    std::size_t bias_offset = 0;

    [[nodiscard]] std::size_t weight_count() const noexcept
    {
        return static_cast<std::size_t>(kernel) * kernel * c_in * c_out;
    }
    [[nodiscard]] std::size_t param_count() const noexcept
    {
        return weight_count() + static_cast<std::size_t>(c_out);
    }
};

/// Layers in evaluation order; weights are [c_out][c_in][ky][kx] followed by biases.
inline std::vector<LayerSpec> build_layout(const NetConfig& cfg)
{
    cfg.validate();
    const int k = cfg.kernel_size;
    std::vector<LayerSpec> layers;
    auto add = [&](std::string name, int c_in, int c_out, int kernel, int stride) {
        layers.push_back({std::move(name), c_in, c_out, kernel, stride, 0, 0});
    };
    add("enc0_conv0", cfg.input_channels, cfg.channels(0), k, 1);
    add("enc0_conv1", cfg.channels(0), cfg.channels(0), k, 1);
    for (int l = 1; l < cfg.depth; ++l) {
        add("enc" + std::to_string(l) + "_down", cfg.channels(l - 1), cfg.channels(l), k, 2);
        add("enc" + std::to_string(l) + "_conv", cfg.channels(l), cfg.channels(l), k, 1);
    }
    for (int l = cfg.depth - 2; l >= 0; --l) {
        add("dec" + std::to_string(l) + "_conv0", cfg.channels(l + 1), cfg.channels(l), k, 1);
        add("dec" + std::to_string(l) + "_conv1", cfg.channels(l), cfg.channels(l), k, 1);
    }
    add("out", cfg.channels(0), 1, 1, 1);
    std::size_t offset = 0;
    for (auto& layer : layers) {
        layer.weight_offset = offset;
        layer.bias_offset = offset + layer.weight_count();
        offset += layer.param_count();
    }
    return layers;
}

/// Sum over layers of k*k*c_in*c_out + c_out.
inline std::size_t count_params(const NetConfig& cfg)
{
    std::size_t n = 0;
    for (const auto& l : build_layout(cfg)) {
        n += l.param_count();
    }
    return n;
}

struct ParamVector {
    std::vector<double> values;
    std::vector<LayerSpec> layout;

    [[nodiscard]] std::size_t size() const noexcept { return values.size(); }
};

/// He-style init for leaky units: N(0, 2 / (fan_in (1 + slope^2))), zero biases.
inline ParamVector init_params(const NetConfig& cfg, std::uint64_t seed)
{
    ParamVector p{std::vector<double>(count_params(cfg), 0.0), build_layout(cfg)};
    Rng rng(seed);
    const double slope2 = cfg.negative_slope * cfg.negative_slope;
    for (const auto& layer : p.layout) {
        const double fan_in = static_cast<double>(layer.kernel * layer.kernel * layer.c_in);
        const double sd = std::sqrt(2.0 / (fan_in * (1.0 + slope2)));
        for (std::size_t i = 0; i < layer.weight_count(); ++i) {
            p.values[layer.weight_offset + i] = sd * rng.normal();
        }
    }
    return p;
}

/// Min-max normalization to [0, 1]; a constant image maps to zeros.
inline Image normalize_minmax(const Image& img)
{
    const auto [lo, hi] = std::minmax_element(img.values().begin(), img.values().end());
    Image out(img.grid());
    const double range = *hi - *lo;
    if (range > 0.0) {
        for (std::size_t j = 0; j < img.size(); ++j) {
            out[j] = (img[j] - *lo) / range;
        }
    }
    return out;
}

/// Channel-major feature map.
struct Tensor {
    int c = 0;
    int h = 0;
    int w = 0;
    std::vector<double> data;

    void resize(int channels, int height, int width)
    {
        c = channels;
        h = height;
        w = width;
        data.assign(static_cast<std::size_t>(c) * h * w, 0.0);
    }
    [[nodiscard]] std::size_t plane() const noexcept { return static_cast<std::size_t>(h) * w; }
    double* channel(int ch) noexcept { return data.data() + static_cast<std::size_t>(ch) * plane(); }
    [[nodiscard]] const double* channel(int ch) const noexcept
    {
        return data.data() + static_cast<std::size_t>(ch) * plane();
    }
};

/// Bilinear x2 upsampling, half-pixel (align-corners false) convention with edge clamping.
inline void bilinear_upsample(const Tensor& in, Tensor& out)
{
    out.resize(in.c, 2 * in.h, 2 * in.w);
    std::vector<double> row(static_cast<std::size_t>(out.w));
    for (int ch = 0; ch < in.c; ++ch) {
        const double* src = in.channel(ch);
        double* dst = out.channel(ch);
        std::vector<double> wide(static_cast<std::size_t>(in.h) * out.w);
        for (int y = 0; y < in.h; ++y) {
            const double* s = src + static_cast<std::size_t>(y) * in.w;
            double* d = wide.data() + static_cast<std::size_t>(y) * out.w;
            for (int i = 0; i < in.w; ++i) {
                d[2 * i] = 0.75 * s[i] + 0.25 * s[std::max(i - 1, 0)];
                d[2 * i + 1] = 0.75 * s[i] + 0.25 * s[std::min(i + 1, in.w - 1)];
            }
        }
        for (int i = 0; i < in.h; ++i) {
            const double* mid = wide.data() + static_cast<std::size_t>(i) * out.w;
            const double* up = wide.data() + static_cast<std::size_t>(std::max(i - 1, 0)) * out.w;
            const double* dn = wide.data() + static_cast<std::size_t>(std::min(i + 1, in.h - 1)) * out.w;
            double* d0 = dst + static_cast<std::size_t>(2 * i) * out.w;
            double* d1 = dst + static_cast<std::size_t>(2 * i + 1) * out.w;
            for (int x = 0; x < out.w; ++x) {
                d0[x] = 0.75 * mid[x] + 0.25 * up[x];
                d1[x] = 0.75 * mid[x] + 0.25 * dn[x];
            }
        }
    }
}

/// Adjoint of bilinear_upsample: `grad_out` has twice the dims of the result.
inline void bilinear_upsample_adjoint(const Tensor& grad_out, Tensor& grad_in)
{
    grad_in.resize(grad_out.c, grad_out.h / 2, grad_out.w / 2);
    const int h = grad_in.h;
    const int w = grad_in.w;
    std::vector<double> wide(static_cast<std::size_t>(h) * grad_out.w);
    for (int ch = 0; ch < grad_out.c; ++ch) {
        const double* g = grad_out.channel(ch);
        std::fill(wide.begin(), wide.end(), 0.0);
        for (int i = 0; i < h; ++i) {
            const double* g0 = g + static_cast<std::size_t>(2 * i) * grad_out.w;
            const double* g1 = g + static_cast<std::size_t>(2 * i + 1) * grad_out.w;
            double* mid = wide.data() + static_cast<std::size_t>(i) * grad_out.w;
            double* up = wide.data() + static_cast<std::size_t>(std::max(i - 1, 0)) * grad_out.w;
            double* dn = wide.data() + static_cast<std::size_t>(std::min(i + 1, h - 1)) * grad_out.w;
            for (int x = 0; x < grad_out.w; ++x) {
                mid[x] += 0.75 * (g0[x] + g1[x]);
                up[x] += 0.25 * g0[x];
                dn[x] += 0.25 * g1[x];
            }
        }
        double* dst = grad_in.channel(ch);
        for (int y = 0; y < h; ++y) {
            const double* d = wide.data() + static_cast<std::size_t>(y) * grad_out.w;
            double* s = dst + static_cast<std::size_t>(y) * w;
            for (int i = 0; i < w; ++i) {
                s[i] += 0.75 * (d[2 * i] + d[2 * i + 1]);
                s[std::max(i - 1, 0)] += 0.25 * d[2 * i];
                s[std::min(i + 1, w - 1)] += 0.25 * d[2 * i + 1];
            }
        }
    }
}

/// Evaluates f(theta | input) and the gradient of ||f - target||^2. Holds scratch
/// buffers, so one instance must not be shared between threads.
class Network {
  public:
    Network(NetConfig cfg, int height, int width)
        : cfg_(cfg), layout_(build_layout(cfg)), height_(height), width_(width)
    {
        cfg_.validate_input(height, width);
        param_count_ = layout_.empty() ? 0 : layout_.back().bias_offset + layout_.back().c_out;
        inputs_.resize(layout_.size());
        pre_.resize(layout_.size());
    }

    [[nodiscard]] const NetConfig& config() const noexcept { return cfg_; }
    [[nodiscard]] const std::vector<LayerSpec>& layout() const noexcept { return layout_; }
    [[nodiscard]] std::size_t param_count() const noexcept { return param_count_; }
    [[nodiscard]] int height() const noexcept { return height_; }
    [[nodiscard]] int width() const noexcept { return width_; }
    [[nodiscard]] std::size_t pixels() const noexcept { return static_cast<std::size_t>(height_) * width_; }

    /// With `zero_skips`, encoder features are not added into the decoder.
    void forward(std::span<const double> theta, std::span<const double> input, std::span<double> output,
                 bool zero_skips = false)
    {
        run_forward(theta, input, zero_skips);
        std::copy(out_.data.begin(), out_.data.end(), output.begin());
    }

    /// Returns sum_j (f_j - target_j)^2 and writes its exact gradient into `grad`.
    double loss_and_grad(std::span<const double> theta, std::span<const double> input,
                         std::span<const double> target, std::span<double> grad)
    {
        if (target.size() != pixels() || grad.size() != param_count_) {
            throw std::invalid_argument("Network::loss_and_grad: size mismatch");
        }
        run_forward(theta, input, false);
        Tensor g;
        g.resize(1, height_, width_);
        double loss = 0.0;
        for (std::size_t j = 0; j < pixels(); ++j) {
            const double r = out_.data[j] - target[j];
            loss += r * r;
            g.data[j] = 2.0 * r;
        }
        backward(theta, g, grad);
        return loss;
    }

    /// Value-only evaluation of the fitting loss.
    double loss(std::span<const double> theta, std::span<const double> input, std::span<const double> target)
    {
        run_forward(theta, input, false);
        double total = 0.0;
        for (std::size_t j = 0; j < pixels(); ++j) {
            const double r = out_.data[j] - target[j];
            total += r * r;
        }
        return total;
    }

  private:
    void check_sizes(std::span<const double> theta, std::span<const double> input) const
    {
        if (theta.size() != param_count_) {
            throw std::invalid_argument("Network: parameter vector has wrong length");
        }
        if (input.size() != static_cast<std::size_t>(cfg_.input_channels) * pixels()) {
            throw std::invalid_argument("Network: input has wrong size");
        }
    }

    /// out = conv(in) + bias with symmetric padding of kernel/2.
    static void conv_forward(const LayerSpec& L, std::span<const double> theta, const Tensor& in,
                             Tensor& padded, Tensor& out)
    {
        const int pad = L.kernel / 2;
        pad_input(in, pad, padded);
        const int oh = in.h / L.stride;
        const int ow = in.w / L.stride;
        out.resize(L.c_out, oh, ow);
        const double* W = theta.data() + L.weight_offset;
        const double* B = theta.data() + L.bias_offset;
        const int pw = padded.w;
        for (int co = 0; co < L.c_out; ++co) {
            double* o = out.channel(co);
            std::fill(o, o + out.plane(), B[co]);
            for (int ci = 0; ci < L.c_in; ++ci) {
                const double* p = padded.channel(ci);
                for (int ky = 0; ky < L.kernel; ++ky) {
                    for (int kx = 0; kx < L.kernel; ++kx) {
                        const double wgt = W[((static_cast<std::size_t>(co) * L.c_in + ci) * L.kernel + ky) * L.kernel + kx];
                        for (int oy = 0; oy < oh; ++oy) {
                            const double* src = p + static_cast<std::size_t>(L.stride * oy + ky) * pw + kx;
                            double* dst = o + static_cast<std::size_t>(oy) * ow;
                            if (L.stride == 1) {
                                for (int ox = 0; ox < ow; ++ox) {
                                    dst[ox] += wgt * src[ox];
                                }
                            } else {
                                for (int ox = 0; ox < ow; ++ox) {
                                    dst[ox] += wgt * src[2 * ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Accumulates weight/bias gradients; writes the input gradient when `grad_in` is non-null.
    void conv_backward(const LayerSpec& L, std::span<const double> theta, const Tensor& padded,
                       const Tensor& g_out, std::span<double> grad, Tensor* grad_in)
    {
        const int pad = L.kernel / 2;
        const int oh = g_out.h;
        const int ow = g_out.w;
        const int pw = padded.w;
        const double* W = theta.data() + L.weight_offset;
        double* dW = grad.data() + L.weight_offset;
        double* dB = grad.data() + L.bias_offset;
        if (grad_in != nullptr) {
            gpad_.resize(padded.c, padded.h, padded.w);
        }
        for (int co = 0; co < L.c_out; ++co) {
            const double* g = g_out.channel(co);
            double bsum = 0.0;
            for (std::size_t k = 0; k < g_out.plane(); ++k) {
                bsum += g[k];
            }
            dB[co] += bsum;
            for (int ci = 0; ci < L.c_in; ++ci) {
                const double* p = padded.channel(ci);
                double* gp = grad_in != nullptr ? gpad_.channel(ci) : nullptr;
                for (int ky = 0; ky < L.kernel; ++ky) {
                    for (int kx = 0; kx < L.kernel; ++kx) {
                        const std::size_t widx =
                            ((static_cast<std::size_t>(co) * L.c_in + ci) * L.kernel + ky) * L.kernel + kx;
                        const double wgt = W[widx];
                        double acc = 0.0;
                        for (int oy = 0; oy < oh; ++oy) {
                            const std::size_t base = static_cast<std::size_t>(L.stride * oy + ky) * pw + kx;
                            const double* src = p + base;
                            const double* gr = g + static_cast<std::size_t>(oy) * ow;
                            if (L.stride == 1) {
                                for (int ox = 0; ox < ow; ++ox) {
                                    acc += gr[ox] * src[ox];
                                }
                                if (gp != nullptr) {
                                    double* dst = gp + base;
                                    for (int ox = 0; ox < ow; ++ox) {
                                        dst[ox] += wgt * gr[ox];
                                    }
                                }
                            } else {
                                for (int ox = 0; ox < ow; ++ox) {
                                    acc += gr[ox] * src[2 * ox];
                                }
                                if (gp != nullptr) {
                                    double* dst = gp + base;
                                    for (int ox = 0; ox < ow; ++ox) {
                                        dst[2 * ox] += wgt * gr[ox];
                                    }
                                }
                            }
                        }
                        dW[widx] += acc;
                    }
                }
            }
        }
        if (grad_in != nullptr) {
            unpad_adjoint(gpad_, pad, padded.h - 2 * pad, padded.w - 2 * pad, *grad_in);
        }
    }

    static void pad_input(const Tensor& in, int pad, Tensor& out)
    {
        out.resize(in.c, in.h + 2 * pad, in.w + 2 * pad);
        for (int ch = 0; ch < in.c; ++ch) {
            const double* s = in.channel(ch);
            double* d = out.channel(ch);
            for (int y = 0; y < out.h; ++y) {
                const int sy = reflect_index(y - pad, in.h);
                for (int x = 0; x < out.w; ++x) {
                    d[static_cast<std::size_t>(y) * out.w + x] =
                        s[static_cast<std::size_t>(sy) * in.w + reflect_index(x - pad, in.w)];
                }
            }
        }
    }

    static void unpad_adjoint(const Tensor& gpad, int pad, int h, int w, Tensor& g)
    {
        g.resize(gpad.c, h, w);
        for (int ch = 0; ch < gpad.c; ++ch) {
            const double* s = gpad.channel(ch);
            double* d = g.channel(ch);
            for (int y = 0; y < gpad.h; ++y) {
                const int dy = reflect_index(y - pad, h);
                for (int x = 0; x < gpad.w; ++x) {
                    d[static_cast<std::size_t>(dy) * w + reflect_index(x - pad, w)] +=
                        s[static_cast<std::size_t>(y) * gpad.w + x];
                }
            }
        }
    }

    void leaky(Tensor& t) const
    {
        const double a = cfg_.negative_slope;
        for (auto& v : t.data) {
            v = v >= 0.0 ? v : a * v;
        }
    }

    /// g *= leaky'(pre), using the negative slope at 0.
    void leaky_backward(const Tensor& pre, Tensor& g) const
    {
        const double a = cfg_.negative_slope;
        for (std::size_t k = 0; k < g.data.size(); ++k) {
            if (!(pre.data[k] > 0.0)) {
                g.data[k] *= a;
            }
        }
    }

    // Runs layer `idx` on `in`: stores its padded input and pre-activation, returns the activation.
    void layer(std::size_t idx, std::span<const double> theta, const Tensor& in, Tensor& act, bool activate)
    {
        conv_forward(layout_[idx], theta, in, inputs_[idx], pre_[idx]);
        act = pre_[idx];
        if (activate) {
            leaky(act);
        }
    }

    void run_forward(std::span<const double> theta, std::span<const double> input, bool zero_skips)
    {
        check_sizes(theta, input);
        const int depth = cfg_.depth;
        skips_.resize(static_cast<std::size_t>(depth));
        ups_.resize(static_cast<std::size_t>(depth));
        sums_.resize(static_cast<std::size_t>(depth));

        Tensor x;
        x.c = cfg_.input_channels;
        x.h = height_;
        x.w = width_;
        x.data.assign(input.begin(), input.end());

        std::size_t li = 0;
        Tensor a;
        layer(li++, theta, x, a, true);
        layer(li++, theta, a, skips_[0], true);
        for (int l = 1; l < depth; ++l) {
            Tensor d;
            layer(li++, theta, skips_[static_cast<std::size_t>(l - 1)], d, true);
            layer(li++, theta, d, skips_[static_cast<std::size_t>(l)], true);
        }
        Tensor h = skips_[static_cast<std::size_t>(depth - 1)];
        for (int l = depth - 2; l >= 0; --l) {
            const auto lu = static_cast<std::size_t>(l);
            bilinear_upsample(h, ups_[lu]);
            Tensor p;
            layer(li++, theta, ups_[lu], p, true);
            if (!zero_skips) {
                const auto& s = skips_[lu];
                for (std::size_t k = 0; k < p.data.size(); ++k) {
                    p.data[k] += s.data[k];
                }
            }
            sums_[lu] = std::move(p);
            layer(li++, theta, sums_[lu], h, true);
        }
        layer(li++, theta, h, out_, false);
    }

    void backward(std::span<const double> theta, Tensor& g_out, std::span<double> grad)
    {
        std::fill(grad.begin(), grad.end(), 0.0);
        const int depth = cfg_.depth;
        std::size_t li = layout_.size() - 1;

        Tensor g;
        conv_backward(layout_[li], theta, inputs_[li], g_out, grad, &g);

        std::vector<Tensor> g_skip(static_cast<std::size_t>(depth));
        for (int l = 0; l <= depth - 2; ++l) {
            // decoder level l: conv1 then conv0, in reverse
            --li;
            leaky_backward(pre_[li], g);
            Tensor g_sum;
            conv_backward(layout_[li], theta, inputs_[li], g, grad, &g_sum);
            g_skip[static_cast<std::size_t>(l)] = g_sum;
            --li;
            leaky_backward(pre_[li], g_sum);
            Tensor g_up;
            conv_backward(layout_[li], theta, inputs_[li], g_sum, grad, &g_up);
            bilinear_upsample_adjoint(g_up, g);
        }
        for (int l = depth - 1; l >= 1; --l) {
            --li;
            leaky_backward(pre_[li], g);
            Tensor g_d;
            conv_backward(layout_[li], theta, inputs_[li], g, grad, &g_d);
            --li;
            leaky_backward(pre_[li], g_d);
            conv_backward(layout_[li], theta, inputs_[li], g_d, grad, &g);
            const auto& gs = g_skip[static_cast<std::size_t>(l - 1)];
            if (!gs.data.empty()) {
                for (std::size_t k = 0; k < g.data.size(); ++k) {
                    g.data[k] += gs.data[k];
                }
            }
        }
        --li;
        leaky_backward(pre_[li], g);
        Tensor g_a;
        conv_backward(layout_[li], theta, inputs_[li], g, grad, &g_a);
        --li;
        leaky_backward(pre_[li], g_a);
        conv_backward(layout_[li], theta, inputs_[li], g_a, grad, nullptr);
    }

    NetConfig cfg_;
    std::vector<LayerSpec> layout_;
    int height_;
    int width_;
    std::size_t param_count_ = 0;
    std::vector<Tensor> inputs_; // padded layer inputs
    std::vector<Tensor> pre_;    // pre-activations
    std::vector<Tensor> skips_;
    std::vector<Tensor> ups_;
    std::vector<Tensor> sums_;
    Tensor out_;
    Tensor gpad_;
};

/// f(theta | alpha): configuration, parameters and the (normalized) network input.
struct NetworkModel {
    NetConfig config;
    ParamVector params;
    Image input;

    static NetworkModel create(const NetConfig& cfg, const Image& prior)
    {
        cfg.validate_input(prior.height(), prior.width());
        return {cfg, init_params(cfg, cfg.seed), normalize_minmax(prior)};
    }
};

inline Image forward(const NetworkModel& model)
{
    Network net(model.config, model.input.height(), model.input.width());
    Image out(model.input.grid());
    net.forward(model.params.values, model.input.values(), out.values());
    return out;
}

inline std::pair<double, std::vector<double>> loss_and_grad(const NetworkModel& model, const Image& target)
{
    require_same_grid(model.input.grid(), target.grid(), "loss_and_grad");
    Network net(model.config, model.input.height(), model.input.width());
    std::vector<double> grad(net.param_count());
    const double loss = net.loss_and_grad(model.params.values, model.input.values(), target.values(), grad);
    return {loss, std::move(grad)};
}

inline json to_json(const NetConfig& c)
{
    return {{"depth", c.depth},
            {"base_channels", c.base_channels},
            {"kernel_size", c.kernel_size},
            {"negative_slope", c.negative_slope},
            {"seed", c.seed},
            {"input_channels", c.input_channels}};
}

/// Raw little-endian float64 values plus a JSON manifest (layer names, shapes, offsets).
inline void save_params(const ParamVector& p, const NetConfig& cfg, const fs::path& path)
{
    json layers = json::array();
    for (const auto& l : p.layout) {
        layers.push_back({{"name", l.name},
                          {"shape", {l.c_out, l.c_in, l.kernel, l.kernel}},
                          {"stride", l.stride},
                          {"weight_offset", l.weight_offset},
                          {"bias_offset", l.bias_offset}});
    }
    write_f64(path, p.values);
    write_json(sidecar_path(path),
               {{"dtype", "float64"}, {"count", p.values.size()}, {"config", to_json(cfg)}, {"layers", layers}});
}

inline ParamVector load_params(const NetConfig& cfg, const fs::path& path)
{
    const fs::path side = sidecar_path(path);
    if (!fs::exists(side)) {
        throw FormatError("missing parameter manifest '" + side.string() + "'");
    }
    const json manifest = read_json(side);
    ParamVector p{read_f64(path), build_layout(cfg)};
    if (p.values.size() != count_params(cfg) || manifest.value("count", std::size_t{0}) != p.values.size()) {
        throw FormatError("'" + path.string() + "': parameter count does not match configuration");
    }
    const auto& layers = manifest.at("layers");
    if (layers.size() != p.layout.size()) {
        throw FormatError("'" + path.string() + "': layer manifest does not match configuration");
    }
    for (std::size_t k = 0; k < layers.size(); ++k) {
        if (layers[k].at("name").get<std::string>() != p.layout[k].name ||
            layers[k].at("weight_offset").get<std::size_t>() != p.layout[k].weight_offset) {
            throw FormatError("'" + path.string() + "': layer manifest does not match configuration");
        }
    }
    return p;
}

} // namespace petrep
