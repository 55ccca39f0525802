#pragma once

// A small trainable CNN: stride-1 convolution, ReLU, 2x2 max-pooling and
// fully connected layers with softmax cross-entropy loss and hand-written
// back-propagation. Everything is double precision and single threaded.

#include <jointsparse/errors.hpp>
#include <jointsparse/tensor.hpp>
#include <jointsparse/winograd.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace jointsparse {

enum class LayerKind : std::uint8_t { Conv = 0, Relu = 1, MaxPool = 2, Dense = 3 };

inline const char* layer_kind_name(LayerKind kind) {
    switch (kind) {
        case LayerKind::Conv: return "conv";
        case LayerKind::Relu: return "relu";
        case LayerKind::MaxPool: return "maxpool";
        case LayerKind::Dense: return "fc";
    }
    return "?";
}

struct LayerSpec {
    LayerKind kind = LayerKind::Relu;
    std::size_t in_channels = 0;   // C (fan-in features for dense layers)
    std::size_t out_channels = 0;  // D
    std::size_t kernel = 0;        // r; pooling window for max-pool
    std::size_t stride = 1;

    static LayerSpec conv(std::size_t c, std::size_t d, std::size_t r) { return {LayerKind::Conv, c, d, r, 1}; }
    static LayerSpec relu() { return {LayerKind::Relu, 0, 0, 0, 1}; }
    static LayerSpec max_pool() { return {LayerKind::MaxPool, 0, 0, 2, 2}; }
    static LayerSpec dense(std::size_t in, std::size_t out) { return {LayerKind::Dense, in, out, 1, 1}; }

    bool has_weights() const noexcept { return kind == LayerKind::Conv || kind == LayerKind::Dense; }

    bool operator==(const LayerSpec&) const = default;
};

struct Architecture {
    std::size_t input_channels = 1;
    std::size_t input_height = 28;
    std::size_t input_width = 28;
    std::vector<LayerSpec> layers;

    /// Shapes of the input and of every layer output (layers.size() + 1 entries).
    std::vector<Shape> activation_shapes() const {
        std::vector<Shape> shapes{{input_channels, input_height, input_width}};
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const LayerSpec& l = layers[i];
            const Shape& in = shapes.back();
            const std::string where = "layer " + std::to_string(i) + " (" + layer_kind_name(l.kind) + ")";
            switch (l.kind) {
                case LayerKind::Conv:
                    if (in.size() != 3 || in[0] != l.in_channels)
                        throw DimensionError(where + ": expects " + std::to_string(l.in_channels) +
                                             " input channels, got " + shape_string(in));
                    if (l.stride != 1) throw UnsupportedError(where + ": only stride-1 convolution is supported");
                    if (in[1] < l.kernel || in[2] < l.kernel) throw DimensionError(where + ": input smaller than filter");
                    shapes.push_back({l.out_channels, in[1] - l.kernel + 1, in[2] - l.kernel + 1});
                    break;
                case LayerKind::Relu: shapes.push_back(in); break;
                case LayerKind::MaxPool:
                    if (in.size() != 3 || in[1] < 2 || in[2] < 2) throw DimensionError(where + ": input too small");
                    shapes.push_back({in[0], in[1] / 2, in[2] / 2});
                    break;
                case LayerKind::Dense:
                    if (shape_size(in) != l.in_channels)
                        throw DimensionError(where + ": expects " + std::to_string(l.in_channels) +
                                             " features, got " + shape_string(in));
                    shapes.push_back({l.out_channels});
                    break;
            }
        }
        return shapes;
    }

    /// Indices into `layers` of the layers that own weights, in canonical order.
    std::vector<std::size_t> weighted_layers() const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < layers.size(); ++i)
            if (layers[i].has_weights()) out.push_back(i);
        return out;
    }

    std::size_t classes() const { return shape_size(activation_shapes().back()); }

    bool operator==(const Architecture&) const = default;
};

/// Conv3x3(1->8) ReLU Pool Conv3x3(8->16) ReLU Pool Conv5x5(16->16) ReLU FC(->10).
inline Architecture paper_net(std::size_t height = 28, std::size_t width = 28) {
    Architecture a;
    a.input_channels = 1;
    a.input_height = height;
    a.input_width = width;
    a.layers = {LayerSpec::conv(1, 8, 3), LayerSpec::relu(), LayerSpec::max_pool(),
                LayerSpec::conv(8, 16, 3), LayerSpec::relu(), LayerSpec::max_pool(),
                LayerSpec::conv(16, 16, 5), LayerSpec::relu()};
    const Shape last = a.activation_shapes().back();
    a.layers.push_back(LayerSpec::dense(shape_size(last), 10));
    return a;
}

/// Learnable parameters, one weight and one bias tensor per weighted layer.
/// Conv weights are D x C x r x r, dense weights D x C.
struct Parameters {
    std::vector<Tensor> weights;
    std::vector<Tensor> biases;

    static Parameters zeros_like(const Parameters& p) {
        Parameters z;
        for (const Tensor& w : p.weights) z.weights.emplace_back(w.shape());
        for (const Tensor& b : p.biases) z.biases.emplace_back(b.shape());
        return z;
    }

    std::size_t weight_count() const {
        std::size_t n = 0;
        for (const Tensor& w : weights) n += w.size();
        return n;
    }

    std::size_t bias_count() const {
        std::size_t n = 0;
        for (const Tensor& b : biases) n += b.size();
        return n;
    }

    /// Weights then biases, each tensor as one span.
    std::vector<std::span<double>> views() {
        std::vector<std::span<double>> out;
        for (Tensor& w : weights) out.push_back(w.values());
        for (Tensor& b : biases) out.push_back(b.values());
        return out;
    }

    std::vector<std::span<const double>> views() const {
        std::vector<std::span<const double>> out;
        for (const Tensor& w : weights) out.push_back(w.values());
        for (const Tensor& b : biases) out.push_back(b.values());
        return out;
    }

    void add_scaled(const Parameters& other, double factor) {
        for (std::size_t i = 0; i < weights.size(); ++i) {
            auto dst = weights[i].values();
            auto src = other.weights[i].values();
            for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += factor * src[k];
        }
        for (std::size_t i = 0; i < biases.size(); ++i) {
            auto dst = biases[i].values();
            auto src = other.biases[i].values();
            for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += factor * src[k];
        }
    }

    bool operator==(const Parameters&) const = default;
};

struct Network {
    Architecture arch;
    Parameters params;

    /// He (fan-in) normal initialisation with zero biases.
    static Network initialize(Architecture arch, std::uint64_t seed) {
        arch.activation_shapes();  // validates
        Network net;
        std::mt19937_64 rng(seed);
        for (std::size_t idx : arch.weighted_layers()) {
            const LayerSpec& l = arch.layers[idx];
            Shape shape = l.kind == LayerKind::Conv ? Shape{l.out_channels, l.in_channels, l.kernel, l.kernel}
                                                    : Shape{l.out_channels, l.in_channels};
            const double fan_in = static_cast<double>(shape_size(shape) / l.out_channels);
            std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
            Tensor w(shape);
            for (double& v : w.values()) v = dist(rng);
            net.params.weights.push_back(std::move(w));
            net.params.biases.emplace_back(Shape{l.out_channels});
        }
        net.arch = std::move(arch);
        return net;
    }

    /// Spec of the k-th weighted layer.
    const LayerSpec& weighted_spec(std::size_t k) const { return arch.layers[arch.weighted_layers().at(k)]; }
};

/// All weights flattened in canonical order: layer, output channel, input
/// channel, row, column.
inline std::vector<double> flatten_weights(const Parameters& p) {
    std::vector<double> flat;
    flat.reserve(p.weight_count());
    for (const Tensor& w : p.weights) flat.insert(flat.end(), w.values().begin(), w.values().end());
    return flat;
}

inline void assign_weights(Parameters& p, std::span<const double> flat) {
    if (flat.size() != p.weight_count())
        throw DimensionError("expected " + std::to_string(p.weight_count()) + " weights, got " +
                             std::to_string(flat.size()));
    std::size_t offset = 0;
    for (Tensor& w : p.weights) {
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), w.size(), w.values().begin());
        offset += w.size();
    }
}

struct TrainBatch {
    Tensor inputs;  // B x C x H x W
    std::vector<int> labels;

    std::size_t size() const noexcept { return labels.size(); }

    Tensor example(std::size_t i) const {
        const Shape& s = inputs.shape();
        const std::size_t stride = s[1] * s[2] * s[3];
        const auto begin = inputs.values().begin() + static_cast<std::ptrdiff_t>(i * stride);
        return Tensor({s[1], s[2], s[3]}, std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(stride)));
    }
};

/// Gathers examples of a N x C x H x W image tensor into a batch.
inline TrainBatch make_batch(const Tensor& images, const std::vector<int>& labels, std::span<const std::size_t> indices) {
    const Shape& s = images.shape();
    const std::size_t stride = s[1] * s[2] * s[3];
    TrainBatch b;
    b.inputs = Tensor({indices.size(), s[1], s[2], s[3]});
    auto dst = b.inputs.values();
    auto src = images.values();
    for (std::size_t k = 0; k < indices.size(); ++k) {
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(indices[k] * stride), stride,
                    dst.begin() + static_cast<std::ptrdiff_t>(k * stride));
        b.labels.push_back(labels.at(indices[k]));
    }
    return b;
}

/// Deterministic example order for one epoch.
inline std::vector<std::size_t> epoch_order(std::size_t count, std::uint64_t seed, std::uint64_t epoch) {
    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ULL * (epoch + 1)));
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

// ---------------------------------------------------------------------------
// Convolution engines

/// Convolution without bias for the k-th weighted layer. Engines differ only in
/// how this is computed; the rest of the network is shared.
using ConvKernel = std::function<Tensor(std::size_t weighted_index, const Tensor& input)>;

enum class ConvEngine { Direct, Winograd };

/// Winograd basis per weighted conv layer; layers without an entry fall back
/// to direct convolution.
using BasisPlan = std::map<std::size_t, WinogradBasis>;

/// 3x3 -> (3,4), 5x5 -> (5,8).
inline BasisPlan default_basis_plan(const Architecture& arch, std::size_t tile_for_3x3 = 4) {
    BasisPlan plan;
    const auto weighted = arch.weighted_layers();
    for (std::size_t k = 0; k < weighted.size(); ++k) {
        const LayerSpec& l = arch.layers[weighted[k]];
        if (l.kind != LayerKind::Conv || l.stride != 1) continue;
        if (l.kernel == 3) plan.emplace(k, build_basis(3, tile_for_3x3));
        if (l.kernel == 5) plan.emplace(k, build_basis(5, 8));
    }
    return plan;
}

inline ConvKernel direct_kernel(const Network& net) {
    return [&net](std::size_t k, const Tensor& input) { return direct_conv2d(input, net.params.weights[k]); };
}

/// Winograd engine with filters transformed once up front.
inline ConvKernel winograd_kernel(const Network& net, const BasisPlan& plan) {
    auto transformed = std::make_shared<std::map<std::size_t, Tensor>>();
    for (const auto& [k, basis] : plan) transformed->emplace(k, transform_filters(basis, net.params.weights[k]));
    return [&net, &plan, transformed](std::size_t k, const Tensor& input) {
        auto it = plan.find(k);
        if (it == plan.end()) return direct_conv2d(input, net.params.weights[k]);
        return winograd_conv2d_transformed(it->second, input, transformed->at(k));
    };
}

// ---------------------------------------------------------------------------
// Forward / backward

/// Per-example intermediate state needed by back-propagation.
struct ForwardCache {
    std::vector<Tensor> inputs;                    // input of every layer
    std::vector<std::vector<std::uint32_t>> argmax;  // per layer, max-pool winners
};

namespace detail {

inline Tensor max_pool_forward(const Tensor& in, std::vector<std::uint32_t>* argmax) {
    const std::size_t C = in.extent(0), H = in.extent(1), W = in.extent(2);
    const std::size_t Ho = H / 2, Wo = W / 2;
    Tensor out({C, Ho, Wo});
    if (argmax) argmax->assign(C * Ho * Wo, 0);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < Ho; ++p)
            for (std::size_t q = 0; q < Wo; ++q) {
                std::uint32_t best = static_cast<std::uint32_t>((c * H + 2 * p) * W + 2 * q);
                double best_v = in.values()[best];
                for (std::size_t du = 0; du < 2; ++du)
                    for (std::size_t dv = 0; dv < 2; ++dv) {
                        const auto idx = static_cast<std::uint32_t>((c * H + 2 * p + du) * W + 2 * q + dv);
                        if (in.values()[idx] > best_v) {  // strict: ties keep the first index
                            best_v = in.values()[idx];
                            best = idx;
                        }
                    }
                out.at(c, p, q) = best_v;
                if (argmax) (*argmax)[(c * Ho + p) * Wo + q] = best;
            }
    return out;
}

inline void conv_backward(const Tensor& input, const Tensor& weights, const Tensor& grad_out, Tensor& grad_w,
                          Tensor* grad_in) {
    const std::size_t C = input.extent(0), H = input.extent(1), W = input.extent(2);
    const std::size_t D = weights.extent(0), r = weights.extent(2);
    const std::size_t Ho = H - r + 1, Wo = W - r + 1;
    const double* x = input.values().data();
    const double* g = grad_out.values().data();
    double* dx = grad_in ? grad_in->values().data() : nullptr;
    for (std::size_t d = 0; d < D; ++d)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t u = 0; u < r; ++u)
                for (std::size_t v = 0; v < r; ++v) {
                    const double w = weights.at(d, c, u, v);
                    double acc = 0.0;
                    for (std::size_t p = 0; p < Ho; ++p) {
                        const double* g_row = g + (d * Ho + p) * Wo;
                        const double* x_row = x + (c * H + p + u) * W + v;
                        for (std::size_t q = 0; q < Wo; ++q) acc += g_row[q] * x_row[q];
                        if (dx) {
                            double* dx_row = dx + (c * H + p + u) * W + v;
                            for (std::size_t q = 0; q < Wo; ++q) dx_row[q] += w * g_row[q];
                        }
                    }
                    grad_w.at(d, c, u, v) += acc;
                }
}

}  // namespace detail

/// Logits of one C x H x W example.
inline Tensor forward_example(const Network& net, const Tensor& input, const ConvKernel& conv,
                              ForwardCache* cache = nullptr) {
    if (cache) {
        cache->inputs.clear();
        cache->argmax.assign(net.arch.layers.size(), {});
    }
    Tensor x = input;
    std::size_t k = 0;
    for (std::size_t i = 0; i < net.arch.layers.size(); ++i) {
        const LayerSpec& l = net.arch.layers[i];
        if (cache) cache->inputs.push_back(x);
        switch (l.kind) {
            case LayerKind::Conv: {
                Tensor y = conv(k, x);
                const Tensor& b = net.params.biases[k];
                const std::size_t plane = y.extent(1) * y.extent(2);
                auto yv = y.values();
                for (std::size_t d = 0; d < y.extent(0); ++d)
                    for (std::size_t j = 0; j < plane; ++j) yv[d * plane + j] += b[d];
                x = std::move(y);
                ++k;
                break;
            }
            case LayerKind::Relu:
                for (double& v : x.values()) v = v > 0.0 ? v : 0.0;
                break;
            case LayerKind::MaxPool:
                x = detail::max_pool_forward(x, cache ? &cache->argmax[i] : nullptr);
                break;
            case LayerKind::Dense: {
                const Tensor& w = net.params.weights[k];
                const Tensor& b = net.params.biases[k];
                const std::size_t D = l.out_channels, C = l.in_channels;
                Tensor y({D});
                auto xv = x.values();
                for (std::size_t d = 0; d < D; ++d) {
                    double acc = b[d];
                    const double* row = w.values().data() + d * C;
                    for (std::size_t c = 0; c < C; ++c) acc += row[c] * xv[c];
                    y[d] = acc;
                }
                x = std::move(y);
                ++k;
                break;
            }
        }
    }
    return x;
}

/// Accumulates parameter gradients of one example given dLoss/dlogits.
inline void backward_example(const Network& net, const ForwardCache& cache, Tensor grad, Parameters& grads) {
    std::size_t k = net.params.weights.size();
    for (std::size_t i = net.arch.layers.size(); i-- > 0;) {
        const LayerSpec& l = net.arch.layers[i];
        const Tensor& in = cache.inputs[i];
        const bool need_input_grad = i > 0;
        switch (l.kind) {
            case LayerKind::Conv: {
                --k;
                Tensor& gb = grads.biases[k];
                const std::size_t plane = grad.extent(1) * grad.extent(2);
                for (std::size_t d = 0; d < grad.extent(0); ++d) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < plane; ++j) s += grad[d * plane + j];
                    gb[d] += s;
                }
                Tensor grad_in(in.shape());
                detail::conv_backward(in, net.params.weights[k], grad, grads.weights[k],
                                      need_input_grad ? &grad_in : nullptr);
                grad = std::move(grad_in);
                break;
            }
            case LayerKind::Relu: {
                auto g = grad.values();
                auto x = in.values();
                for (std::size_t j = 0; j < g.size(); ++j)
                    if (!(x[j] > 0.0)) g[j] = 0.0;
                break;
            }
            case LayerKind::MaxPool: {
                Tensor grad_in(in.shape());
                const auto& winners = cache.argmax[i];
                for (std::size_t j = 0; j < winners.size(); ++j) grad_in[winners[j]] += grad[j];
                grad = std::move(grad_in);
                break;
            }
            case LayerKind::Dense: {
                --k;
                const std::size_t D = l.out_channels, C = l.in_channels;
                const Tensor& w = net.params.weights[k];
                Tensor& gw = grads.weights[k];
                Tensor& gb = grads.biases[k];
                Tensor grad_in(in.shape());
                auto xv = in.values();
                for (std::size_t d = 0; d < D; ++d) {
                    const double gd = grad[d];
                    gb[d] += gd;
                    double* gw_row = gw.values().data() + d * C;
                    const double* w_row = w.values().data() + d * C;
                    for (std::size_t c = 0; c < C; ++c) {
                        gw_row[c] += gd * xv[c];
                        grad_in[c] += gd * w_row[c];
                    }
                }
                grad = std::move(grad_in);
                break;
            }
        }
    }
}

struct ForwardResult {
    Tensor logits;  // B x K
    double loss = 0.0;
};

struct Gradients {
    double loss = 0.0;
    Parameters grads;
};

namespace detail {

inline void check_batch(const Network& net, const TrainBatch& batch) {
    const Shape& s = batch.inputs.shape();
    if (s.size() != 4 || s[0] != batch.labels.size() || s[1] != net.arch.input_channels ||
        s[2] != net.arch.input_height || s[3] != net.arch.input_width)
        throw DimensionError("batch " + shape_string(s) + " incompatible with network input " +
                             shape_string({net.arch.input_channels, net.arch.input_height, net.arch.input_width}));
    const std::size_t classes = net.arch.classes();
    for (int label : batch.labels)
        if (label < 0 || static_cast<std::size_t>(label) >= classes)
            throw DimensionError("label " + std::to_string(label) + " outside [0, " + std::to_string(classes) + ")");
}

// Softmax cross-entropy of one logit vector; writes softmax - onehot into grad.
inline double cross_entropy(const Tensor& logits, int label, Tensor* grad, std::size_t example) {
    const auto z = logits.values();
    const double zmax = *std::max_element(z.begin(), z.end());
    double denom = 0.0;
    for (double v : z) denom += std::exp(v - zmax);
    const double loss = std::log(denom) - (z[static_cast<std::size_t>(label)] - zmax);
    if (!std::isfinite(loss))
        throw NumericError("non-finite loss at example " + std::to_string(example) + " (max logit " +
                           std::to_string(zmax) + ")");
    if (grad) {
        *grad = Tensor(logits.shape());
        for (std::size_t j = 0; j < z.size(); ++j) (*grad)[j] = std::exp(z[j] - zmax) / denom;
        (*grad)[static_cast<std::size_t>(label)] -= 1.0;
    }
    return loss;
}

}  // namespace detail

/// Mean cross-entropy loss and logits with an arbitrary convolution engine.
inline ForwardResult forward(const Network& net, const TrainBatch& batch, const ConvKernel& conv) {
    detail::check_batch(net, batch);
    const std::size_t B = batch.size(), K = net.arch.classes();
    ForwardResult result;
    result.logits = Tensor({B, K});
    for (std::size_t i = 0; i < B; ++i) {
        const Tensor z = forward_example(net, batch.example(i), conv);
        std::copy(z.values().begin(), z.values().end(), result.logits.values().begin() + static_cast<std::ptrdiff_t>(i * K));
        result.loss += detail::cross_entropy(z, batch.labels[i], nullptr, i);
    }
    if (B > 0) result.loss /= static_cast<double>(B);
    return result;
}

inline ForwardResult forward(const Network& net, const TrainBatch& batch, ConvEngine engine = ConvEngine::Direct,
                             const BasisPlan* plan = nullptr) {
    if (engine == ConvEngine::Direct) return forward(net, batch, direct_kernel(net));
    const BasisPlan fallback = plan ? BasisPlan{} : default_basis_plan(net.arch);
    return forward(net, batch, winograd_kernel(net, plan ? *plan : fallback));
}

/// Loss and parameter gradients of the mean cross-entropy. Always uses the
/// direct convolution path.
inline Gradients backward(const Network& net, const TrainBatch& batch) {
    detail::check_batch(net, batch);
    Gradients out;
    out.grads = Parameters::zeros_like(net.params);
    const ConvKernel conv = direct_kernel(net);
    const std::size_t B = batch.size();
    if (B == 0) return out;
    const double scale = 1.0 / static_cast<double>(B);
    ForwardCache cache;
    for (std::size_t i = 0; i < B; ++i) {
        const Tensor z = forward_example(net, batch.example(i), conv, &cache);
        Tensor grad;
        out.loss += detail::cross_entropy(z, batch.labels[i], &grad, i);
        for (double& g : grad.values()) g *= scale;
        backward_example(net, cache, std::move(grad), out.grads);
    }
    out.loss *= scale;
    return out;
}

/// ReLU on/off bits and max-pool winners for every example; two parameter
/// settings with equal patterns lie in the same smooth piece of the loss.
inline std::vector<std::uint32_t> activation_pattern(const Network& net, const TrainBatch& batch) {
    std::vector<std::uint32_t> pattern;
    const ConvKernel conv = direct_kernel(net);
    ForwardCache cache;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        forward_example(net, batch.example(i), conv, &cache);
        for (std::size_t l = 0; l < net.arch.layers.size(); ++l) {
            if (net.arch.layers[l].kind == LayerKind::Relu)
                for (double v : cache.inputs[l].values()) pattern.push_back(v > 0.0 ? 1u : 0u);
            if (net.arch.layers[l].kind == LayerKind::MaxPool)
                pattern.insert(pattern.end(), cache.argmax[l].begin(), cache.argmax[l].end());
        }
    }
    return pattern;
}

// ---------------------------------------------------------------------------
// Optimizers

enum class OptimizerKind : std::uint8_t { Sgd = 0, Adam = 1 };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::Adam;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    bool operator==(const OptimizerConfig&) const = default;
};

struct OptimizerState {
    OptimizerState() = default;
    explicit OptimizerState(OptimizerConfig c) : config(c) {}

    OptimizerConfig config;
    std::vector<std::vector<double>> first_moment;
    std::vector<std::vector<double>> second_moment;
    std::uint64_t steps = 0;

    bool operator==(const OptimizerState&) const = default;
};

inline void optimizer_step(OptimizerState& opt, const std::vector<std::span<double>>& params,
                           const std::vector<std::span<const double>>& grads) {
    if (params.size() != grads.size())
        throw DimensionError("optimizer: " + std::to_string(params.size()) + " parameter tensors but " +
                             std::to_string(grads.size()) + " gradients");
    for (std::size_t i = 0; i < params.size(); ++i)
        if (params[i].size() != grads[i].size())
            throw DimensionError("optimizer: parameter/gradient size mismatch in tensor " + std::to_string(i));

    const OptimizerConfig& c = opt.config;
    if (c.kind == OptimizerKind::Adam) {
        if (opt.first_moment.empty()) {
            for (const auto& p : params) {
                opt.first_moment.emplace_back(p.size(), 0.0);
                opt.second_moment.emplace_back(p.size(), 0.0);
            }
        }
        if (opt.first_moment.size() != params.size())
            throw DimensionError("optimizer: moment count does not match parameters");
        for (std::size_t i = 0; i < params.size(); ++i)
            if (opt.first_moment[i].size() != params[i].size())
                throw DimensionError("optimizer: moment shape mismatch in tensor " + std::to_string(i));
    }

    ++opt.steps;
    if (c.kind == OptimizerKind::Sgd) {
        for (std::size_t i = 0; i < params.size(); ++i)
            for (std::size_t j = 0; j < params[i].size(); ++j) params[i][j] -= c.learning_rate * grads[i][j];
        return;
    }
    const double t = static_cast<double>(opt.steps);
    const double correction1 = 1.0 - std::pow(c.beta1, t);
    const double correction2 = 1.0 - std::pow(c.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& m = opt.first_moment[i];
        auto& v = opt.second_moment[i];
        for (std::size_t j = 0; j < params[i].size(); ++j) {
            const double g = grads[i][j];
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
            const double m_hat = m[j] / correction1;
            const double v_hat = v[j] / correction2;
            params[i][j] -= c.learning_rate * m_hat / (std::sqrt(v_hat) + c.epsilon);
        }
    }
}

inline void optimizer_step(OptimizerState& opt, Parameters& params, const Parameters& grads) {
    optimizer_step(opt, params.views(), grads.views());
}

/// Single-scalar convenience overload.
inline void optimizer_step(OptimizerState& opt, double& param, double grad) {
    const double g[1] = {grad};
    optimizer_step(opt, {std::span<double>(&param, 1)}, {std::span<const double>(g, 1)});
}

// ---------------------------------------------------------------------------
// Evaluation helpers

inline std::vector<int> predict(const Tensor& logits) {
    const std::size_t B = logits.extent(0), K = logits.extent(1);
    std::vector<int> out(B);
    for (std::size_t i = 0; i < B; ++i) {
        const auto row = logits.values().subspan(i * K, K);
        out[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return out;
}

}  // namespace jointsparse
