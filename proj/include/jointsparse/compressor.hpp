#pragma once

// Universal quantisation, codebook fine-tuning and the compressed container.
//
// Weights (conv and dense, canonical order) are quantised with one global
// cell size: q_i = delta * round((a_i + U_i) / delta), round(x) =
// sign(x) floor(|x| + 0.5). Bin 0 is pruned. Unpruned weights reconstruct as
// c_n - U_i where c_n starts at n * delta and is then fine-tuned. The bin
// stream is LZW-coded into a "WSPZ" container.

#include <jointsparse/bytes.hpp>
#include <jointsparse/errors.hpp>
#include <jointsparse/lzw.hpp>
#include <jointsparse/nn.hpp>
#include <jointsparse/sparsity.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace jointsparse {

enum class QuantMode : std::uint8_t { Uq = 0, Duq = 1 };

inline const char* quant_mode_name(QuantMode m) { return m == QuantMode::Uq ? "uq" : "duq"; }

// ---------------------------------------------------------------------------
// Dither

inline constexpr std::uint8_t kPrngSplitMix64 = 1;

/// U_i uniform on [-delta/2, delta/2): the i-th output of a splitmix64
/// generator seeded with `seed`, top 53 bits scaled to [0, 1).
class DitherStream {
public:
    DitherStream(std::uint64_t seed, double delta) : seed_(seed), delta_(delta) {}

    static std::uint64_t splitmix64(std::uint64_t seed, std::uint64_t index) noexcept {
        std::uint64_t z = seed + (index + 1) * 0x9E3779B97F4A7C15ull;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    double at(std::uint64_t index) const noexcept {
        const double unit = static_cast<double>(splitmix64(seed_, index) >> 11) * 0x1.0p-53;
        return (unit - 0.5) * delta_;
    }

    std::vector<double> generate(std::size_t count) const {
        std::vector<double> out(count);
        for (std::size_t i = 0; i < count; ++i) out[i] = at(i);
        return out;
    }

    std::uint64_t seed() const noexcept { return seed_; }

private:
    std::uint64_t seed_;
    double delta_;
};

inline double round_half_away(double x) { return std::copysign(std::floor(std::abs(x) + 0.5), x); }

// ---------------------------------------------------------------------------
// Quantised model

struct QuantizedModel {
    double delta = 0.0;
    std::uint64_t dither_seed = 0;
    QuantMode mode = QuantMode::Uq;
    std::vector<std::int32_t> bins;        // per weight, canonical order
    std::map<std::int32_t, double> codebook;  // no entry for bin 0
    std::vector<double> biases;            // stored raw, canonical order

    std::size_t size() const noexcept { return bins.size(); }
    bool pruned(std::size_t i) const { return bins[i] == 0; }

    std::vector<bool> pruned_mask() const {
        std::vector<bool> m(bins.size());
        for (std::size_t i = 0; i < bins.size(); ++i) m[i] = bins[i] == 0;
        return m;
    }

    std::size_t pruned_count() const { return static_cast<std::size_t>(std::count(bins.begin(), bins.end(), 0)); }

    /// Dither per weight; all zero in UQ mode.
    std::vector<double> dither() const {
        if (mode == QuantMode::Uq) return std::vector<double>(bins.size(), 0.0);
        return DitherStream(dither_seed, delta).generate(bins.size());
    }

    bool operator==(const QuantizedModel&) const = default;
};

/// Quantises `weights` with explicit dithers (empty span = none).
inline QuantizedModel quantize(std::span<const double> weights, double delta, std::span<const double> dither) {
    if (!(delta > 0.0) || !std::isfinite(delta)) throw ConfigError("quantization cell size must be positive");
    if (!dither.empty() && dither.size() != weights.size())
        throw DimensionError("dither stream length does not match weight count");
    QuantizedModel qm;
    qm.delta = delta;
    qm.bins.resize(weights.size());
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const double u = dither.empty() ? 0.0 : dither[i];
        const double b = round_half_away((weights[i] + u) / delta);
        if (!std::isfinite(b) || std::abs(b) > std::numeric_limits<std::int32_t>::max() / 2)
            throw NumericError("weight " + std::to_string(i) + " does not fit a quantization bin");
        qm.bins[i] = static_cast<std::int32_t>(b);
        if (qm.bins[i] != 0) qm.codebook.emplace(qm.bins[i], qm.bins[i] * delta);
    }
    return qm;
}

inline QuantizedModel quantize(std::span<const double> weights, double delta, QuantMode mode, std::uint64_t seed) {
    if (!(delta > 0.0) || !std::isfinite(delta)) throw ConfigError("quantization cell size must be positive");
    std::vector<double> u;
    if (mode == QuantMode::Duq) u = DitherStream(seed, delta).generate(weights.size());
    QuantizedModel qm = quantize(weights, delta, u);
    qm.mode = mode;
    qm.dither_seed = seed;
    return qm;
}

/// Quantises every conv and dense weight of `net`; biases are kept raw.
inline QuantizedModel quantize_model(const Network& net, double delta, QuantMode mode, std::uint64_t seed) {
    QuantizedModel qm = quantize(flatten_weights(net.params), delta, mode, seed);
    for (const Tensor& b : net.params.biases) qm.biases.insert(qm.biases.end(), b.values().begin(), b.values().end());
    return qm;
}

inline std::vector<double> dequantize(const QuantizedModel& qm, std::span<const double> dither) {
    std::vector<double> out(qm.bins.size(), 0.0);
    for (std::size_t i = 0; i < qm.bins.size(); ++i) {
        const std::int32_t n = qm.bins[i];
        if (n == 0) continue;
        auto it = qm.codebook.find(n);
        if (it == qm.codebook.end()) throw FormatError("missing codebook entry for bin " + std::to_string(n));
        out[i] = it->second - dither[i];
    }
    return out;
}

inline std::vector<double> dequantize(const QuantizedModel& qm) { return dequantize(qm, qm.dither()); }

/// Network with dequantised weights and the stored biases.
inline Network reconstruct(const Architecture& arch, const QuantizedModel& qm) {
    Network net;
    net.arch = arch;
    net.params = Network::initialize(arch, 0).params;
    if (net.params.weight_count() != qm.size())
        throw CountMismatchError("architecture has " + std::to_string(net.params.weight_count()) +
                                 " weights, quantized model " + std::to_string(qm.size()));
    if (net.params.bias_count() != qm.biases.size())
        throw CountMismatchError("architecture has " + std::to_string(net.params.bias_count()) +
                                 " biases, quantized model " + std::to_string(qm.biases.size()));
    assign_weights(net.params, dequantize(qm));
    std::size_t at = 0;
    for (Tensor& b : net.params.biases)
        for (double& v : b.values()) v = qm.biases[at++];
    return net;
}

// ---------------------------------------------------------------------------
// Codebook fine-tuning

/// c_n -= lr * mean gradient over the members of bin n, then clamps c_n to
/// [(n-1) delta, (n+1) delta]. Returns the number of clamped entries.
inline std::size_t codebook_step(QuantizedModel& qm, std::span<const double> grads, double lr) {
    if (grads.size() != qm.size()) throw DimensionError("gradient length does not match weight count");
    std::map<std::int32_t, std::pair<double, std::size_t>> acc;
    for (std::size_t i = 0; i < qm.size(); ++i) {
        if (qm.bins[i] == 0) continue;
        auto& [sum, count] = acc[qm.bins[i]];
        sum += grads[i];
        ++count;
    }
    std::size_t clamped = 0;
    for (const auto& [n, sc] : acc) {
        double& c = qm.codebook.at(n);
        c -= lr * sc.first / static_cast<double>(sc.second);
        const double lo = (n - 1) * qm.delta, hi = (n + 1) * qm.delta;
        if (c < lo || c > hi) {
            c = std::clamp(c, lo, hi);
            ++clamped;
        }
    }
    return clamped;
}

struct FinetuneSchedule {
    std::size_t steps = 0;
    std::size_t batch_size = 64;
    std::uint64_t seed = 1;
    double learning_rate = 1e-3;
    bool learnable_zeta = false;
};

struct FinetuneRow {
    std::uint64_t step = 0;
    double loss = 0.0;
    double r_wd = 0.0;
    double zeta_wd = 0.0;
    double theta_wd = 0.0;
    double cost = 0.0;  // E + e^zeta R_WD - alpha zeta
};

struct FinetuneResult {
    std::vector<FinetuneRow> history;
    std::size_t clamped = 0;
    bool diverged = false;
    std::string message;
};

/// SGD on the shared values under C = E + e^zeta_WD R_WD - alpha zeta_WD.
/// Pruned weights stay exactly zero.
inline FinetuneResult finetune_codebook(QuantizedModel& qm, const Architecture& arch, const Tensor& images,
                                        const std::vector<int>& labels, const SparsityConfig& cfg,
                                        RegularizerState& reg, const FinetuneSchedule& schedule) {
    SparsityConfig wd_only = cfg;
    wd_only.sd_layers.clear();
    wd_only.validate(arch);
    const std::vector<double> dither = qm.dither();
    RegularizerState local = reg;
    local.learnable = schedule.learnable_zeta;
    FinetuneResult result;
    Network net = reconstruct(arch, qm);
    Parameters grad;
    for (std::size_t step = 0; step < schedule.steps; ++step) {
        assign_weights(net.params, dequantize(qm, dither));
        const auto idx = batch_indices(labels.size(), schedule.batch_size, schedule.seed, step);
        const TrainBatch batch = make_batch(images, labels, idx);
        FinetuneRow row;
        row.step = step;
        try {
            const CostTerms t = cost_gradient(net, batch, local, wd_only, grad, false);
            row.loss = t.loss;
            row.r_wd = t.r_wd;
        } catch (const NumericError& e) {
            result.diverged = true;
            result.message = "step " + std::to_string(step) + ": " + e.what();
            break;
        }
        row.zeta_wd = local.zeta_wd;
        row.theta_wd = local.theta_wd;
        row.cost = row.loss + std::exp(local.zeta_wd) * row.r_wd - local.alpha * local.zeta_wd;
        result.history.push_back(row);

        result.clamped += codebook_step(qm, flatten_weights(grad), schedule.learning_rate);
        if (wd_only.wd_enabled()) zeta_step(local, row.r_wd, 0.0, true, false);
    }
    reg.zeta_wd = local.zeta_wd;
    reg.theta_wd = local.theta_wd;
    reg.zeta_opt = local.zeta_opt;
    return result;
}

// ---------------------------------------------------------------------------
// Container

inline constexpr char kContainerMagic[5] = "WSPZ";
inline constexpr std::uint16_t kContainerVersion = 1;

struct CompressedModel {
    Architecture arch;
    QuantizedModel qm;
    LzwParams lzw;
    std::vector<std::int32_t> symbol_map;  // symbol -> bin
    std::vector<std::uint8_t> coded;        // LZW bytes of the bin stream
};

/// Dense symbol alphabet over the bins present, in ascending bin order.
inline std::vector<std::int32_t> bin_alphabet(const std::vector<std::int32_t>& bins) {
    std::vector<std::int32_t> out(bins);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

inline CompressedModel encode_model(const Architecture& arch, const QuantizedModel& qm) {
    CompressedModel cm;
    cm.arch = arch;
    cm.qm = qm;
    cm.symbol_map = bin_alphabet(qm.bins);
    cm.lzw = lzw_params(static_cast<std::uint32_t>(std::max<std::size_t>(cm.symbol_map.size(), 1)));
    std::vector<std::uint32_t> symbols(qm.size());
    for (std::size_t i = 0; i < qm.size(); ++i)
        symbols[i] = static_cast<std::uint32_t>(
            std::lower_bound(cm.symbol_map.begin(), cm.symbol_map.end(), qm.bins[i]) - cm.symbol_map.begin());
    cm.coded = lzw_encode(symbols, cm.lzw);
    return cm;
}

inline void write_architecture(ByteWriter& w, const Architecture& arch) {
    w.put(static_cast<std::uint32_t>(arch.input_channels));
    w.put(static_cast<std::uint32_t>(arch.input_height));
    w.put(static_cast<std::uint32_t>(arch.input_width));
    w.put(static_cast<std::uint32_t>(arch.layers.size()));
    for (const LayerSpec& l : arch.layers) {
        w.put(static_cast<std::uint8_t>(l.kind));
        w.put(static_cast<std::uint32_t>(l.in_channels));
        w.put(static_cast<std::uint32_t>(l.out_channels));
        w.put(static_cast<std::uint32_t>(l.kernel));
        w.put(static_cast<std::uint32_t>(l.stride));
    }
}

inline Architecture read_architecture(ByteReader& r) {
    Architecture arch;
    arch.input_channels = r.get<std::uint32_t>();
    arch.input_height = r.get<std::uint32_t>();
    arch.input_width = r.get<std::uint32_t>();
    const std::uint32_t count = r.get<std::uint32_t>();
    if (count > 4096) throw FormatError(r.what() + ": implausible layer count " + std::to_string(count));
    for (std::uint32_t i = 0; i < count; ++i) {
        LayerSpec l;
        const std::uint8_t kind = r.get<std::uint8_t>();
        if (kind > static_cast<std::uint8_t>(LayerKind::Dense))
            throw FormatError(r.what() + ": unknown layer kind " + std::to_string(kind));
        l.kind = static_cast<LayerKind>(kind);
        l.in_channels = r.get<std::uint32_t>();
        l.out_channels = r.get<std::uint32_t>();
        l.kernel = r.get<std::uint32_t>();
        l.stride = r.get<std::uint32_t>();
        arch.layers.push_back(l);
    }
    try {
        arch.activation_shapes();
    } catch (const Error& e) {
        throw FormatError(r.what() + ": invalid architecture: " + e.what());
    }
    return arch;
}

inline std::vector<std::uint8_t> serialize(const CompressedModel& cm) {
    ByteWriter w;
    w.put_magic(kContainerMagic);
    w.put(kContainerVersion);
    w.put(static_cast<std::uint8_t>(cm.qm.mode));
    w.put_f64(cm.qm.delta);
    w.put(cm.qm.dither_seed);
    w.put(kPrngSplitMix64);
    write_architecture(w, cm.arch);
    w.put(static_cast<std::uint32_t>(cm.qm.codebook.size()));
    for (const auto& [n, c] : cm.qm.codebook) {
        w.put(n);
        w.put_f64(c);
    }
    w.put(static_cast<std::uint32_t>(cm.qm.biases.size()));
    for (double b : cm.qm.biases) w.put_f64(b);
    w.put(cm.lzw.alphabet_size);
    w.put(cm.lzw.initial_width);
    w.put(cm.lzw.max_width);
    w.put(cm.lzw.reset_entries);
    w.put(static_cast<std::uint32_t>(cm.symbol_map.size()));
    for (std::int32_t b : cm.symbol_map) w.put(b);
    w.put(static_cast<std::uint64_t>(cm.qm.size()));
    w.put(static_cast<std::uint64_t>(cm.coded.size()));
    w.put_bytes(cm.coded);
    w.put_crc();
    return w.take();
}

/// Parses and fully decodes a container, validating every section.
inline CompressedModel parse_container(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes, "compressed model");
    r.expect_envelope(kContainerMagic);
    CompressedModel cm;
    const auto version = r.get<std::uint16_t>();
    if (version != kContainerVersion) throw FormatError("compressed model: unsupported version " + std::to_string(version));
    const auto mode = r.get<std::uint8_t>();
    if (mode > 1) throw FormatError("compressed model: unknown quantization mode " + std::to_string(mode));
    cm.qm.mode = static_cast<QuantMode>(mode);
    cm.qm.delta = r.get_f64();
    if (!(cm.qm.delta > 0.0) || !std::isfinite(cm.qm.delta)) throw FormatError("compressed model: invalid cell size");
    cm.qm.dither_seed = r.get<std::uint64_t>();
    const auto prng = r.get<std::uint8_t>();
    if (prng != kPrngSplitMix64) throw FormatError("compressed model: unknown dither generator " + std::to_string(prng));
    cm.arch = read_architecture(r);

    const auto codebook_count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < codebook_count; ++i) {
        const auto n = r.get<std::int32_t>();
        const double c = r.get_f64();
        if (n == 0 || !cm.qm.codebook.emplace(n, c).second)
            throw FormatError("compressed model: invalid codebook index " + std::to_string(n));
    }
    const auto bias_count = r.get<std::uint32_t>();
    if (bias_count > bytes.size() / 8) throw TruncatedError("compressed model: bias section exceeds file");
    cm.qm.biases.resize(bias_count);
    for (double& b : cm.qm.biases) b = r.get_f64();

    cm.lzw.alphabet_size = r.get<std::uint32_t>();
    cm.lzw.initial_width = r.get<std::uint8_t>();
    cm.lzw.max_width = r.get<std::uint8_t>();
    cm.lzw.reset_entries = r.get<std::uint32_t>();
    try {
        cm.lzw.validate();
    } catch (const ConfigError& e) {
        throw FormatError(std::string("compressed model: ") + e.what());
    }
    const auto map_count = r.get<std::uint32_t>();
    if (map_count > bytes.size() / 4) throw TruncatedError("compressed model: symbol map exceeds file");
    cm.symbol_map.resize(map_count);
    for (std::int32_t& b : cm.symbol_map) b = r.get<std::int32_t>();
    const auto symbol_count = r.get<std::uint64_t>();
    const auto coded_len = r.get<std::uint64_t>();
    if (coded_len > bytes.size()) throw TruncatedError("compressed model: coded stream exceeds file");
    const auto coded = r.get_bytes(static_cast<std::size_t>(coded_len));
    cm.coded.assign(coded.begin(), coded.end());
    r.expect_end();

    const std::vector<std::uint32_t> symbols = lzw_decode(cm.coded, cm.lzw);
    if (symbols.size() != symbol_count)
        throw CountMismatchError("compressed model: decoded " + std::to_string(symbols.size()) + " symbols, header says " +
                                 std::to_string(symbol_count));
    cm.qm.bins.resize(symbols.size());
    for (std::size_t i = 0; i < symbols.size(); ++i) {
        if (symbols[i] >= cm.symbol_map.size())
            throw FormatError("compressed model: symbol " + std::to_string(symbols[i]) + " has no bin mapping");
        cm.qm.bins[i] = cm.symbol_map[symbols[i]];
        if (cm.qm.bins[i] != 0 && !cm.qm.codebook.contains(cm.qm.bins[i]))
            throw FormatError("compressed model: missing codebook entry for bin " + std::to_string(cm.qm.bins[i]));
    }
    const Parameters shape = Network::initialize(cm.arch, 0).params;
    if (shape.weight_count() != cm.qm.size())
        throw CountMismatchError("compressed model: architecture has " + std::to_string(shape.weight_count()) +
                                 " weights, stream has " + std::to_string(cm.qm.size()));
    if (shape.bias_count() != cm.qm.biases.size())
        throw CountMismatchError("compressed model: architecture has " + std::to_string(shape.bias_count()) +
                                 " biases, container has " + std::to_string(cm.qm.biases.size()));
    return cm;
}

inline std::vector<std::uint8_t> compress(const Architecture& arch, const QuantizedModel& qm) {
    return serialize(encode_model(arch, qm));
}

/// Decoded network from container bytes.
inline Network decompress(std::span<const std::uint8_t> bytes) {
    const CompressedModel cm = parse_container(bytes);
    return reconstruct(cm.arch, cm.qm);
}

/// Original size as 32-bit floats per quantised weight over container bytes.
inline double compression_ratio(std::size_t weight_count, std::size_t container_bytes) {
    if (container_bytes == 0) throw ConfigError("empty container");
    return 4.0 * static_cast<double>(weight_count) / static_cast<double>(container_bytes);
}

}  // namespace jointsparse
