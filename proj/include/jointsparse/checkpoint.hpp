#pragma once

// Training checkpoint "WSPC": raw f64 parameters, optimizer state and
// regularizer state in the same framing as the compressed container.

#include <jointsparse/bytes.hpp>
#include <jointsparse/compressor.hpp>
#include <jointsparse/sparsity.hpp>

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

namespace jointsparse {

inline constexpr char kCheckpointMagic[5] = "WSPC";
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
    TrainerState state;
    std::uint64_t seed = 0;
};

namespace detail {

inline void write_optimizer(ByteWriter& w, const OptimizerState& opt) {
    w.put(static_cast<std::uint8_t>(opt.config.kind));
    w.put_f64(opt.config.learning_rate);
    w.put_f64(opt.config.beta1);
    w.put_f64(opt.config.beta2);
    w.put_f64(opt.config.epsilon);
    w.put(opt.steps);
    w.put(static_cast<std::uint32_t>(opt.first_moment.size()));
    for (std::size_t i = 0; i < opt.first_moment.size(); ++i) {
        w.put(static_cast<std::uint64_t>(opt.first_moment[i].size()));
        for (double v : opt.first_moment[i]) w.put_f64(v);
        for (double v : opt.second_moment[i]) w.put_f64(v);
    }
}

inline OptimizerState read_optimizer(ByteReader& r) {
    OptimizerState opt;
    const std::uint8_t kind = r.get<std::uint8_t>();
    if (kind > static_cast<std::uint8_t>(OptimizerKind::Adam))
        throw FormatError(r.what() + ": unknown optimizer kind " + std::to_string(kind));
    opt.config.kind = static_cast<OptimizerKind>(kind);
    opt.config.learning_rate = r.get_f64();
    opt.config.beta1 = r.get_f64();
    opt.config.beta2 = r.get_f64();
    opt.config.epsilon = r.get_f64();
    opt.steps = r.get<std::uint64_t>();
    const std::uint32_t tensors = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < tensors; ++i) {
        const std::uint64_t n = r.get<std::uint64_t>();
        std::vector<double> m, v;
        for (std::uint64_t k = 0; k < n; ++k) m.push_back(r.get_f64());
        for (std::uint64_t k = 0; k < n; ++k) v.push_back(r.get_f64());
        opt.first_moment.push_back(std::move(m));
        opt.second_moment.push_back(std::move(v));
    }
    return opt;
}

inline void read_values(ByteReader& r, std::span<double> dst) {
    const std::uint64_t n = r.get<std::uint64_t>();
    if (n != dst.size())
        throw CountMismatchError(r.what() + ": tensor holds " + std::to_string(n) + " values, architecture needs " +
                                 std::to_string(dst.size()));
    for (double& v : dst) v = r.get_f64();
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck) {
    const TrainerState& s = ck.state;
    ByteWriter w;
    w.put_magic(kCheckpointMagic);
    w.put(kCheckpointVersion);
    write_architecture(w, s.net.arch);
    for (const auto& view : s.net.params.views()) {
        w.put(static_cast<std::uint64_t>(view.size()));
        for (double v : view) w.put_f64(v);
    }
    detail::write_optimizer(w, s.weight_opt);
    const RegularizerState& g = s.reg;
    w.put_f64(g.zeta_wd);
    w.put_f64(g.zeta_sd);
    w.put_f64(g.alpha);
    w.put_f64(g.theta_wd);
    w.put_f64(g.theta_sd);
    w.put(static_cast<std::uint64_t>(g.n_wd));
    w.put(static_cast<std::uint64_t>(g.n_sd));
    w.put(static_cast<std::uint8_t>(g.learnable ? 1 : 0));
    detail::write_optimizer(w, g.zeta_opt);
    w.put(s.iteration);
    w.put(ck.seed);
    w.put_crc();
    return w.take();
}

inline Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes, "checkpoint");
    r.expect_envelope(kCheckpointMagic);
    const std::uint16_t version = r.get<std::uint16_t>();
    if (version != kCheckpointVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    Checkpoint ck;
    TrainerState& s = ck.state;
    s.net = Network::initialize(read_architecture(r), 0);
    for (const auto& view : s.net.params.views()) detail::read_values(r, view);
    s.weight_opt = detail::read_optimizer(r);
    RegularizerState& g = s.reg;
    g.zeta_wd = r.get_f64();
    g.zeta_sd = r.get_f64();
    g.alpha = r.get_f64();
    g.theta_wd = r.get_f64();
    g.theta_sd = r.get_f64();
    g.n_wd = r.get<std::uint64_t>();
    g.n_sd = r.get<std::uint64_t>();
    const std::uint8_t learnable = r.get<std::uint8_t>();
    if (learnable > 1) throw FormatError("checkpoint: invalid learnable flag");
    g.learnable = learnable == 1;
    g.zeta_opt = detail::read_optimizer(r);
    s.iteration = r.get<std::uint64_t>();
    ck.seed = r.get<std::uint64_t>();
    r.expect_end();
    for (const auto& view : s.net.params.views())
        for (double v : view)
            if (!std::isfinite(v)) throw FormatError("checkpoint: non-finite parameter");
    return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    write_file_atomic(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return parse_checkpoint(read_binary_file(path));
}

}  // namespace jointsparse
