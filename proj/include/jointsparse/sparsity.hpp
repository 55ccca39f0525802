#pragma once

// Joint spatial/Winograd sparsity regularisation.
//
// Partial L2 regularisers penalise only weights whose magnitude is at or below
// a pooled nearest-rank percentile threshold, in the Winograd domain
// (G w G^T) and in the spatial domain (w). Their coefficients are e^zeta with
// zeta learned under a -alpha * zeta penalty, so that zeta drifts towards
// log(alpha) - log(R) as R shrinks.

#include <jointsparse/errors.hpp>
#include <jointsparse/nn.hpp>
#include <jointsparse/tensor.hpp>
#include <jointsparse/winograd.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <set>
#include <string>
#include <vector>

namespace jointsparse {

struct SparsityConfig {
    double s_wd = 0.0;  // target Winograd-domain sparsity, percent
    double s_sd = 0.0;  // target spatial-domain sparsity, percent
    std::vector<std::size_t> wd_layers;  // weighted-layer indices
    std::vector<std::size_t> sd_layers;
    BasisPlan bases;  // one entry per wd layer

    bool wd_enabled() const noexcept { return !wd_layers.empty(); }
    bool sd_enabled() const noexcept { return !sd_layers.empty(); }

    void validate(const Architecture& arch) const {
        if (!(s_wd >= 0.0 && s_wd <= 100.0) || !(s_sd >= 0.0 && s_sd <= 100.0))
            throw ConfigError("sparsity targets must lie in [0, 100]");
        const auto weighted = arch.weighted_layers();
        for (std::size_t k : wd_layers) {
            if (k >= weighted.size()) throw ConfigError("wd layer " + std::to_string(k) + " does not exist");
            const LayerSpec& l = arch.layers[weighted[k]];
            if (l.kind != LayerKind::Conv || l.stride != 1 || (l.kernel != 3 && l.kernel != 5))
                throw ConfigError("wd layer " + std::to_string(k) + " is not a stride-1 3x3 or 5x5 convolution");
            auto it = bases.find(k);
            if (it == bases.end() || it->second.r != l.kernel)
                throw ConfigError("wd layer " + std::to_string(k) + " has no matching Winograd basis");
        }
        for (std::size_t k : sd_layers)
            if (k >= weighted.size()) throw ConfigError("sd layer " + std::to_string(k) + " does not exist");
    }
};

/// Winograd regularisation on every eligible conv layer, spatial
/// regularisation on every conv and dense layer. A negative target disables
/// the corresponding domain.
inline SparsityConfig make_sparsity_config(const Architecture& arch, double s_wd, double s_sd,
                                           std::size_t tile_for_3x3 = 4) {
    SparsityConfig cfg;
    cfg.s_wd = std::max(s_wd, 0.0);
    cfg.s_sd = std::max(s_sd, 0.0);
    if (s_wd >= 0.0) {
        cfg.bases = default_basis_plan(arch, tile_for_3x3);
        for (const auto& [k, basis] : cfg.bases) cfg.wd_layers.push_back(k);
    }
    if (s_sd >= 0.0)
        for (std::size_t k = 0; k < arch.weighted_layers().size(); ++k) cfg.sd_layers.push_back(k);
    return cfg;
}

struct RegularizerState {
    double zeta_wd = 10.0;
    double zeta_sd = 10.0;
    double alpha = 1.0;
    double theta_wd = 0.0;
    double theta_sd = 0.0;
    std::size_t n_wd = 0;
    std::size_t n_sd = 0;
    bool learnable = true;  // false: fixed coefficients e^zeta
    OptimizerState zeta_opt{OptimizerConfig{OptimizerKind::Adam, 1e-4}};

    bool operator==(const RegularizerState&) const = default;
};

/// Nearest-rank percentile: the ceil(s/100 * N)-th smallest value (1-based);
/// 0 for s = 0.
inline double nearest_rank_percentile(std::vector<double> values, double s) {
    if (values.empty()) throw ConfigError("percentile of an empty magnitude pool");
    if (s <= 0.0) return 0.0;
    const double n = static_cast<double>(values.size());
    auto rank = static_cast<std::size_t>(std::ceil(s * n / 100.0 - 1e-9));
    rank = std::clamp<std::size_t>(rank, 1, values.size());
    std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(rank - 1), values.end());
    return values[rank - 1];
}

/// |G w G^T| of every filter in the wd layers, pooled in canonical order.
inline std::vector<double> wd_magnitudes(const Network& net, const SparsityConfig& cfg) {
    std::vector<double> out;
    for (std::size_t k : cfg.wd_layers) {
        const Tensor t = transform_filters(cfg.bases.at(k), net.params.weights[k]);
        for (double v : t.values()) out.push_back(std::abs(v));
    }
    return out;
}

inline std::vector<double> sd_magnitudes(const Network& net, const SparsityConfig& cfg) {
    std::vector<double> out;
    for (std::size_t k : cfg.sd_layers)
        for (double v : net.params.weights[k].values()) out.push_back(std::abs(v));
    return out;
}

inline double wd_threshold(const Network& net, const SparsityConfig& cfg) {
    if (!cfg.wd_enabled()) throw ConfigError("no Winograd-regularised layers");
    return nearest_rank_percentile(wd_magnitudes(net, cfg), cfg.s_wd);
}

inline double sd_threshold(const Network& net, const SparsityConfig& cfg) {
    if (!cfg.sd_enabled()) throw ConfigError("no spatially regularised layers");
    return nearest_rank_percentile(sd_magnitudes(net, cfg), cfg.s_sd);
}

inline std::size_t wd_weight_count(const Network& net, const SparsityConfig& cfg) {
    std::size_t n = 0;
    for (std::size_t k : cfg.wd_layers) {
        const Tensor& w = net.params.weights[k];
        const std::size_t tile = cfg.bases.at(k).n;
        n += w.extent(0) * w.extent(1) * tile * tile;
    }
    return n;
}

inline std::size_t sd_weight_count(const Network& net, const SparsityConfig& cfg) {
    std::size_t n = 0;
    for (std::size_t k : cfg.sd_layers) n += net.params.weights[k].size();
    return n;
}

/// (1/N_WD) sum ||(G w G^T) .* 1{|G w G^T| <= theta}||^2 over the wd layers.
inline double reg_wd(const Network& net, const SparsityConfig& cfg, double theta) {
    if (!cfg.wd_enabled()) return 0.0;
    double sum = 0.0;
    for (std::size_t k : cfg.wd_layers) {
        const Tensor t = transform_filters(cfg.bases.at(k), net.params.weights[k]);
        for (double v : t.values())
            if (std::abs(v) <= theta) sum += v * v;
    }
    return sum / static_cast<double>(wd_weight_count(net, cfg));
}

inline double reg_sd(const Network& net, const SparsityConfig& cfg, double theta) {
    if (!cfg.sd_enabled()) return 0.0;
    double sum = 0.0;
    for (std::size_t k : cfg.sd_layers)
        for (double v : net.params.weights[k].values())
            if (std::abs(v) <= theta) sum += v * v;
    return sum / static_cast<double>(sd_weight_count(net, cfg));
}

/// Per filter (2/N_WD) G^T ((G w G^T) .* mask) G with the mask frozen at theta.
/// Biases and layers outside the wd set get zero gradient.
inline Parameters grad_reg_wd(const Network& net, const SparsityConfig& cfg, double theta) {
    Parameters grad = Parameters::zeros_like(net.params);
    if (!cfg.wd_enabled()) return grad;
    const double scale = 2.0 / static_cast<double>(wd_weight_count(net, cfg));
    for (std::size_t k : cfg.wd_layers) {
        const WinogradBasis& basis = cfg.bases.at(k);
        const Matrix Gt = transpose(basis.G);
        const Tensor& w = net.params.weights[k];
        const std::size_t r = basis.r;
        Matrix filter(r, r);
        for (std::size_t d = 0; d < w.extent(0); ++d)
            for (std::size_t c = 0; c < w.extent(1); ++c) {
                for (std::size_t u = 0; u < r; ++u)
                    for (std::size_t v = 0; v < r; ++v) filter.at(u, v) = w.at(d, c, u, v);
                Matrix t = transform_filter(basis, filter);
                for (double& x : t.values())
                    if (!(std::abs(x) <= theta)) x = 0.0;
                const Matrix g = matmul(matmul(Gt, t), basis.G);
                for (std::size_t u = 0; u < r; ++u)
                    for (std::size_t v = 0; v < r; ++v) grad.weights[k].at(d, c, u, v) = scale * g.at(u, v);
            }
    }
    return grad;
}

/// (2/N_SD) w .* 1{|w| <= theta}.
inline Parameters grad_reg_sd(const Network& net, const SparsityConfig& cfg, double theta) {
    Parameters grad = Parameters::zeros_like(net.params);
    if (!cfg.sd_enabled()) return grad;
    const double scale = 2.0 / static_cast<double>(sd_weight_count(net, cfg));
    for (std::size_t k : cfg.sd_layers) {
        auto w = net.params.weights[k].values();
        auto g = grad.weights[k].values();
        for (std::size_t i = 0; i < w.size(); ++i) g[i] = std::abs(w[i]) <= theta ? scale * w[i] : 0.0;
    }
    return grad;
}

struct CostTerms {
    double loss = 0.0;  // E
    double r_wd = 0.0;
    double r_sd = 0.0;
    double cost = 0.0;  // C
};

/// C = E + e^zeta_wd R_WD + e^zeta_sd R_SD - alpha (zeta_wd + zeta_sd).
inline double total_cost(double loss, double r_wd, double r_sd, const RegularizerState& reg) {
    return loss + std::exp(reg.zeta_wd) * r_wd + std::exp(reg.zeta_sd) * r_sd - reg.alpha * (reg.zeta_wd + reg.zeta_sd);
}

/// Evaluates every term of the cost on one batch at the thresholds stored in `reg`.
inline CostTerms total_cost(const Network& net, const TrainBatch& batch, const RegularizerState& reg,
                            const SparsityConfig& cfg) {
    CostTerms t;
    t.loss = forward(net, batch).loss;
    t.r_wd = reg_wd(net, cfg, reg.theta_wd);
    t.r_sd = reg_sd(net, cfg, reg.theta_sd);
    t.cost = total_cost(t.loss, t.r_wd, t.r_sd, reg);
    return t;
}

/// One optimiser step on zeta with dC/dzeta = e^zeta R - alpha.
inline void zeta_step(RegularizerState& reg, double r_wd, double r_sd, bool update_wd = true,
                      bool update_sd = true) {
    if (!reg.learnable) return;
    const double g_wd = update_wd ? std::exp(reg.zeta_wd) * r_wd - reg.alpha : 0.0;
    const double g_sd = update_sd ? std::exp(reg.zeta_sd) * r_sd - reg.alpha : 0.0;
    const double grads[2] = {g_wd, g_sd};
    double params[2] = {reg.zeta_wd, reg.zeta_sd};
    optimizer_step(reg.zeta_opt, {std::span<double>(params, 2)}, {std::span<const double>(grads, 2)});
    if (update_wd) reg.zeta_wd = params[0];
    if (update_sd) reg.zeta_sd = params[1];
}

// ---------------------------------------------------------------------------
// Regularised training

struct TrainSchedule {
    std::size_t iterations = 0;
    std::size_t batch_size = 64;
    std::uint64_t seed = 1;
    // (first iteration, weight learning rate), ascending; empty keeps the optimizer's rate.
    std::vector<std::pair<std::uint64_t, double>> lr_steps = {};

    double learning_rate_at(std::uint64_t iteration, double fallback) const {
        double lr = fallback;
        for (const auto& [from, rate] : lr_steps)
            if (iteration >= from) lr = rate;
        return lr;
    }
};

struct TrainerState {
    Network net;
    OptimizerState weight_opt{OptimizerConfig{OptimizerKind::Adam, 1e-3}};
    RegularizerState reg;
    std::uint64_t iteration = 0;
};

struct HistoryRow {
    std::uint64_t iteration = 0;
    double loss = 0.0;
    double r_wd = 0.0;
    double r_sd = 0.0;
    double zeta_wd = 0.0;
    double zeta_sd = 0.0;
    double theta_wd = 0.0;
    double theta_sd = 0.0;
};

struct TrainResult {
    std::vector<HistoryRow> history;
    bool diverged = false;
    std::string message;
};

/// Indices of the examples in batch number `iteration` (drop-last epochs).
inline std::vector<std::size_t> batch_indices(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed,
                                              std::uint64_t iteration) {
    const std::size_t per_epoch = dataset_size / batch_size;
    if (per_epoch == 0) throw ConfigError("batch size exceeds dataset size");
    const std::uint64_t epoch = iteration / per_epoch;
    const std::size_t pos = static_cast<std::size_t>(iteration % per_epoch);
    const auto order = epoch_order(dataset_size, seed, epoch);
    return {order.begin() + static_cast<std::ptrdiff_t>(pos * batch_size),
            order.begin() + static_cast<std::ptrdiff_t>((pos + 1) * batch_size)};
}

/// Gradient of C with respect to the network parameters on one batch, with
/// thresholds recomputed from the current weights and stored in `reg`.
/// Returns the cost terms evaluated at the same point.
inline CostTerms cost_gradient(const Network& net, const TrainBatch& batch, RegularizerState& reg,
                               const SparsityConfig& cfg, Parameters& grad, bool include_sd = true) {
    CostTerms t;
    if (cfg.wd_enabled()) reg.theta_wd = wd_threshold(net, cfg);
    if (include_sd && cfg.sd_enabled()) reg.theta_sd = sd_threshold(net, cfg);
    reg.n_wd = wd_weight_count(net, cfg);
    reg.n_sd = sd_weight_count(net, cfg);

    Gradients g = backward(net, batch);
    t.loss = g.loss;
    grad = std::move(g.grads);
    if (cfg.wd_enabled()) {
        t.r_wd = reg_wd(net, cfg, reg.theta_wd);
        grad.add_scaled(grad_reg_wd(net, cfg, reg.theta_wd), std::exp(reg.zeta_wd));
    }
    if (include_sd && cfg.sd_enabled()) {
        t.r_sd = reg_sd(net, cfg, reg.theta_sd);
        grad.add_scaled(grad_reg_sd(net, cfg, reg.theta_sd), std::exp(reg.zeta_sd));
    }
    t.cost = total_cost(t.loss, t.r_wd, t.r_sd, reg);
    if (!std::isfinite(t.cost)) throw NumericError("non-finite cost at E=" + std::to_string(t.loss));
    return t;
}

/// Runs `schedule.iterations` iterations starting at state.iteration:
/// thresholds -> gradient of C -> weight update -> zeta update.
inline TrainResult train_regularized(TrainerState& state, const Tensor& images, const std::vector<int>& labels,
                                     const SparsityConfig& cfg, const TrainSchedule& schedule) {
    cfg.validate(state.net.arch);
    TrainResult result;
    const std::size_t N = labels.size();
    Parameters grad;
    for (std::size_t step = 0; step < schedule.iterations; ++step) {
        const auto idx = batch_indices(N, schedule.batch_size, schedule.seed, state.iteration);
        const TrainBatch batch = make_batch(images, labels, idx);
        HistoryRow row;
        row.iteration = state.iteration;
        try {
            const CostTerms t = cost_gradient(state.net, batch, state.reg, cfg, grad);
            row.loss = t.loss;
            row.r_wd = t.r_wd;
            row.r_sd = t.r_sd;
        } catch (const NumericError& e) {
            result.diverged = true;
            result.message = "iteration " + std::to_string(state.iteration) + ": " + e.what();
            return result;
        }
        row.zeta_wd = state.reg.zeta_wd;
        row.zeta_sd = state.reg.zeta_sd;
        row.theta_wd = state.reg.theta_wd;
        row.theta_sd = state.reg.theta_sd;
        result.history.push_back(row);

        state.weight_opt.config.learning_rate =
            schedule.learning_rate_at(state.iteration, state.weight_opt.config.learning_rate);
        optimizer_step(state.weight_opt, state.net.params, grad);
        zeta_step(state.reg, row.r_wd, row.r_sd, cfg.wd_enabled(), cfg.sd_enabled());
        ++state.iteration;
    }
    return result;
}

inline void write_history_csv(std::ostream& out, const std::vector<HistoryRow>& history) {
    out << "iteration,E,R_WD,R_SD,zeta_WD,zeta_SD,theta_WD,theta_SD\n";
    const auto old_precision = out.precision(17);
    for (const HistoryRow& h : history)
        out << h.iteration << ',' << h.loss << ',' << h.r_wd << ',' << h.r_sd << ',' << h.zeta_wd << ','
            << h.zeta_sd << ',' << h.theta_wd << ',' << h.theta_sd << '\n';
    out.precision(old_precision);
}

}  // namespace jointsparse
