#pragma once

// Deployment of a (decompressed) network in either domain: global magnitude
// pruning, sparse spatial and sparse Winograd convolution, MAC accounting and
// evaluation.

#include <jointsparse/errors.hpp>
#include <jointsparse/nn.hpp>
#include <jointsparse/sparsity.hpp>
#include <jointsparse/tensor.hpp>
#include <jointsparse/winograd.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace jointsparse {

// ---------------------------------------------------------------------------
// Sparse filters

/// Coordinate list of the nonzeros of one k x k filter slice, row-major indices.
struct SparseFilter {
    std::size_t size = 0;
    std::vector<std::uint32_t> index;
    std::vector<double> value;

    std::size_t nnz() const noexcept { return index.size(); }

    static SparseFilter from_dense(const double* data, std::size_t size) {
        SparseFilter f;
        f.size = size;
        for (std::size_t i = 0; i < size * size; ++i)
            if (data[i] != 0.0) {
                f.index.push_back(static_cast<std::uint32_t>(i));
                f.value.push_back(data[i]);
            }
        return f;
    }
};

/// D x C sparse slices of a D x C x k x k filter tensor.
struct SparseFilterBank {
    std::size_t out_channels = 0;
    std::size_t in_channels = 0;
    std::size_t size = 0;
    std::vector<SparseFilter> slices;

    const SparseFilter& slice(std::size_t d, std::size_t c) const { return slices[d * in_channels + c]; }

    std::size_t nnz() const {
        std::size_t n = 0;
        for (const SparseFilter& s : slices) n += s.nnz();
        return n;
    }

    static SparseFilterBank from_dense(const Tensor& filters) {
        if (filters.rank() != 4 || filters.extent(2) != filters.extent(3))
            throw DimensionError("sparse filters need a D x C x k x k tensor, got " + shape_string(filters.shape()));
        SparseFilterBank bank;
        bank.out_channels = filters.extent(0);
        bank.in_channels = filters.extent(1);
        bank.size = filters.extent(2);
        const std::size_t k2 = bank.size * bank.size;
        for (std::size_t s = 0; s < bank.out_channels * bank.in_channels; ++s)
            bank.slices.push_back(SparseFilter::from_dense(filters.values().data() + s * k2, bank.size));
        return bank;
    }

    Tensor densify() const {
        Tensor out({out_channels, in_channels, size, size});
        const std::size_t k2 = size * size;
        for (std::size_t s = 0; s < slices.size(); ++s)
            for (std::size_t i = 0; i < slices[s].nnz(); ++i) out[s * k2 + slices[s].index[i]] = slices[s].value[i];
        return out;
    }
};

// ---------------------------------------------------------------------------
// Pruning

struct SpatialPruning {
    Network net;
    std::vector<Tensor> masks;  // per weighted layer, 1 = kept
    double theta = 0.0;
    std::size_t zeros = 0;  // in-scope weights that are zero after pruning
    std::size_t total = 0;

    double sparsity() const { return total == 0 ? 0.0 : static_cast<double>(zeros) / static_cast<double>(total); }
};

/// Zeroes every in-scope weight with |w| <= the global nearest-rank s-th
/// percentile. Scope defaults to every conv and dense layer.
inline SpatialPruning prune_spatial(const Network& net, double s, std::vector<std::size_t> layers = {}) {
    if (!(s >= 0.0 && s <= 100.0)) throw ConfigError("prune ratio must lie in [0, 100]");
    if (layers.empty())
        for (std::size_t k = 0; k < net.params.weights.size(); ++k) layers.push_back(k);
    SpatialPruning out;
    out.net = net;
    std::vector<double> mags;
    for (std::size_t k : layers) {
        if (k >= net.params.weights.size()) throw ConfigError("prune layer " + std::to_string(k) + " does not exist");
        for (double v : net.params.weights[k].values()) mags.push_back(std::abs(v));
    }
    out.theta = nearest_rank_percentile(mags, s);
    for (const Tensor& w : net.params.weights) out.masks.push_back(Tensor::filled(w.shape(), 1.0));
    for (std::size_t k : layers) {
        auto w = out.net.params.weights[k].values();
        auto m = out.masks[k].values();
        for (std::size_t i = 0; i < w.size(); ++i) {
            if (s > 0.0 && std::abs(w[i]) <= out.theta) {
                w[i] = 0.0;
                m[i] = 0.0;
            }
            if (w[i] == 0.0) ++out.zeros;
        }
        out.total += w.size();
    }
    return out;
}

struct WinogradDeployment {
    BasisPlan bases;
    std::map<std::size_t, Tensor> filters;  // D x C x n x n, pruned
    double theta = 0.0;
    std::map<std::size_t, double> layer_sparsity;
    std::size_t zeros = 0;
    std::size_t total = 0;

    double sparsity() const { return total == 0 ? 0.0 : static_cast<double>(zeros) / static_cast<double>(total); }
};

/// Transforms every filter of the layers in `bases` and zeroes |G w G^T| <=
/// the global nearest-rank s-th percentile. Entries that are zero before
/// pruning count towards the achieved sparsity.
inline WinogradDeployment prune_winograd(const Network& net, double s, const BasisPlan& bases) {
    if (!(s >= 0.0 && s <= 100.0)) throw ConfigError("prune ratio must lie in [0, 100]");
    if (bases.empty()) throw ConfigError("no Winograd-eligible layers to prune");
    WinogradDeployment dep;
    dep.bases = bases;
    std::vector<double> mags;
    for (const auto& [k, basis] : bases) {
        if (k >= net.params.weights.size()) throw ConfigError("basis for missing layer " + std::to_string(k));
        const LayerSpec& l = net.weighted_spec(k);
        if (l.kind != LayerKind::Conv || l.kernel != basis.r)
            throw ConfigError("basis r=" + std::to_string(basis.r) + " does not match layer " + std::to_string(k));
        Tensor t = transform_filters(basis, net.params.weights[k]);
        for (double v : t.values()) mags.push_back(std::abs(v));
        dep.filters.emplace(k, std::move(t));
    }
    dep.theta = nearest_rank_percentile(mags, s);
    for (auto& [k, t] : dep.filters) {
        std::size_t zeros = 0;
        for (double& v : t.values()) {
            if (s > 0.0 && std::abs(v) <= dep.theta) v = 0.0;
            if (v == 0.0) ++zeros;
        }
        dep.layer_sparsity[k] = static_cast<double>(zeros) / static_cast<double>(t.size());
        dep.zeros += zeros;
        dep.total += t.size();
    }
    return dep;
}

// ---------------------------------------------------------------------------
// Sparse engines

/// Direct convolution visiting only the stored nonzeros. Adds the
/// multiply-accumulates performed to *macs when given.
inline Tensor sparse_spatial_conv(const Tensor& input, const SparseFilterBank& bank, std::uint64_t* macs = nullptr) {
    if (input.rank() != 3 || input.extent(0) != bank.in_channels)
        throw DimensionError("sparse conv: input " + shape_string(input.shape()) + " does not match " +
                             std::to_string(bank.in_channels) + " input channels");
    const std::size_t r = bank.size, H = input.extent(1), W = input.extent(2);
    if (H < r || W < r) throw DimensionError("sparse conv: input smaller than filter");
    const std::size_t Ho = H - r + 1, Wo = W - r + 1;
    Tensor out({bank.out_channels, Ho, Wo});
    const double* x = input.values().data();
    double* y = out.values().data();
    for (std::size_t d = 0; d < bank.out_channels; ++d)
        for (std::size_t c = 0; c < bank.in_channels; ++c) {
            const SparseFilter& f = bank.slice(d, c);
            for (std::size_t e = 0; e < f.nnz(); ++e) {
                const std::size_t u = f.index[e] / r, v = f.index[e] % r;
                const double w = f.value[e];
                for (std::size_t p = 0; p < Ho; ++p) {
                    const double* row = x + (c * H + p + u) * W + v;
                    double* dst = y + (d * Ho + p) * Wo;
                    for (std::size_t q = 0; q < Wo; ++q) dst[q] += w * row[q];
                }
            }
            if (macs) *macs += static_cast<std::uint64_t>(f.nnz()) * Ho * Wo;
        }
    return out;
}

/// Winograd convolution whose element-wise stage visits only the stored
/// nonzeros of the n x n Winograd-domain filters.
inline Tensor sparse_winograd_conv(const WinogradBasis& basis, const Tensor& input, const SparseFilterBank& bank,
                                   std::uint64_t* macs = nullptr) {
    if (bank.size != basis.n) throw DimensionError("sparse Winograd filters are not " + std::to_string(basis.n) + "x" + std::to_string(basis.n));
    if (input.rank() != 3 || input.extent(0) != bank.in_channels)
        throw DimensionError("sparse Winograd conv: input " + shape_string(input.shape()) + " does not match " +
                             std::to_string(bank.in_channels) + " input channels");
    const std::size_t C = bank.in_channels, D = bank.out_channels, n = basis.n, m = basis.m;
    const TileGrid grid = make_tile_grid(basis, input.extent(1), input.extent(2));
    const Matrix Ft = transpose(basis.F);
    const Matrix St = transpose(basis.S);
    Tensor out({D, grid.out_h, grid.out_w});
    std::vector<Matrix> transformed(C);
    Matrix tile(n, n);
    Matrix acc(n, n);
    for (std::size_t th = 0; th < grid.tiles_h; ++th)
        for (std::size_t tw = 0; tw < grid.tiles_w; ++tw) {
            const std::size_t row = th * m, col = tw * m;
            for (std::size_t c = 0; c < C; ++c) {
                detail::load_tile(input, c, row, col, tile);
                transformed[c] = matmul(matmul(basis.F, tile), Ft);
            }
            for (std::size_t d = 0; d < D; ++d) {
                std::fill(acc.values().begin(), acc.values().end(), 0.0);
                for (std::size_t c = 0; c < C; ++c) {
                    const SparseFilter& f = bank.slice(d, c);
                    const auto xv = transformed[c].values();
                    for (std::size_t e = 0; e < f.nnz(); ++e) acc[f.index[e]] += f.value[e] * xv[f.index[e]];
                }
                const Matrix y = matmul(matmul(St, acc), basis.S);
                for (std::size_t i = 0; i < m && row + i < grid.out_h; ++i)
                    for (std::size_t j = 0; j < m && col + j < grid.out_w; ++j) out.at(d, row + i, col + j) = y.at(i, j);
            }
        }
    if (macs) *macs += static_cast<std::uint64_t>(bank.nnz()) * grid.tile_count();
    return out;
}

/// Sparse spatial engine over every conv layer of `net`.
inline ConvKernel sparse_spatial_kernel(const Network& net) {
    auto banks = std::make_shared<std::map<std::size_t, SparseFilterBank>>();
    for (std::size_t k = 0; k < net.params.weights.size(); ++k)
        if (net.weighted_spec(k).kind == LayerKind::Conv)
            banks->emplace(k, SparseFilterBank::from_dense(net.params.weights[k]));
    return [banks](std::size_t k, const Tensor& input) { return sparse_spatial_conv(input, banks->at(k)); };
}

/// Sparse Winograd engine using the deployment's filters; conv layers
/// without a basis run the sparse spatial engine.
inline ConvKernel sparse_winograd_kernel(const Network& net, const WinogradDeployment& dep) {
    struct State {
        BasisPlan bases;
        std::map<std::size_t, SparseFilterBank> winograd;
        std::map<std::size_t, SparseFilterBank> spatial;
    };
    auto st = std::make_shared<State>();
    st->bases = dep.bases;
    for (const auto& [k, t] : dep.filters) st->winograd.emplace(k, SparseFilterBank::from_dense(t));
    for (std::size_t k = 0; k < net.params.weights.size(); ++k)
        if (net.weighted_spec(k).kind == LayerKind::Conv && !dep.filters.contains(k))
            st->spatial.emplace(k, SparseFilterBank::from_dense(net.params.weights[k]));
    return [st](std::size_t k, const Tensor& input) {
        if (auto it = st->winograd.find(k); it != st->winograd.end())
            return sparse_winograd_conv(st->bases.at(k), input, it->second);
        return sparse_spatial_conv(input, st->spatial.at(k));
    };
}

// ---------------------------------------------------------------------------
// MAC accounting

enum class MacMode { DenseSpatial, SparseSpatial, DenseWinograd, SparseWinograd };

inline MacMode parse_mac_mode(const std::string& name) {
    if (name == "dense-spatial") return MacMode::DenseSpatial;
    if (name == "sparse-spatial") return MacMode::SparseSpatial;
    if (name == "dense-winograd") return MacMode::DenseWinograd;
    if (name == "sparse-winograd") return MacMode::SparseWinograd;
    throw ConfigError("unknown MAC mode '" + name + "'");
}

struct LayerMacs {
    std::size_t layer = 0;  // weighted-layer index
    LayerKind kind = LayerKind::Conv;
    std::uint64_t dense_spatial = 0;
    std::uint64_t sparse_spatial = 0;
    std::uint64_t dense_winograd = 0;   // element-wise stage; 0 without a basis
    std::uint64_t sparse_winograd = 0;
    std::uint64_t transform_overhead = 0;

    std::uint64_t get(MacMode mode) const {
        switch (mode) {
            case MacMode::DenseSpatial: return dense_spatial;
            case MacMode::SparseSpatial: return sparse_spatial;
            case MacMode::DenseWinograd: return dense_winograd;
            case MacMode::SparseWinograd: return sparse_winograd;
        }
        return 0;
    }
};

struct MacReport {
    std::vector<LayerMacs> layers;
    bool include_transforms = false;

    /// Sum over layers; Winograd totals add the transform column when enabled.
    std::uint64_t total(MacMode mode) const {
        std::uint64_t sum = 0;
        for (const LayerMacs& l : layers) {
            sum += l.get(mode);
            if (include_transforms && (mode == MacMode::DenseWinograd || mode == MacMode::SparseWinograd))
                sum += l.transform_overhead;
        }
        return sum;
    }

    std::uint64_t total_transform_overhead() const {
        std::uint64_t sum = 0;
        for (const LayerMacs& l : layers) sum += l.transform_overhead;
        return sum;
    }
};

/// MACs to process one input image. Spatial sparse counts use the zeros of
/// `net`; Winograd counts cover the layers of `dep` (or, without a
/// deployment, the unpruned transforms under `bases`).
inline MacReport count_macs(const Network& net, const WinogradDeployment* dep, const BasisPlan& bases,
                            bool include_transforms = false) {
    MacReport report;
    report.include_transforms = include_transforms;
    const auto shapes = net.arch.activation_shapes();
    const auto weighted = net.arch.weighted_layers();
    for (std::size_t k = 0; k < weighted.size(); ++k) {
        const LayerSpec& l = net.arch.layers[weighted[k]];
        const Tensor& w = net.params.weights[k];
        const std::uint64_t nnz = static_cast<std::uint64_t>(
            std::count_if(w.values().begin(), w.values().end(), [](double v) { return v != 0.0; }));
        LayerMacs row;
        row.layer = k;
        row.kind = l.kind;
        if (l.kind == LayerKind::Dense) {
            row.dense_spatial = w.size();
            row.sparse_spatial = nnz;
            report.layers.push_back(row);
            continue;
        }
        const Shape& in = shapes[weighted[k]];
        const std::uint64_t Ho = in[1] - l.kernel + 1, Wo = in[2] - l.kernel + 1;
        row.dense_spatial = static_cast<std::uint64_t>(w.size()) * Ho * Wo;
        row.sparse_spatial = nnz * Ho * Wo;

        const WinogradBasis* basis = nullptr;
        if (dep) {
            if (auto it = dep->bases.find(k); it != dep->bases.end()) basis = &it->second;
        } else if (auto it = bases.find(k); it != bases.end()) {
            basis = &it->second;
        }
        if (basis) {
            const TileGrid grid = make_tile_grid(*basis, in[1], in[2]);
            const std::uint64_t tiles = grid.tile_count(), n = basis->n, m = basis->m, r = basis->r;
            const std::uint64_t D = l.out_channels, C = l.in_channels;
            const Tensor t = dep ? dep->filters.at(k) : transform_filters(*basis, w);
            const std::uint64_t wnnz = static_cast<std::uint64_t>(
                std::count_if(t.values().begin(), t.values().end(), [](double v) { return v != 0.0; }));
            row.dense_winograd = D * C * n * n * tiles;
            row.sparse_winograd = wnnz * tiles;
            row.transform_overhead = C * tiles * 2 * n * n * n   // F x F^T
                                     + D * C * (n * r * r + n * n * r)  // G w G^T
                                     + D * tiles * (m * n * n + m * m * n);  // S^T Y S
        }
        report.layers.push_back(row);
    }
    return report;
}

// ---------------------------------------------------------------------------
// Evaluation

struct Evaluation {
    std::size_t count = 0;
    std::size_t correct = 0;
    double loss = 0.0;  // mean cross-entropy
    std::vector<int> predictions;

    double accuracy() const { return count == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(count); }
};

inline Evaluation evaluate(const Network& net, const Tensor& images, const std::vector<int>& labels,
                           const ConvKernel& conv, std::size_t batch_size = 250) {
    Evaluation ev;
    ev.count = labels.size();
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < labels.size(); start += batch_size) {
        const std::size_t end = std::min(labels.size(), start + batch_size);
        std::vector<std::size_t> idx(end - start);
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
        const TrainBatch batch = make_batch(images, labels, idx);
        const ForwardResult r = forward(net, batch, conv);
        loss_sum += r.loss * static_cast<double>(idx.size());
        for (std::size_t i = 0; const int p : predict(r.logits)) {
            ev.predictions.push_back(p);
            if (p == batch.labels[i++]) ++ev.correct;
        }
    }
    ev.loss = ev.count == 0 ? 0.0 : loss_sum / static_cast<double>(ev.count);
    return ev;
}

}  // namespace jointsparse
