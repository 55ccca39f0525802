#include <jointsparse/deploy.hpp>

#include <gtest/gtest.h>

#include <random>

using namespace jointsparse;

namespace {

Tensor random_tensor(const Shape& shape, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    Tensor t(shape);
    for (double& v : t.values()) v = dist(rng);
    return t;
}

Tensor random_sparse(const Shape& shape, double keep, std::mt19937_64& rng) {
    Tensor t = random_tensor(shape, rng);
    std::bernoulli_distribution coin(keep);
    for (double& v : t.values())
        if (!coin(rng)) v = 0.0;
    return t;
}

Architecture single_conv(std::size_t h, std::size_t w) {
    Architecture a;
    a.input_channels = 1;
    a.input_height = h;
    a.input_width = w;
    a.layers = {LayerSpec::conv(1, 1, 3)};
    a.layers.push_back(LayerSpec::dense(shape_size(a.activation_shapes().back()), 2));
    return a;
}

}  // namespace

TEST(SparseFilter, RoundTripAndInvariants) {
    std::mt19937_64 rng(1);
    const Tensor dense = random_sparse({3, 2, 3, 3}, 0.4, rng);
    const SparseFilterBank bank = SparseFilterBank::from_dense(dense);
    EXPECT_EQ(bank.densify(), dense);
    for (const SparseFilter& f : bank.slices) {
        for (std::size_t i = 1; i < f.nnz(); ++i) EXPECT_LT(f.index[i - 1], f.index[i]);
        for (double v : f.value) EXPECT_NE(v, 0.0);
    }
    EXPECT_THROW(SparseFilterBank::from_dense(Tensor({2, 3, 3})), DimensionError);
}

TEST(PruneSpatial, Examples) {
    Network net = Network::initialize(single_conv(4, 4), 1);
    net.params.weights[1] = Tensor({2, 4}, {0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3, 0.4});
    const SpatialPruning half = prune_spatial(net, 50, {1});
    EXPECT_EQ(half.theta, 0.2);
    EXPECT_EQ(half.net.params.weights[1], Tensor({2, 4}, {0, 0, 0.3, 0.4, 0, 0, 0.3, 0.4}));
    EXPECT_EQ(half.net.params.weights[0], net.params.weights[0]);
    EXPECT_DOUBLE_EQ(half.sparsity(), 0.5);

    const SpatialPruning none = prune_spatial(net, 0);
    EXPECT_EQ(none.net.params, net.params);
    const SpatialPruning all = prune_spatial(net, 100);
    for (const Tensor& w : all.net.params.weights) EXPECT_EQ(sq_norm(w), 0.0);
    EXPECT_EQ(all.net.params.biases, net.params.biases);
    EXPECT_THROW(prune_spatial(net, 101), ConfigError);
}

TEST(PruneSpatial, GlobalThresholdReproducesMasks) {
    const Network net = Network::initialize(paper_net(), 3);
    const SpatialPruning p = prune_spatial(net, 70);
    std::vector<double> all;
    for (const Tensor& w : net.params.weights)
        for (double v : w.values()) all.push_back(std::abs(v));
    const double theta = nearest_rank_percentile(all, 70);
    EXPECT_EQ(p.theta, theta);
    for (std::size_t k = 0; k < net.params.weights.size(); ++k)
        for (std::size_t i = 0; i < net.params.weights[k].size(); ++i)
            EXPECT_EQ(p.masks[k][i] == 1.0, std::abs(net.params.weights[k][i]) > theta);
    EXPECT_NEAR(p.sparsity(), 0.7, 1.0 / static_cast<double>(p.total));
}

TEST(PruneWinograd, DeltaFilterKeepsQuarterEntries) {
    Network net = Network::initialize(single_conv(6, 6), 1);
    net.params.weights[0].fill(0.0);
    net.params.weights[0].at(0, 0, 1, 1) = 1.0;
    const BasisPlan plan = default_basis_plan(net.arch);
    const WinogradDeployment dep = prune_winograd(net, 75, plan);
    const Tensor& t = dep.filters.at(0);
    std::size_t survivors = 0;
    for (double v : t.values())
        if (v != 0.0) {
            ++survivors;
            EXPECT_EQ(std::abs(v), 0.25);
        }
    EXPECT_EQ(survivors, 4u);
    EXPECT_DOUBLE_EQ(dep.sparsity(), 0.75);
}

TEST(PruneWinograd, ZeroTargetOnlyTransforms) {
    const Network net = Network::initialize(paper_net(), 2);
    const BasisPlan plan = default_basis_plan(net.arch);
    const WinogradDeployment dep = prune_winograd(net, 0, plan);
    for (const auto& [k, basis] : plan) EXPECT_EQ(dep.filters.at(k), transform_filters(basis, net.params.weights[k]));
    EXPECT_THROW(prune_winograd(net, 50, BasisPlan{}), ConfigError);
}

TEST(PruneWinograd, AchievedSparsityWithinOneElement) {
    const Network net = Network::initialize(paper_net(), 4);
    const WinogradDeployment dep = prune_winograd(net, 80, default_basis_plan(net.arch));
    const double target = std::ceil(0.8 * static_cast<double>(dep.total));
    EXPECT_LE(std::abs(static_cast<double>(dep.zeros) - target), 1.0);
    // Global threshold reproduces per-layer masks.
    for (const auto& [k, t] : dep.filters) {
        const Tensor full = transform_filters(dep.bases.at(k), net.params.weights[k]);
        for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(t[i] == 0.0, std::abs(full[i]) <= dep.theta);
    }
}

TEST(SparseSpatialConv, EmptyFiltersGiveZeroAndNoMacs) {
    std::mt19937_64 rng(5);
    const Tensor input = random_tensor({2, 6, 6}, rng);
    std::uint64_t macs = 0;
    const Tensor out = sparse_spatial_conv(input, SparseFilterBank::from_dense(Tensor({3, 2, 3, 3})), &macs);
    EXPECT_EQ(out, Tensor({3, 4, 4}));
    EXPECT_EQ(macs, 0u);
}

TEST(SparseSpatialConv, CenterTapShiftsInput) {
    std::mt19937_64 rng(6);
    const Tensor input = random_tensor({1, 5, 7}, rng);
    Tensor f({1, 1, 3, 3});
    f.at(0, 0, 1, 1) = 2.5;
    std::uint64_t macs = 0;
    const Tensor out = sparse_spatial_conv(input, SparseFilterBank::from_dense(f), &macs);
    for (std::size_t p = 0; p < 3; ++p)
        for (std::size_t q = 0; q < 5; ++q) EXPECT_EQ(out.at(0, p, q), 2.5 * input.at(0, p + 1, q + 1));
    EXPECT_EQ(macs, 15u);
}

TEST(SparseSpatialConv, MatchesDenseOracle) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t C = 1 + trial % 3, D = 1 + trial % 4, r = trial % 2 ? 3 : 5;
        const Tensor input = random_tensor({C, r + 2 + trial % 5, r + 1 + trial % 7}, rng);
        const Tensor filters = random_sparse({D, C, r, r}, 0.3, rng);
        const SparseFilterBank bank = SparseFilterBank::from_dense(filters);
        std::uint64_t macs = 0;
        const Tensor out = sparse_spatial_conv(input, bank, &macs);
        EXPECT_LE(max_abs_diff(out, direct_conv2d(input, filters)), 1e-10);
        EXPECT_EQ(macs, bank.nnz() * out.extent(1) * out.extent(2));
    }
    EXPECT_THROW(sparse_spatial_conv(Tensor({2, 5, 5}), SparseFilterBank::from_dense(Tensor({1, 1, 3, 3}))),
                 DimensionError);
}

TEST(SparseWinogradConv, MatchesDenseWinogradWithPrunedFilters) {
    std::mt19937_64 rng(8);
    for (auto [r, n] : std::vector<std::pair<std::size_t, std::size_t>>{{3, 4}, {3, 6}, {5, 8}}) {
        const WinogradBasis basis = build_basis(r, n);
        for (int trial = 0; trial < 15; ++trial) {
            const std::size_t C = 1 + trial % 3, D = 1 + trial % 2;
            const Tensor input = random_tensor({C, r + 3 + trial % 4, r + 2 + trial % 5}, rng);
            const Tensor filters = random_tensor({D, C, r, r}, rng);
            Tensor w = transform_filters(basis, filters);
            std::vector<double> mags;
            for (double v : w.values()) mags.push_back(std::abs(v));
            const double theta = nearest_rank_percentile(mags, 50);
            for (double& v : w.values())
                if (std::abs(v) <= theta) v = 0.0;
            std::uint64_t macs = 0;
            const SparseFilterBank bank = SparseFilterBank::from_dense(w);
            const Tensor out = sparse_winograd_conv(basis, input, bank, &macs);
            EXPECT_LE(max_abs_diff(out, winograd_conv2d_transformed(basis, input, w)), 1e-10);
            EXPECT_EQ(macs, bank.nnz() * make_tile_grid(basis, input.extent(1), input.extent(2)).tile_count());
        }
    }
}

TEST(SparseWinogradConv, UnprunedEqualsWinogradAndAllPrunedIsZero) {
    std::mt19937_64 rng(9);
    const WinogradBasis basis = build_basis(3, 4);
    const Tensor input = random_tensor({2, 9, 8}, rng);
    const Tensor filters = random_tensor({3, 2, 3, 3}, rng);
    const Tensor w = transform_filters(basis, filters);
    EXPECT_LE(max_abs_diff(sparse_winograd_conv(basis, input, SparseFilterBank::from_dense(w)),
                           winograd_conv2d(basis, input, filters)),
              1e-10);
    EXPECT_EQ(sparse_winograd_conv(basis, input, SparseFilterBank::from_dense(Tensor(w.shape()))), Tensor({3, 7, 6}));
    EXPECT_THROW(sparse_winograd_conv(build_basis(3, 6), input, SparseFilterBank::from_dense(w)), DimensionError);
}

TEST(Pipeline, PruneDensifySparseWinogradEqualsDirectApplication) {
    const Network net = Network::initialize(paper_net(), 11);
    const WinogradDeployment dep = prune_winograd(net, 60, default_basis_plan(net.arch));
    std::mt19937_64 rng(10);
    const Tensor input = random_tensor({8, 13, 13}, rng);
    const auto bank = SparseFilterBank::from_dense(dep.filters.at(1));
    EXPECT_LE(max_abs_diff(sparse_winograd_conv(dep.bases.at(1), input, SparseFilterBank::from_dense(bank.densify())),
                           winograd_conv2d_transformed(dep.bases.at(1), input, dep.filters.at(1))),
              1e-10);
}

TEST(Macs, HandComputableLayer) {
    const Network net = Network::initialize(single_conv(4, 4), 1);
    const MacReport report = count_macs(net, nullptr, default_basis_plan(net.arch));
    EXPECT_EQ(report.layers[0].dense_spatial, 36u);
    EXPECT_EQ(report.layers[0].dense_winograd, 16u);
    EXPECT_EQ(report.layers[1].dense_spatial, 8u);
    EXPECT_EQ(report.layers[1].dense_winograd, 0u);
    EXPECT_EQ(report.total(MacMode::DenseSpatial), 44u);

    // Keep 4 of the 16 Winograd-domain entries.
    Network delta = net;
    delta.params.weights[0].fill(0.0);
    delta.params.weights[0].at(0, 0, 1, 1) = 1.0;
    const WinogradDeployment dep = prune_winograd(delta, 75, default_basis_plan(net.arch));
    const MacReport sparse = count_macs(delta, &dep, dep.bases);
    EXPECT_EQ(sparse.layers[0].sparse_winograd, 4u);
    EXPECT_EQ(sparse.layers[0].sparse_spatial, 4u);
}

TEST(Macs, TransformColumnOnlyWhenFlagged) {
    const Network net = Network::initialize(single_conv(4, 4), 1);
    const MacReport off = count_macs(net, nullptr, default_basis_plan(net.arch), false);
    const MacReport on = count_macs(net, nullptr, default_basis_plan(net.arch), true);
    // One tile, n=4, m=2, r=3: 2*64 + (4*9 + 16*3) + (2*16 + 4*4) = 260.
    EXPECT_EQ(off.layers[0].transform_overhead, 260u);
    EXPECT_EQ(off.total(MacMode::DenseWinograd), 16u);
    EXPECT_EQ(on.total(MacMode::DenseWinograd), 276u);
    EXPECT_EQ(on.total(MacMode::DenseSpatial), off.total(MacMode::DenseSpatial));
}

TEST(Macs, MonotoneInSparsityAndTotalsSumLayers) {
    const Network net = Network::initialize(paper_net(), 12);
    const BasisPlan plan = default_basis_plan(net.arch);
    std::uint64_t prev_spatial = UINT64_MAX, prev_winograd = UINT64_MAX;
    for (double s : {0.0, 20.0, 50.0, 70.0, 90.0, 100.0}) {
        const SpatialPruning sp = prune_spatial(net, s);
        const WinogradDeployment dep = prune_winograd(net, s, plan);
        const MacReport report = count_macs(sp.net, &dep, plan);
        std::uint64_t sum = 0;
        for (const LayerMacs& l : report.layers) {
            EXPECT_LE(l.sparse_spatial, l.dense_spatial);
            EXPECT_LE(l.sparse_winograd, l.dense_winograd);
            sum += l.sparse_spatial;
        }
        EXPECT_EQ(sum, report.total(MacMode::SparseSpatial));
        if (s == 0.0) {
            EXPECT_EQ(report.total(MacMode::SparseSpatial), report.total(MacMode::DenseSpatial));
            EXPECT_EQ(report.total(MacMode::SparseWinograd), report.total(MacMode::DenseWinograd));
        }
        EXPECT_LE(report.total(MacMode::SparseSpatial), prev_spatial);
        EXPECT_LE(report.total(MacMode::SparseWinograd), prev_winograd);
        prev_spatial = report.total(MacMode::SparseSpatial);
        prev_winograd = report.total(MacMode::SparseWinograd);
    }
    EXPECT_EQ(prev_spatial, 0u);
    EXPECT_EQ(prev_winograd, 0u);
}

TEST(Macs, ModeParsing) {
    EXPECT_EQ(parse_mac_mode("sparse-winograd"), MacMode::SparseWinograd);
    EXPECT_THROW(parse_mac_mode("fast"), ConfigError);
}

TEST(Evaluate, EnginesAgreeOnUnprunedModel) {
    const Network net = Network::initialize(paper_net(), 13);
    std::mt19937_64 rng(14);
    std::uniform_real_distribution<double> px(0.0, 1.0);
    Tensor images({40, 1, 28, 28});
    for (double& v : images.values()) v = px(rng);
    std::vector<int> labels(40);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 10);
    const Evaluation a = evaluate(net, images, labels, direct_kernel(net), 16);
    const Evaluation b = evaluate(net, images, labels, sparse_spatial_kernel(net), 16);
    const WinogradDeployment dep = prune_winograd(net, 0, default_basis_plan(net.arch));
    const Evaluation c = evaluate(net, images, labels, sparse_winograd_kernel(net, dep), 16);
    EXPECT_EQ(a.predictions, b.predictions);
    EXPECT_EQ(a.predictions, c.predictions);
    EXPECT_NEAR(a.loss, c.loss, 1e-9);
    EXPECT_EQ(a.count, 40u);
    EXPECT_EQ(evaluate(net, images, labels, direct_kernel(net)).predictions, a.predictions);
}

TEST(Evaluate, ZeroFinalLayerIsChance) {
    Network net = Network::initialize(paper_net(), 15);
    net.params.weights.back().fill(0.0);
    std::mt19937_64 rng(16);
    std::uniform_real_distribution<double> px(0.0, 1.0);
    Tensor images({200, 1, 28, 28});
    for (double& v : images.values()) v = px(rng);
    std::vector<int> labels(200);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 10);
    const Evaluation e = evaluate(net, images, labels, direct_kernel(net));
    EXPECT_NEAR(e.accuracy(), 0.1, 1e-12);  // constant prediction, balanced labels
    EXPECT_NEAR(e.loss, std::log(10.0), 1e-12);
}
