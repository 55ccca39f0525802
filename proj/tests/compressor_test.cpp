#include <jointsparse/compressor.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

using namespace jointsparse;

namespace {

Architecture small_net() {
    Architecture a;
    a.input_channels = 1;
    a.input_height = 8;
    a.input_width = 8;
    a.layers = {LayerSpec::conv(1, 2, 3), LayerSpec::relu(), LayerSpec::conv(2, 3, 3), LayerSpec::relu(),
                LayerSpec::max_pool(), LayerSpec::dense(12, 3)};
    return a;
}

struct Data {
    Tensor images;
    std::vector<int> labels;
};

Data synthetic(const Architecture& arch, std::size_t count, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> noise(0.0, 0.3);
    const std::size_t H = arch.input_height, W = arch.input_width;
    Data d;
    d.images = Tensor({count, 1, H, W});
    for (std::size_t i = 0; i < count; ++i) {
        const int label = static_cast<int>(i % 3);
        d.labels.push_back(label);
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                const bool lit = (label == 0 && y < H / 2) || (label == 1 && x < W / 2) || (label == 2 && y >= H / 2);
                d.images.at(i, 0, y, x) = noise(rng) + (lit ? 0.7 : 0.0);
            }
    }
    return d;
}

TrainerState trained_state(const Data& data, std::uint64_t seed, std::size_t iterations = 600, double s_sd = 70) {
    const SparsityConfig cfg = make_sparsity_config(small_net(), 70, s_sd);
    TrainerState state;
    state.net = Network::initialize(small_net(), seed);
    train_regularized(state, data.images, data.labels, cfg, {iterations, 8, seed});
    return state;
}

Network trained_net(const Data& data, std::uint64_t seed) { return trained_state(data, seed).net; }

}  // namespace

TEST(Dither, ReproducibleAndBounded) {
    const DitherStream a(123, 0.01), b(123, 0.01), c(124, 0.01);
    const auto ua = a.generate(10000), ub = b.generate(10000), uc = c.generate(10000);
    EXPECT_EQ(ua, ub);
    EXPECT_NE(ua, uc);
    double mean = 0.0;
    for (double u : ua) {
        EXPECT_GE(u, -0.005);
        EXPECT_LT(u, 0.005);
        mean += u;
    }
    EXPECT_NEAR(mean / 10000, 0.0, 1e-4);
    EXPECT_EQ(a.at(777), ua[777]);
}

TEST(Dither, SplitMixReferenceValue) {
    // First output of splitmix64 seeded with 0 (published test vector).
    EXPECT_EQ(DitherStream::splitmix64(0, 0), 0xE220A8397B1DCDAFull);
}

TEST(Quantize, RoundingExamples) {
    const std::vector<double> w{0.013, 0.004, -0.005, 0.005, -0.013};
    const QuantizedModel qm = quantize(w, 0.01, QuantMode::Uq, 0);
    EXPECT_EQ(qm.bins, (std::vector<std::int32_t>{1, 0, -1, 1, -1}));
    EXPECT_TRUE(qm.pruned(1));
    EXPECT_FALSE(qm.codebook.contains(0));
    const auto q = dequantize(qm);
    EXPECT_DOUBLE_EQ(q[0], 0.01);
    EXPECT_EQ(q[1], 0.0);
    EXPECT_DOUBLE_EQ(q[2], -0.01);
}

TEST(Quantize, RoundHalfAwayFromZero) {
    EXPECT_EQ(round_half_away(0.5), 1.0);
    EXPECT_EQ(round_half_away(-0.5), -1.0);
    EXPECT_EQ(round_half_away(1.49), 1.0);
    EXPECT_EQ(round_half_away(-2.5), -3.0);
    EXPECT_EQ(round_half_away(0.0), 0.0);
}

TEST(Quantize, InvalidDelta) {
    const std::vector<double> w{0.1};
    EXPECT_THROW(quantize(w, 0.0, QuantMode::Uq, 0), ConfigError);
    EXPECT_THROW(quantize(w, -1.0, QuantMode::Duq, 0), ConfigError);
}

TEST(Quantize, ErrorBoundAndPruneInvariant) {
    std::mt19937_64 rng(8);
    std::normal_distribution<double> dist(0.0, 0.05);
    for (QuantMode mode : {QuantMode::Uq, QuantMode::Duq}) {
        for (double delta : {0.001, 0.01, 0.05}) {
            std::vector<double> w(5000);
            for (double& v : w) v = dist(rng);
            const QuantizedModel qm = quantize(w, delta, mode, rng());
            const auto q = dequantize(qm);
            const auto mask = qm.pruned_mask();
            for (std::size_t i = 0; i < w.size(); ++i) {
                EXPECT_EQ(mask[i], qm.bins[i] == 0);
                if (mask[i])
                    EXPECT_EQ(q[i], 0.0);
                else
                    EXPECT_LE(std::abs(q[i] - w[i]), delta / 2 + 1e-15);
            }
        }
    }
}

TEST(Quantize, UqEqualsDuqWithZeroDither) {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> dist(0.0, 0.1);
    std::vector<double> w(2000);
    for (double& v : w) v = dist(rng);
    const QuantizedModel uq = quantize(w, 0.02, QuantMode::Uq, 0);
    const std::vector<double> zeros(w.size(), 0.0);
    const QuantizedModel duq_zero = quantize(w, 0.02, zeros);
    EXPECT_EQ(uq.bins, duq_zero.bins);
    EXPECT_EQ(uq.codebook, duq_zero.codebook);
    EXPECT_EQ(dequantize(uq), dequantize(duq_zero, zeros));
}

TEST(Quantize, DitherCancelledForUnprunedOnly) {
    const std::vector<double> w{0.3, 0.0001, -0.2};
    const QuantizedModel qm = quantize(w, 0.1, QuantMode::Duq, 99);
    const auto u = DitherStream(99, 0.1).generate(3);
    const auto q = dequantize(qm);
    for (std::size_t i = 0; i < 3; ++i) {
        if (qm.bins[i] == 0)
            EXPECT_EQ(q[i], 0.0);
        else
            EXPECT_DOUBLE_EQ(q[i], qm.bins[i] * 0.1 - u[i]);
    }
    EXPECT_EQ(dequantize(qm), q);  // bit-identical on repeat
}

TEST(Quantize, MissingCodebookEntry) {
    QuantizedModel qm = quantize(std::vector<double>{0.3}, 0.1, QuantMode::Uq, 0);
    qm.codebook.clear();
    EXPECT_THROW(dequantize(qm), FormatError);
}

TEST(Codebook, AveragedStepExample) {
    QuantizedModel qm = quantize(std::vector<double>{0.0, 0.1, 0.1}, 0.1, QuantMode::Uq, 0);
    const double before = qm.codebook.at(1);
    EXPECT_EQ(codebook_step(qm, std::vector<double>{5.0, 0.2, 0.4}, 0.1), 0u);
    EXPECT_NEAR(qm.codebook.at(1), before - 0.03, 1e-15);
    EXPECT_EQ(dequantize(qm)[0], 0.0);
}

TEST(Codebook, ZeroGradientKeepsCodebook) {
    QuantizedModel qm = quantize(std::vector<double>{0.31, -0.2, 0.05}, 0.1, QuantMode::Uq, 0);
    const auto before = qm.codebook;
    codebook_step(qm, std::vector<double>(3, 0.0), 0.5);
    EXPECT_EQ(qm.codebook, before);
}

TEST(Codebook, TrustRegionClamp) {
    QuantizedModel qm = quantize(std::vector<double>{0.3, -0.1}, 0.1, QuantMode::Uq, 0);
    EXPECT_EQ(codebook_step(qm, std::vector<double>{-100.0, 100.0}, 1.0), 2u);
    EXPECT_DOUBLE_EQ(qm.codebook.at(3), 0.4);
    EXPECT_DOUBLE_EQ(qm.codebook.at(-1), -0.2);
}

TEST(Finetune, PrunedStayZeroAndLossDoesNotIncrease) {
    const Data data = synthetic(small_net(), 120, 1);
    TrainerState trained = trained_state(data, 2, 3000, -1);
    const Network& net = trained.net;
    const SparsityConfig cfg = make_sparsity_config(small_net(), 70, -1);
    QuantizedModel qm = quantize_model(net, 0.02, QuantMode::Duq, 5);
    const auto mask = qm.pruned_mask();
    ASSERT_GT(qm.pruned_count(), 0u);

    TrainBatch all;
    std::vector<std::size_t> idx(data.labels.size());
    std::iota(idx.begin(), idx.end(), 0);
    all = make_batch(data.images, data.labels, idx);
    const double before = forward(reconstruct(small_net(), qm), all).loss;

    RegularizerState& reg = trained.reg;
    const double zeta_before = reg.zeta_wd;
    const FinetuneResult r =
        finetune_codebook(qm, small_net(), data.images, data.labels, cfg, reg, {300, 8, 3, 1e-3, false});
    ASSERT_FALSE(r.diverged) << r.message;
    EXPECT_EQ(reg.zeta_wd, zeta_before);
    EXPECT_EQ(qm.pruned_mask(), mask);
    const auto w = dequantize(qm);
    for (std::size_t i = 0; i < w.size(); ++i)
        if (mask[i]) {
            EXPECT_EQ(w[i], 0.0);
        }
    for (const auto& [n, c] : qm.codebook) EXPECT_LE(std::abs(c - n * qm.delta), qm.delta + 1e-15);
    const double after = forward(reconstruct(small_net(), qm), all).loss;
    std::printf("fine-tune loss %.6f -> %.6f, clamped %zu\n", before, after, r.clamped);
    EXPECT_LE(after, before);
}

TEST(Container, RoundTripIsBitIdentical) {
    const Data data = synthetic(small_net(), 60, 2);
    const Network net = trained_net(data, 3);
    for (QuantMode mode : {QuantMode::Uq, QuantMode::Duq}) {
        QuantizedModel qm = quantize_model(net, 0.01, mode, 77);
        qm.codebook.begin()->second += 0.001;  // a fine-tuned value
        const auto bytes = compress(net.arch, qm);
        const CompressedModel cm = parse_container(bytes);
        EXPECT_EQ(cm.qm, qm);
        EXPECT_EQ(cm.arch.layers.size(), net.arch.layers.size());
        const Network a = decompress(bytes), b = decompress(bytes);
        EXPECT_EQ(a.params, b.params);
        EXPECT_EQ(a.params, reconstruct(net.arch, qm).params);
        EXPECT_EQ(a.params.biases, net.params.biases);
        EXPECT_EQ(serialize(encode_model(cm.arch, cm.qm)), bytes);
    }
}

TEST(Container, BinStreamOfTrainedModelRoundTrips) {
    const Data data = synthetic(small_net(), 60, 3);
    const Network net = trained_net(data, 4);
    const QuantizedModel qm = quantize_model(net, 0.005, QuantMode::Duq, 1);
    const CompressedModel cm = encode_model(net.arch, qm);
    const auto symbols = lzw_decode(cm.coded, cm.lzw);
    ASSERT_EQ(symbols.size(), qm.size());
    for (std::size_t i = 0; i < symbols.size(); ++i) EXPECT_EQ(cm.symbol_map[symbols[i]], qm.bins[i]);
}

TEST(Container, CorruptionIsDetected) {
    const Network net = Network::initialize(small_net(), 1);
    const auto bytes = compress(net.arch, quantize_model(net, 0.05, QuantMode::Duq, 3));

    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(parse_container(bad_magic), BadMagicError);

    auto flipped = bytes;
    flipped[bytes.size() / 2] ^= 0x10;
    EXPECT_THROW(parse_container(flipped), CrcError);

    const std::vector<std::uint8_t> truncated(bytes.begin(), bytes.begin() + 6);
    EXPECT_THROW(parse_container(truncated), FormatError);
    EXPECT_THROW(parse_container(std::vector<std::uint8_t>{}), BadMagicError);
}

TEST(Container, CountMismatchAgainstArchitecture) {
    const Network net = Network::initialize(small_net(), 1);
    QuantizedModel qm = quantize_model(net, 0.05, QuantMode::Uq, 0);
    qm.bins.pop_back();
    EXPECT_THROW(parse_container(compress(net.arch, qm)), CountMismatchError);
}

TEST(CompressionRatio, ExampleAndLargerDeltaCompressesBetter) {
    EXPECT_DOUBLE_EQ(compression_ratio(1000, 400), 10.0);
    const Data data = synthetic(small_net(), 60, 4);
    const Network net = trained_net(data, 5);
    double prev = 0.0;
    for (double delta : {0.005, 0.01, 0.02, 0.05, 0.1, 1e3}) {
        const auto bytes = compress(net.arch, quantize_model(net, delta, QuantMode::Uq, 0));
        const double ratio = compression_ratio(net.params.weight_count(), bytes.size());
        EXPECT_GE(ratio, prev) << "delta=" << delta;
        prev = ratio;
    }
}
