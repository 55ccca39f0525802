#include <jointsparse/lzw.hpp>

#include <gtest/gtest.h>

#include <random>

using namespace jointsparse;

namespace {

std::vector<std::uint32_t> round_trip(const std::vector<std::uint32_t>& symbols, const LzwParams& p) {
    return lzw_decode(lzw_encode(symbols, p), p);
}

}  // namespace

TEST(Lzw, EmptyStream) {
    const LzwParams p = lzw_params(5);
    const auto bytes = lzw_encode({}, p);
    EXPECT_EQ(bytes.size(), 2u);  // one 9-bit END code
    EXPECT_TRUE(lzw_decode(bytes, p).empty());
}

TEST(Lzw, SingleSymbol) {
    const LzwParams p = lzw_params(3);
    EXPECT_EQ(round_trip({2}, p), std::vector<std::uint32_t>{2});
}

TEST(Lzw, IdenticalSymbolsCompressWell) {
    const LzwParams p = lzw_params(7);
    const std::vector<std::uint32_t> symbols(10000, 3);
    const auto bytes = lzw_encode(symbols, p);
    EXPECT_LT(bytes.size(), 400u);
    EXPECT_EQ(lzw_decode(bytes, p), symbols);
}

TEST(Lzw, KwKwKPattern) {
    const LzwParams p = lzw_params(2);
    const std::vector<std::uint32_t> symbols{0, 0, 0, 0, 0, 0, 0, 1, 0, 1, 0, 1, 0, 1, 0};
    EXPECT_EQ(round_trip(symbols, p), symbols);
}

TEST(Lzw, RandomStreamsRoundTrip) {
    std::mt19937_64 rng(42);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::uint32_t K = 1 + static_cast<std::uint32_t>(rng() % 40);
        std::vector<std::uint32_t> symbols(rng() % 600);
        // Mix of skewed and uniform streams so both short and long matches occur.
        std::geometric_distribution<std::uint32_t> skew(0.6);
        for (auto& s : symbols) s = (trial % 2 ? skew(rng) : static_cast<std::uint32_t>(rng())) % K;
        ASSERT_EQ(round_trip(symbols, lzw_params(K)), symbols) << "trial " << trial;
    }
}

TEST(Lzw, DictionaryResetAndWidthGrowth) {
    std::mt19937_64 rng(1);
    const LzwParams p = lzw_params(300);
    EXPECT_EQ(p.initial_width, 9);
    std::vector<std::uint32_t> symbols(400000);
    for (auto& s : symbols) s = static_cast<std::uint32_t>(rng() % 300);
    EXPECT_EQ(round_trip(symbols, p), symbols);

    LzwParams small = lzw_params(4);
    small.reset_entries = 40;
    std::vector<std::uint32_t> s2(5000);
    for (auto& s : s2) s = static_cast<std::uint32_t>(rng() % 4);
    EXPECT_EQ(round_trip(s2, small), s2);
}

TEST(Lzw, LargeAlphabetWidensInitialCode) {
    const LzwParams p = lzw_params(1000);
    EXPECT_EQ(p.initial_width, 10);
    std::vector<std::uint32_t> symbols;
    for (std::uint32_t i = 0; i < 3000; ++i) symbols.push_back((i * 37) % 1000);
    EXPECT_EQ(round_trip(symbols, p), symbols);
}

TEST(Lzw, RejectsSymbolsOutsideAlphabet) {
    EXPECT_THROW(lzw_encode(std::vector<std::uint32_t>{0, 5}, lzw_params(5)), ConfigError);
    EXPECT_THROW(lzw_params(70000), ConfigError);
}

TEST(Lzw, CorruptStreamsReportPosition) {
    const LzwParams p = lzw_params(4);
    const std::vector<std::uint32_t> symbols{0, 1, 2, 3, 0, 1, 2, 3, 0, 1};
    auto bytes = lzw_encode(symbols, p);

    // Truncated: END code missing.
    auto truncated = bytes;
    truncated.pop_back();
    truncated.pop_back();
    EXPECT_THROW(lzw_decode(truncated, p), DecodeError);

    // First code replaced by an unknown dictionary code (all ones).
    auto bad = bytes;
    bad[0] = 0xFF;
    bad[1] |= 0x01;
    try {
        lzw_decode(bad, p);
        FAIL() << "expected DecodeError";
    } catch (const DecodeError& e) {
        EXPECT_EQ(e.position(), 0u);
    }

    auto trailing = bytes;
    trailing.push_back(0);
    EXPECT_THROW(lzw_decode(trailing, p), DecodeError);
}

TEST(Lzw, RandomCorruptionNeverCrashes) {
    std::mt19937_64 rng(3);
    const LzwParams p = lzw_params(6);
    std::vector<std::uint32_t> symbols(500);
    for (auto& s : symbols) s = static_cast<std::uint32_t>(rng() % 6);
    const auto clean = lzw_encode(symbols, p);
    for (int trial = 0; trial < 300; ++trial) {
        auto bytes = clean;
        bytes[rng() % bytes.size()] ^= static_cast<std::uint8_t>(1u << (rng() % 8));
        try {
            const auto out = lzw_decode(bytes, p);
            for (auto s : out) EXPECT_LT(s, 6u);
        } catch (const DecodeError&) {
        }
    }
}
