#pragma once

// Variable-width LZW over an integer alphabet [0, K).
//
// Code values: 0..K-1 literals, K = CLEAR, K+1 = END, K+2.. dictionary
// entries. Codes are packed LSB-first. The j-th code after a reset can be at
// most K+1+j, so both sides size it as max(initial_width, bit_width(K+1+j)).
// When the dictionary reaches reset_entries codes the encoder emits CLEAR.

#include <jointsparse/errors.hpp>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace jointsparse {

struct LzwParams {
    std::uint32_t alphabet_size = 0;
    std::uint8_t initial_width = 9;
    std::uint8_t max_width = 16;
    std::uint32_t reset_entries = 1u << 16;

    std::uint32_t clear_code() const noexcept { return alphabet_size; }
    std::uint32_t end_code() const noexcept { return alphabet_size + 1; }
    std::uint32_t first_entry() const noexcept { return alphabet_size + 2; }

    unsigned width_for(std::uint32_t index_since_reset) const noexcept {
        const auto bound = static_cast<std::uint64_t>(alphabet_size) + 1 + index_since_reset;
        return std::max<unsigned>(initial_width, static_cast<unsigned>(std::bit_width(bound)));
    }

    void validate() const {
        if (max_width < initial_width || max_width > 31)
            throw ConfigError("lzw: invalid code widths " + std::to_string(initial_width) + ".." +
                              std::to_string(max_width));
        if (reset_entries > (std::uint64_t{1} << max_width) || reset_entries <= first_entry())
            throw ConfigError("lzw: alphabet of " + std::to_string(alphabet_size) +
                              " symbols does not fit the dictionary");
    }

    bool operator==(const LzwParams&) const = default;
};

/// Classic parameters for an alphabet of `alphabet_size` symbols.
inline LzwParams lzw_params(std::uint32_t alphabet_size) {
    LzwParams p;
    p.alphabet_size = alphabet_size;
    p.initial_width = static_cast<std::uint8_t>(std::max(9, static_cast<int>(std::bit_width(alphabet_size + 1u))));
    p.validate();
    return p;
}

namespace detail {

class BitWriter {
public:
    void put(std::uint32_t value, unsigned width) {
        acc_ |= static_cast<std::uint64_t>(value) << fill_;
        fill_ += width;
        while (fill_ >= 8) {
            bytes_.push_back(static_cast<std::uint8_t>(acc_));
            acc_ >>= 8;
            fill_ -= 8;
        }
    }

    std::vector<std::uint8_t> finish() {
        if (fill_ > 0) bytes_.push_back(static_cast<std::uint8_t>(acc_));
        acc_ = 0;
        fill_ = 0;
        return std::move(bytes_);
    }

private:
    std::vector<std::uint8_t> bytes_;
    std::uint64_t acc_ = 0;
    unsigned fill_ = 0;
};

class BitReader {
public:
    explicit BitReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::size_t position() const noexcept { return pos_; }
    std::size_t remaining() const noexcept { return bytes_.size() * 8 - pos_; }

    std::uint32_t get(unsigned width) {
        if (remaining() < width) throw DecodeError("lzw: stream ends inside a code", pos_);
        std::uint32_t value = 0;
        for (unsigned i = 0; i < width; ++i, ++pos_)
            value |= static_cast<std::uint32_t>((bytes_[pos_ / 8] >> (pos_ % 8)) & 1u) << i;
        return value;
    }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> lzw_encode(std::span<const std::uint32_t> symbols, const LzwParams& params) {
    params.validate();
    const std::uint32_t K = params.alphabet_size;
    detail::BitWriter out;
    std::unordered_map<std::uint64_t, std::uint32_t> dict;
    std::uint32_t next = params.first_entry();
    std::uint32_t index = 0;
    auto emit = [&](std::uint32_t code) { out.put(code, params.width_for(index++)); };
    auto reset = [&] {
        dict.clear();
        next = params.first_entry();
        index = 0;
    };

    bool have_prefix = false;
    std::uint32_t prefix = 0;
    for (std::uint32_t s : symbols) {
        if (s >= K)
            throw ConfigError("lzw: symbol " + std::to_string(s) + " outside alphabet of " + std::to_string(K));
        if (!have_prefix) {
            prefix = s;
            have_prefix = true;
            continue;
        }
        const std::uint64_t key = (static_cast<std::uint64_t>(prefix) << 32) | s;
        if (auto it = dict.find(key); it != dict.end()) {
            prefix = it->second;
            continue;
        }
        emit(prefix);
        dict.emplace(key, next++);
        if (next == params.reset_entries) {
            emit(params.clear_code());
            reset();
        }
        prefix = s;
    }
    if (have_prefix) emit(prefix);
    emit(params.end_code());
    return out.finish();
}

inline std::vector<std::uint32_t> lzw_decode(std::span<const std::uint8_t> bytes, const LzwParams& params) {
    params.validate();
    const std::uint32_t K = params.alphabet_size;
    struct Entry {
        std::uint32_t prefix;
        std::uint32_t last;
        std::uint32_t first;
        std::uint32_t length;
    };
    std::vector<Entry> dict;
    auto entry_of = [&](std::uint32_t code) -> Entry {
        return code < K ? Entry{0, code, code, 1} : dict[code - params.first_entry()];
    };
    auto append = [&](std::vector<std::uint32_t>& out, std::uint32_t code) {
        const Entry e = entry_of(code);
        const std::size_t start = out.size();
        out.resize(start + e.length);
        std::uint32_t c = code;
        for (std::size_t i = e.length; i-- > 0;) {
            const Entry cur = entry_of(c);
            out[start + i] = cur.last;
            c = cur.prefix;
        }
    };

    detail::BitReader in(bytes);
    std::vector<std::uint32_t> out;
    std::uint32_t index = 0;
    bool have_prev = false;
    std::uint32_t prev = 0;
    for (;;) {
        const std::size_t at = in.position();
        const std::uint32_t code = in.get(params.width_for(index++));
        if (code == params.end_code()) break;
        if (code == params.clear_code()) {
            dict.clear();
            index = 0;
            have_prev = false;
            continue;
        }
        const std::uint32_t next = params.first_entry() + static_cast<std::uint32_t>(dict.size());
        if (!have_prev) {
            if (code >= K) throw DecodeError("lzw: first code after reset is not a literal", at);
            append(out, code);
        } else {
            const Entry p = entry_of(prev);
            if (code < next) {
                append(out, code);
                if (next < params.reset_entries) dict.push_back({prev, entry_of(code).first, p.first, p.length + 1});
            } else if (code == next && next < params.reset_entries) {
                dict.push_back({prev, p.first, p.first, p.length + 1});
                append(out, code);
            } else {
                throw DecodeError("lzw: code " + std::to_string(code) + " not in dictionary", at);
            }
        }
        prev = code;
        have_prev = true;
    }
    if (in.remaining() >= 8) throw DecodeError("lzw: trailing bytes after end code", in.position());
    if (in.remaining() > 0 && in.get(static_cast<unsigned>(in.remaining())) != 0)
        throw DecodeError("lzw: nonzero padding after end code", in.position());
    return out;
}

}  // namespace jointsparse
