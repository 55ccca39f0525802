#pragma once

// Little-endian byte serialisation helpers shared by the container formats.

#include <jointsparse/errors.hpp>

#include <boost/crc.hpp>
#include <boost/endian/conversion.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

namespace jointsparse {

class ByteWriter {
public:
    template <class T>
        requires std::is_integral_v<T>
    void put(T value) {
        const T le = boost::endian::native_to_little(value);
        const auto* p = reinterpret_cast<const std::uint8_t*>(&le);
        bytes_.insert(bytes_.end(), p, p + sizeof(T));
    }

    void put_f64(double value) { put(std::bit_cast<std::uint64_t>(value)); }

    void put_bytes(std::span<const std::uint8_t> data) { bytes_.insert(bytes_.end(), data.begin(), data.end()); }

    void put_magic(const char (&magic)[5]) { bytes_.insert(bytes_.end(), magic, magic + 4); }

    /// Appends the CRC-32 of everything written so far.
    void put_crc() { put(crc32(bytes_)); }

    std::size_t size() const noexcept { return bytes_.size(); }
    const std::vector<std::uint8_t>& bytes() const noexcept { return bytes_; }
    std::vector<std::uint8_t> take() { return std::move(bytes_); }

    static std::uint32_t crc32(std::span<const std::uint8_t> data) {
        boost::crc_32_type crc;
        crc.process_bytes(data.data(), data.size());
        return crc.checksum();
    }

private:
    std::vector<std::uint8_t> bytes_;
};

class ByteReader {
public:
    ByteReader(std::span<const std::uint8_t> bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

    template <class T>
        requires std::is_integral_v<T>
    T get() {
        need(sizeof(T));
        T value;
        std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return boost::endian::little_to_native(value);
    }

    double get_f64() { return std::bit_cast<double>(get<std::uint64_t>()); }

    std::span<const std::uint8_t> get_bytes(std::size_t count) {
        need(count);
        auto out = bytes_.subspan(pos_, count);
        pos_ += count;
        return out;
    }

    /// Checks the magic and the trailing CRC-32, leaving the cursor after the magic.
    void expect_envelope(const char (&magic)[5]) {
        if (bytes_.size() < 4 || std::memcmp(bytes_.data(), magic, 4) != 0)
            throw BadMagicError(what_ + ": bad magic, expected " + std::string(magic, 4));
        if (bytes_.size() < 8) throw TruncatedError(what_ + ": too short for a checksum");
        const auto body = bytes_.first(bytes_.size() - 4);
        std::uint32_t stored;
        std::memcpy(&stored, bytes_.data() + body.size(), 4);
        stored = boost::endian::little_to_native(stored);
        if (ByteWriter::crc32(body) != stored) throw CrcError(what_ + ": CRC-32 mismatch");
        bytes_ = body;
        pos_ = 4;
    }

    void expect_end() const {
        if (pos_ != bytes_.size())
            throw FormatError(what_ + ": " + std::to_string(bytes_.size() - pos_) + " unexpected trailing bytes");
    }

    std::size_t position() const noexcept { return pos_; }
    const std::string& what() const noexcept { return what_; }

private:
    void need(std::size_t count) const {
        if (pos_ + count > bytes_.size())
            throw TruncatedError(what_ + ": truncated at byte " + std::to_string(pos_));
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
    std::string what_;
};

inline std::vector<std::uint8_t> read_binary_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Writes through a temporary file in the same directory and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> data) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
        if (!out) throw IoError("write failed for " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
    write_file_atomic(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()),
                                                          text.size()));
}

}  // namespace jointsparse
