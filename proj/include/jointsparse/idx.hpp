#pragma once

// Reader for the big-endian IDX files used by MNIST and Fashion-MNIST.

#include <jointsparse/errors.hpp>
#include <jointsparse/tensor.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

namespace jointsparse {

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

struct IdxDataset {
    Tensor images;  // N x 1 x H x W, pixel values scaled to [0, 1]
    std::vector<int> labels;
    std::string split;

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t height() const { return images.extent(2); }
    std::size_t width() const { return images.extent(3); }
};

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t offset, const std::string& what) {
    if (offset + 4 > bytes.size()) throw TruncatedError(what + ": truncated header");
    return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
           (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

}  // namespace detail

inline IdxDataset ingest_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                             std::string split = "train") {
    const auto images = detail::read_file(images_path);
    const auto labels = detail::read_file(labels_path);

    const std::uint32_t image_magic = detail::read_be32(images, 0, images_path.string());
    if (image_magic != kIdxImagesMagic)
        throw BadMagicError(images_path.string() + ": bad image magic " + std::to_string(image_magic));
    const std::uint32_t label_magic = detail::read_be32(labels, 0, labels_path.string());
    if (label_magic != kIdxLabelsMagic)
        throw BadMagicError(labels_path.string() + ": bad label magic " + std::to_string(label_magic));

    const std::size_t count = detail::read_be32(images, 4, images_path.string());
    const std::size_t rows = detail::read_be32(images, 8, images_path.string());
    const std::size_t cols = detail::read_be32(images, 12, images_path.string());
    const std::size_t label_count = detail::read_be32(labels, 4, labels_path.string());

    if (images.size() < 16 + count * rows * cols)
        throw TruncatedError(images_path.string() + ": expected " + std::to_string(count * rows * cols) +
                             " pixel bytes");
    if (labels.size() < 8 + label_count) throw TruncatedError(labels_path.string() + ": truncated labels");
    if (count != label_count)
        throw CountMismatchError("image count " + std::to_string(count) + " != label count " +
                                 std::to_string(label_count));

    IdxDataset ds;
    ds.split = std::move(split);
    ds.images = Tensor({count, 1, rows, cols});
    auto px = ds.images.values();
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = images[16 + i] / 255.0;
    ds.labels.assign(labels.begin() + 8, labels.begin() + 8 + static_cast<std::ptrdiff_t>(count));
    return ds;
}

/// Writes an IDX image/label pair. Pixels are clamped to [0, 1] and scaled to bytes.
inline void write_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                      const Tensor& images, const std::vector<int>& labels) {
    auto be32 = [](std::ofstream& out, std::uint32_t v) {
        const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                           static_cast<char>(v)};
        out.write(b, 4);
    };
    const std::size_t count = images.extent(0), rows = images.extent(images.rank() - 2),
                      cols = images.extent(images.rank() - 1);
    std::ofstream img(images_path, std::ios::binary);
    std::ofstream lab(labels_path, std::ios::binary);
    if (!img || !lab) throw IoError("cannot write IDX files");
    be32(img, kIdxImagesMagic);
    be32(img, static_cast<std::uint32_t>(count));
    be32(img, static_cast<std::uint32_t>(rows));
    be32(img, static_cast<std::uint32_t>(cols));
    for (double v : images.values()) {
        const double clamped = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
        img.put(static_cast<char>(static_cast<std::uint8_t>(clamped * 255.0 + 0.5)));
    }
    be32(lab, kIdxLabelsMagic);
    be32(lab, static_cast<std::uint32_t>(labels.size()));
    for (int l : labels) lab.put(static_cast<char>(l));
}

}  // namespace jointsparse
