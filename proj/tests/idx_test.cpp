#include <jointsparse/idx.hpp>

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace jointsparse;
namespace fs = std::filesystem;

namespace {

class IdxFiles : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() / ("idx_test_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                            "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    fs::path path(const std::string& name) const { return dir_ / name; }

    static void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
        std::ofstream out(p, std::ios::binary);
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    }

    fs::path dir_;
};

}  // namespace

TEST_F(IdxFiles, EmptyPair) {
    write_idx(path("img"), path("lab"), Tensor({0, 1, 28, 28}), {});
    const IdxDataset ds = ingest_idx(path("img"), path("lab"));
    EXPECT_EQ(ds.size(), 0u);
    EXPECT_EQ(ds.images.shape(), (Shape{0, 1, 28, 28}));
}

TEST_F(IdxFiles, RoundTripsPixelsAndLabels) {
    Tensor images({2, 1, 2, 3}, {0, 1, 0.5, 0.2, 0.8, 1, 1, 0, 0, 0, 0, 0.25});
    write_idx(path("img"), path("lab"), images, {3, 9});
    const IdxDataset ds = ingest_idx(path("img"), path("lab"), "test");
    EXPECT_EQ(ds.labels, (std::vector<int>{3, 9}));
    EXPECT_EQ(ds.split, "test");
    EXPECT_LE(max_abs_diff(ds.images, images), 0.5 / 255.0 + 1e-12);
}

TEST_F(IdxFiles, SwappedMagicRejected) {
    write_idx(path("img"), path("lab"), Tensor({1, 1, 2, 2}), {1});
    EXPECT_THROW(ingest_idx(path("lab"), path("lab")), BadMagicError);
    EXPECT_THROW(ingest_idx(path("img"), path("img")), BadMagicError);
}

TEST_F(IdxFiles, TruncatedImagesRejected) {
    write_bytes(path("img"), {0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 1, 2, 3});
    write_bytes(path("lab"), {0, 0, 8, 1, 0, 0, 0, 2, 1, 1});
    EXPECT_THROW(ingest_idx(path("img"), path("lab")), TruncatedError);
    write_bytes(path("short"), {0, 0, 8});
    EXPECT_THROW(ingest_idx(path("short"), path("lab")), TruncatedError);
}

TEST_F(IdxFiles, CountMismatchRejected) {
    write_idx(path("img"), path("lab"), Tensor({2, 1, 2, 2}), {1});
    EXPECT_THROW(ingest_idx(path("img"), path("lab")), CountMismatchError);
}

TEST_F(IdxFiles, MissingFileIsIoError) {
    EXPECT_THROW(ingest_idx(path("nope"), path("nope2")), IoError);
}

// Full MNIST-sized training file: 60000 images of 28x28.
TEST_F(IdxFiles, MnistSizedTrainingPair) {
    write_idx(path("img"), path("lab"), Tensor({60000, 1, 28, 28}), std::vector<int>(60000, 4));
    EXPECT_EQ(fs::file_size(path("img")), 60000u * 784u + 16u);
    EXPECT_EQ(fs::file_size(path("lab")), 60000u + 8u);
    const IdxDataset ds = ingest_idx(path("img"), path("lab"));
    EXPECT_EQ(ds.size(), 60000u);
    EXPECT_EQ(ds.height(), 28u);
    EXPECT_EQ(ds.width(), 28u);
}

TEST(BundledData, SubsetParses) {
    const fs::path dir = JOINTSPARSE_DATA_DIR;
    if (!fs::exists(dir / "train-images-idx3-ubyte")) GTEST_SKIP() << "no dataset in " << dir;
    const IdxDataset train = ingest_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");
    EXPECT_EQ(train.images.shape()[1], 1u);
    EXPECT_EQ(train.height(), 28u);
    EXPECT_EQ(fs::file_size(dir / "train-images-idx3-ubyte"), train.size() * 784 + 16);
    for (int label : train.labels) {
        EXPECT_GE(label, 0);
        EXPECT_LT(label, 10);
    }
}
