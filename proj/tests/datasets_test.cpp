#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "spnas/datasets.hpp"
#include "spnas/error.hpp"
#include "spnas/train.hpp"
#include "test_util.hpp"

using namespace spnas;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("spnas_datasets_" + name)).string();
}

void write_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream f(path, std::ios::binary);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<unsigned char> be32(std::uint32_t v) {
  return {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 8),
          static_cast<unsigned char>(v)};
}

std::vector<unsigned char> cat(std::initializer_list<std::vector<unsigned char>> parts) {
  std::vector<unsigned char> out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Idx, HandcraftedSingleImage) {
  const auto img = temp_path("one_img"), lab = temp_path("one_lab");
  write_bytes(img, cat({be32(0x803), be32(1), be32(2), be32(3), {0, 255, 51, 102, 153, 204}}));
  write_bytes(lab, cat({be32(0x801), be32(1), {2}}));
  const Dataset d = load_idx(img, lab, 0);
  EXPECT_EQ(d.images.shape(), (Shape{1, 1, 2, 3}));
  EXPECT_EQ(d.images[1], 1.0);
  EXPECT_EQ(d.images[0], 0.0);
  EXPECT_EQ(d.images[2], 0.2);
  EXPECT_EQ(d.labels, std::vector<int>{2});
  EXPECT_EQ(d.classes, 3);
}

TEST(Idx, TruncatedPixelsReportExactOffset) {
  const auto img = temp_path("trunc_img"), lab = temp_path("trunc_lab");
  // Header promises 2x2x2 = 8 pixel bytes after the 16-byte header; only 5 present.
  write_bytes(img, cat({be32(0x803), be32(2), be32(2), be32(2), {1, 2, 3, 4, 5}}));
  write_bytes(lab, cat({be32(0x801), be32(2), {0, 1}}));
  const std::string msg = error_of([&] { load_idx(img, lab, 0); });
  EXPECT_NE(msg.find("expected 24 bytes"), std::string::npos) << msg;
  EXPECT_NE(msg.find("byte offset 21"), std::string::npos) << msg;
}

TEST(Idx, TruncatedHeaderAndBadMagic) {
  const auto img = temp_path("hdr_img"), lab = temp_path("hdr_lab");
  write_bytes(img, cat({be32(0x803), {0, 0}}));
  write_bytes(lab, cat({be32(0x801), be32(1), {0}}));
  std::string msg = error_of([&] { load_idx(img, lab, 0); });
  EXPECT_NE(msg.find("byte offset 6"), std::string::npos) << msg;

  write_bytes(img, cat({be32(0x802), be32(1), be32(1), be32(1), {0}}));
  EXPECT_THROW(load_idx(img, lab, 0), FormatError);
  msg = error_of([&] { load_idx(img, lab, 0); });
  EXPECT_NE(msg.find("byte offset 0"), std::string::npos) << msg;

  write_bytes(img, cat({be32(0x803), be32(2), be32(1), be32(1), {0, 9}}));
  EXPECT_THROW(load_idx(img, lab, 0), FormatError);  // 1 label for 2 images
}

TEST(Idx, RoundTripIsIdentity) {
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    std::mt19937_64 rng(seed);
    Dataset d;
    const int n = 7 + static_cast<int>(seed), h = 5, w = 4;
    d.images = Tensor({n, 1, h, w});
    for (std::size_t i = 0; i < d.images.numel(); ++i) d.images[i] = static_cast<double>(rng() % 256) / 255.0;
    for (int i = 0; i < n; ++i) d.labels.push_back(static_cast<int>(rng() % 10));
    const auto img = temp_path("rt_img"), lab = temp_path("rt_lab");
    write_idx(d, img, lab);
    const Dataset back = load_idx(img, lab, seed);
    EXPECT_TRUE(testutil::bitwise_equal(back.images, d.images));
    EXPECT_EQ(back.labels, d.labels);
  }
}

TEST(Synthetic, SameSeedIsBitwiseIdentical) {
  const Dataset a = synth_classification(4, 50, 12, 7), b = synth_classification(4, 50, 12, 7);
  EXPECT_TRUE(testutil::bitwise_equal(a.images, b.images));
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.valid, b.valid);
  const Dataset c = synth_classification(4, 50, 12, 8);
  EXPECT_FALSE(testutil::bitwise_equal(a.images, c.images));
}

TEST(Synthetic, OneImagePerClassWhenNEqualsClasses) {
  const Dataset d = synth_classification(5, 5, 8, 0);
  EXPECT_EQ(d.size(), 5);
  EXPECT_EQ(d.class_counts(), std::vector<int>(5, 1));
}

TEST(Synthetic, RejectsBadArguments) {
  EXPECT_THROW(synth_classification(1, 10, 8, 0), ConfigError);
  EXPECT_THROW(synth_classification(2, 10, 8, 0, -0.1), ConfigError);
}

// Splits are disjoint and exhaustive, with floor(0.2 n) validation samples;
// labels stay in range and pixels in [0, 1].
TEST(Synthetic, SplitAndRangeProperties) {
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    const int classes = 2 + static_cast<int>(seed % 5);
    const int n = 3 + static_cast<int>(seed * 17 % 90);
    const Dataset d = synth_classification(classes, n, 6 + static_cast<int>(seed % 3), seed);
    std::set<int> seen;
    for (int i : d.train) EXPECT_TRUE(seen.insert(i).second);
    for (int i : d.valid) EXPECT_TRUE(seen.insert(i).second);
    EXPECT_EQ(static_cast<int>(seen.size()), n);
    EXPECT_EQ(*seen.begin(), 0);
    EXPECT_EQ(*seen.rbegin(), n - 1);
    EXPECT_EQ(static_cast<int>(d.valid.size()), n / 5);
    for (int l : d.labels) {
      EXPECT_GE(l, 0);
      EXPECT_LT(l, classes);
    }
    for (double v : d.images.vec()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    const auto m = d.manifest();
    EXPECT_EQ(m["class_counts"].get<std::vector<int>>(), d.class_counts());
    EXPECT_EQ(m["split_seed"].get<std::uint64_t>(), seed);
  }
}

TEST(Synthetic, SplitDependsOnlyOnSeed) {
  Dataset a = synth_classification(3, 40, 8, 1);
  Dataset b = a;
  split_dataset(a, 99);
  split_dataset(b, 99);
  EXPECT_EQ(a.train, b.train);
  split_dataset(b, 100);
  EXPECT_NE(a.train, b.train);
}

// The generator's own acceptance: a small two-layer MBConv network learns the
// default 4-class task in 5 epochs.
TEST(Synthetic, TwoLayerNetworkReachesNinetyPercent) {
  const Dataset d = synth_classification(4, 1000, 28, 0);
  SearchSpaceConfig cfg = SearchSpaceConfig::desk_default();
  cfg.layers = {{8, 1}, {16, 2}};
  TrainConfig t;
  t.epochs = 5;
  const TrainResult r = train_fixed(cfg, Architecture(2, MBConvType::min_type()), d, t, 0);
  EXPECT_GE(r.accuracy, 0.9);
}
