#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "subnetscope/data.hpp"
#include "subnetscope/error.hpp"

using namespace subnetscope;

namespace {

ShapesConfig small_config() {
  ShapesConfig c;
  c.train_per_class = 12;
  c.val_per_class = 4;
  c.test_per_class = 4;
  return c;
}

void put_be32(std::ofstream& f, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

struct IdxFiles {
  std::filesystem::path images, labels;
  ~IdxFiles() {
    std::filesystem::remove(images);
    std::filesystem::remove(labels);
  }
};

IdxFiles write_idx(std::uint32_t image_magic, std::uint32_t n_images, std::uint32_t n_labels, bool truncate = false) {
  const auto dir = std::filesystem::temp_directory_path();
  IdxFiles files{dir / "subnetscope_test_images.idx", dir / "subnetscope_test_labels.idx"};
  {
    std::ofstream f(files.images, std::ios::binary);
    put_be32(f, image_magic);
    put_be32(f, n_images);
    put_be32(f, 28);
    put_be32(f, 28);
    std::string px(static_cast<std::size_t>(n_images) * 28 * 28, '\0');
    px[0] = static_cast<char>(255);
    if (truncate) px.resize(px.size() - 10);
    f.write(px.data(), static_cast<std::streamsize>(px.size()));
  }
  {
    std::ofstream f(files.labels, std::ios::binary);
    put_be32(f, 0x00000801);
    put_be32(f, n_labels);
    for (std::uint32_t i = 0; i < n_labels; ++i) f.put(static_cast<char>(i % 10));
  }
  return files;
}

}  // namespace

TEST(Shapes, FamiliesPartitionClasses) {
  const auto& classes = shape_classes();
  ASSERT_EQ(classes.size(), 10u);
  std::map<Family, int> count;
  for (const auto& c : classes) ++count[c.family];
  EXPECT_EQ(count[Family::polygon], 4);
  EXPECT_EQ(count[Family::round], 2);
  EXPECT_EQ(count[Family::stroke], 4);
  // one generator per family
  for (const auto& a : classes)
    for (const auto& b : classes)
      if (a.family == b.family) EXPECT_EQ(a.generator, b.generator);
}

TEST(Shapes, SameSeedBitIdentical) {
  const DatasetSplits a = generate_shapes(small_config());
  const DatasetSplits b = generate_shapes(small_config());
  ASSERT_EQ(a.train.size(), b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    EXPECT_EQ(a.train[i].image.storage(), b.train[i].image.storage());
    EXPECT_EQ(a.train[i].mask, b.train[i].mask);
    EXPECT_EQ(a.train[i].label, b.train[i].label);
  }
}

TEST(Shapes, DifferentSeedDiffers) {
  ShapesConfig c = small_config();
  const DatasetSplits a = generate_shapes(c);
  c.seed = 2;
  const DatasetSplits b = generate_shapes(c);
  EXPECT_NE(a.train[0].image.storage(), b.train[0].image.storage());
}

TEST(Shapes, SplitCountsAndRange) {
  const DatasetSplits d = generate_shapes(small_config());
  EXPECT_EQ(d.train.size(), 120u);
  EXPECT_EQ(d.val.size(), 40u);
  EXPECT_EQ(d.test.size(), 40u);
  EXPECT_EQ(d.families.size(), 10u);
  for (const auto* set : {&d.train, &d.val, &d.test})
    for (const auto& s : *set)
      for (double v : s.image.storage()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
      }
}

TEST(Shapes, SplitsDisjoint) {
  const DatasetSplits d = generate_shapes(small_config());
  std::set<std::vector<double>> seen;
  std::size_t total = 0;
  for (const auto* set : {&d.train, &d.val, &d.test})
    for (const auto& s : *set) {
      seen.insert(s.image.storage());
      ++total;
    }
  EXPECT_EQ(seen.size(), total);
}

TEST(Shapes, BboxTightAroundMask) {
  const DatasetSplits d = generate_shapes(small_config());
  const std::size_t s = d.height;
  for (const auto& img : d.train) {
    ASSERT_TRUE(img.has_mask());
    bool top = false, bottom = false, left = false, right = false;
    for (std::size_t r = 0; r < s; ++r)
      for (std::size_t c = 0; c < s; ++c) {
        if (!img.mask[r * s + c]) continue;
        const int ri = static_cast<int>(r), ci = static_cast<int>(c);
        EXPECT_TRUE(ri >= img.bbox.row0 && ri <= img.bbox.row1 && ci >= img.bbox.col0 && ci <= img.bbox.col1);
        top |= ri == img.bbox.row0;
        bottom |= ri == img.bbox.row1;
        left |= ci == img.bbox.col0;
        right |= ci == img.bbox.col1;
      }
    EXPECT_TRUE(top && bottom && left && right);
  }
}

TEST(Shapes, NoiselessCircleInteriorConstant) {
  ShapesConfig c = small_config();
  c.noise = 0.0;
  const LabeledImage img = render_shape(c, 4, 77);
  const std::size_t s = c.image_size;
  auto inside = [&](int r, int col) {
    return r >= 0 && col >= 0 && r < static_cast<int>(s) && col < static_cast<int>(s) && img.mask[r * s + col];
  };
  std::set<double> values;
  for (int r = 0; r < static_cast<int>(s); ++r)
    for (int col = 0; col < static_cast<int>(s); ++col) {
      bool deep = true;
      for (int dr = -2; dr <= 2; ++dr)
        for (int dc = -2; dc <= 2; ++dc) deep &= inside(r + dr, col + dc);
      if (deep) values.insert(img.image[static_cast<std::size_t>(r) * s + col]);
    }
  ASSERT_FALSE(values.empty());
  EXPECT_EQ(values.size(), 1u);
}

TEST(Shapes, ConfigErrors) {
  ShapesConfig c;
  c.image_size = 4;
  EXPECT_THROW(generate_shapes(c), ConfigError);
  c = ShapesConfig{};
  c.val_per_class = 0;
  EXPECT_THROW(generate_shapes(c), ConfigError);
  c = ShapesConfig{};
  c.noise = -1.0;
  EXPECT_THROW(generate_shapes(c), ConfigError);
}

TEST(MaskBbox, EmptyMaskRejected) {
  std::vector<std::uint8_t> m(16, 0);
  EXPECT_THROW(mask_bbox(m, 4, 4), DataError);
  m[5] = 1;
  m[10] = 1;
  EXPECT_EQ(mask_bbox(m, 4, 4), (BBox{1, 1, 2, 2}));
}

TEST(Balanced, HalfTargetAllPositivesIncluded) {
  const DatasetSplits d = generate_shapes(small_config());
  const auto epoch = balanced_epoch(d.train, 3, 5, 0);
  ASSERT_EQ(epoch.size(), 24u);
  std::set<std::size_t> pos, ids;
  for (const auto& s : epoch) {
    EXPECT_EQ(s.relevant, d.train[s.index].label == 3);
    if (s.relevant) pos.insert(s.index);
    ids.insert(s.index);
  }
  EXPECT_EQ(pos.size(), 12u);
  EXPECT_EQ(ids.size(), epoch.size());
}

TEST(Balanced, ExampleSizes) {
  // 500 targets and 4500 others give exactly 1000 samples
  LabeledSet set(5000);
  for (std::size_t i = 0; i < set.size(); ++i) set[i].label = i < 500 ? 0 : 1 + static_cast<int>(i % 9);
  const auto epoch = balanced_epoch(set, 0, 1, 0);
  EXPECT_EQ(epoch.size(), 1000u);
  EXPECT_EQ(std::count_if(epoch.begin(), epoch.end(), [](const BalancedSample& s) { return s.relevant; }), 500);
}

TEST(Balanced, EpochsResampleNegatives) {
  const DatasetSplits d = generate_shapes(small_config());
  auto negatives = [&](std::size_t epoch) {
    std::set<std::size_t> out;
    for (const auto& s : balanced_epoch(d.train, 0, 5, epoch))
      if (!s.relevant) out.insert(s.index);
    return out;
  };
  EXPECT_NE(negatives(0), negatives(1));
  EXPECT_EQ(negatives(2), negatives(2));
}

TEST(Balanced, TwoEqualClassesCoverWholeSet) {
  LabeledSet set(10);
  for (std::size_t i = 0; i < set.size(); ++i) set[i].label = static_cast<int>(i % 2);
  const auto epoch = balanced_epoch(set, 1, 3, 0);
  std::set<std::size_t> ids;
  for (const auto& s : epoch) ids.insert(s.index);
  EXPECT_EQ(ids.size(), 10u);
}

TEST(Balanced, Errors) {
  LabeledSet set(5);
  for (auto& s : set) s.label = 0;
  set[4].label = 1;
  EXPECT_THROW(balanced_epoch(set, 0, 1, 0), DataError);  // 4 targets, 1 other
  EXPECT_THROW(balanced_epoch(set, 2, 1, 0), DataError);  // absent class
}

TEST(Idx, LoadsAndScales) {
  const IdxFiles f = write_idx(0x00000803, 2, 2);
  const LabeledSet set = load_idx(f.images, f.labels);
  ASSERT_EQ(set.size(), 2u);
  EXPECT_EQ(set[0].image.shape(), (Shape{1, 28, 28}));
  EXPECT_DOUBLE_EQ(set[0].image[0], 1.0);
  EXPECT_DOUBLE_EQ(set[0].image[1], 0.0);
  EXPECT_EQ(set[1].label, 1);
  EXPECT_FALSE(set[0].has_mask());
}

TEST(Idx, Errors) {
  {
    const IdxFiles f = write_idx(0x00000802, 2, 2);
    EXPECT_THROW(load_idx(f.images, f.labels), BadMagicError);
  }
  {
    const IdxFiles f = write_idx(0x00000803, 2, 3);
    EXPECT_THROW(load_idx(f.images, f.labels), DataError);
  }
  {
    const IdxFiles f = write_idx(0x00000803, 2, 2, true);
    EXPECT_THROW(load_idx(f.images, f.labels), TruncatedError);
  }
}

TEST(DatasetFile, RoundTrip) {
  const DatasetSplits d = generate_shapes(small_config());
  const auto path = std::filesystem::temp_directory_path() / "subnetscope_test_data.ssds";
  save_dataset(path, d, "{\"seed\":1}");
  std::string cfg;
  const DatasetSplits e = load_dataset(path, &cfg);
  std::filesystem::remove(path);
  EXPECT_EQ(cfg, "{\"seed\":1}");
  ASSERT_EQ(e.test.size(), d.test.size());
  EXPECT_EQ(e.class_names, d.class_names);
  for (std::size_t i = 0; i < d.test.size(); ++i) {
    EXPECT_EQ(e.test[i].mask, d.test[i].mask);
    EXPECT_EQ(e.test[i].bbox, d.test[i].bbox);
    for (std::size_t j = 0; j < d.test[i].image.numel(); ++j)
      EXPECT_NEAR(e.test[i].image[j], d.test[i].image[j], 1e-7);
  }
}

TEST(MixSeed, DistinctChildren) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t a = 0; a < 100; ++a) seen.insert(mix_seed(1, a));
  EXPECT_EQ(seen.size(), 100u);
  EXPECT_NE(mix_seed(1, 2, 3), mix_seed(1, 3, 2));
}
