#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "cardiolens/data.hpp"
#include "cardiolens/image_io.hpp"
#include "support.hpp"

using namespace cardiolens;
using namespace cardiolens::data;
using testsupport::Rng;

namespace {

void write_text(const std::filesystem::path& p, const std::string& s) { std::ofstream(p) << s; }

void touch_images(const std::filesystem::path& dir, const std::vector<std::string>& ids) {
  for (const auto& id : ids) io::write_image(dir / id, GrayImage(4, 4));
}

Dataset balanced_dataset(std::size_t per_class) {
  Dataset ds;
  for (std::size_t i = 0; i < 2 * per_class; ++i)
    ds.samples.push_back({"img" + std::to_string(i) + ".png", i % 2 ? Label::kNotPresent : Label::kPresent, {}});
  return ds;
}

std::set<std::string> ids_of(const Dataset& ds) {
  std::set<std::string> out;
  for (const auto& s : ds.samples) out.insert(s.id);
  return out;
}

std::size_t bright_pixels(const GrayImage& img) {
  std::size_t n = 0;
  for (double v : img.values()) n += v > kSynthBrightThreshold;
  return n;
}

}  // namespace

TEST(Manifest, TwoRows) {
  const auto dir = testsupport::temp_dir("manifest2");
  touch_images(dir, {"a.png", "b.png"});
  write_text(dir / "m.csv", "id,label\na.png,Yes\nb.png,No\n");
  const Dataset ds = load_manifest(dir / "m.csv", dir);
  EXPECT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.balance(), (ClassBalance{1, 1}));
  EXPECT_EQ(ds.samples[0].id, "a.png");
  EXPECT_EQ(ds.samples[1].label, Label::kNotPresent);
}

TEST(Manifest, DuplicateIdNamed) {
  const auto dir = testsupport::temp_dir("manifest_dup");
  touch_images(dir, {"a.png"});
  write_text(dir / "m.csv", "id,label\na.png,Yes\na.png,No\n");
  try {
    load_manifest(dir / "m.csv", dir);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("duplicate"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("a.png"), std::string::npos);
  }
}

TEST(Manifest, FiveThousandRowBalance) {
  const auto dir = testsupport::temp_dir("manifest5k");
  std::string csv = "id,label\n";
  for (int i = 0; i < 5000; ++i) csv += "x" + std::to_string(i) + ".png," + (i < 2500 ? "Yes" : "No") + "\n";
  write_text(dir / "m.csv", csv);
  const Dataset ds = load_manifest(dir / "m.csv", dir, false);
  EXPECT_EQ(ds.balance(), (ClassBalance{2500, 2500}));
}

TEST(Manifest, ErrorsReported) {
  const auto dir = testsupport::temp_dir("manifest_err");
  touch_images(dir, {"a.png"});
  write_text(dir / "bad_label.csv", "id,label\na.png,Maybe\n");
  EXPECT_THROW(load_manifest(dir / "bad_label.csv", dir), DataError);
  write_text(dir / "missing.csv", "id,label\nb.png,Yes\n");
  EXPECT_THROW(load_manifest(dir / "missing.csv", dir), DataError);
  write_text(dir / "empty.csv", "id,label\n");
  EXPECT_THROW(load_manifest(dir / "empty.csv", dir), DataError);
  EXPECT_THROW(load_manifest(dir / "nope.csv", dir), DataError);
}

TEST(Split, StratifiedSizes) {
  const Split s = split(balanced_dataset(50), {0.8, 0.1, 0.1}, 42);
  EXPECT_EQ(s.train.balance(), (ClassBalance{40, 40}));
  EXPECT_EQ(s.val.balance(), (ClassBalance{5, 5}));
  EXPECT_EQ(s.test.balance(), (ClassBalance{5, 5}));
}

TEST(Split, DeterministicGivenSeed) {
  const Dataset ds = balanced_dataset(50);
  const Split a = split(ds, {0.8, 0.1, 0.1}, 7), b = split(ds, {0.8, 0.1, 0.1}, 7);
  EXPECT_EQ(ids_of(a.train), ids_of(b.train));
  EXPECT_EQ(ids_of(a.val), ids_of(b.val));
  EXPECT_NE(ids_of(a.val), ids_of(split(ds, {0.8, 0.1, 0.1}, 8).val));
}

TEST(Split, PartitionProperty) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    Dataset ds;
    const std::size_t n = testsupport::pick(rng, 10, 80);
    for (std::size_t i = 0; i < n; ++i)
      ds.samples.push_back({"s" + std::to_string(i), i < 3 || testsupport::pick(rng, 0, 1) ? Label::kPresent
                                                                                            : Label::kNotPresent, {}});
    for (std::size_t i = 0; i < 3; ++i) ds.samples.push_back({"n" + std::to_string(i), Label::kNotPresent, {}});
    const Split s = split(ds, {0.6, 0.2, 0.2}, seed);
    std::multiset<std::string> all;
    for (const Dataset* part : {&s.train, &s.val, &s.test})
      for (const auto& smp : part->samples) all.insert(smp.id);
    EXPECT_EQ(all.size(), ds.size());
    EXPECT_EQ(std::set<std::string>(all.begin(), all.end()), ids_of(ds));
  }
}

TEST(Split, InvalidFractionsRejected) {
  const Dataset ds = balanced_dataset(10);
  EXPECT_THROW(split(ds, {0.8, 0.1, 0.2}, 0), std::invalid_argument);
  EXPECT_THROW(split(ds, {1.0, 0.0, 0.0}, 0), std::invalid_argument);
  EXPECT_THROW(split(balanced_dataset(1), {0.8, 0.1, 0.1}, 0), std::invalid_argument);
}

TEST(Split, ManifestRoundTrip) {
  const auto dir = testsupport::temp_dir("split_rt");
  const Split s = split(balanced_dataset(20), {0.8, 0.1, 0.1}, 3);
  write_manifest(dir / "train.csv", s.train);
  const Dataset back = load_manifest(dir / "train.csv", dir, false);
  ASSERT_EQ(back.size(), s.train.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back.samples[i].id, s.train.samples[i].id);
    EXPECT_EQ(back.samples[i].label, s.train.samples[i].label);
  }
}

TEST(Augment, IdentitySpec) {
  Rng rng(1);
  const GrayImage img = testsupport::random_gray(rng, 12, 9);
  const AugmentSpec spec{0, 0, false, 1, 1, 0, 5};
  EXPECT_EQ(augment(img, spec, 0), img);
  EXPECT_EQ(augment(img, spec, 17), img);
}

TEST(Augment, FlipIsInvolution) {
  Rng rng(2);
  const GrayImage img = testsupport::random_gray(rng, 7, 5);
  EXPECT_EQ(flip_horizontal(flip_horizontal(img)), img);
  EXPECT_EQ(flip_horizontal(img).at(0, 2), img.at(6, 2));
}

TEST(Augment, DeterministicPerDraw) {
  Rng rng(3);
  const GrayImage img = testsupport::random_gray(rng, 16, 16);
  const AugmentSpec spec = AugmentSpec::training_default(9);
  EXPECT_EQ(augment(img, spec, 4), augment(img, spec, 4));
  EXPECT_NE(augment(img, spec, 4), augment(img, spec, 5));
}

TEST(Augment, DimensionsAndRangePreserved) {
  Rng rng(4);
  const AugmentSpec spec{-30, 30, true, 0.7, 1.3, 25, 1};
  for (std::uint64_t k = 0; k < 30; ++k) {
    const GrayImage img = testsupport::random_gray(rng, testsupport::pick(rng, 4, 20), testsupport::pick(rng, 4, 20));
    const GrayImage out = augment(img, spec, k);
    EXPECT_EQ(out.width(), img.width());
    EXPECT_EQ(out.height(), img.height());
    for (double v : out.values()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, img.max_level());
    }
  }
}

TEST(Augment, IllOrderedRangesRejected) {
  EXPECT_THROW((AugmentSpec{5, -5, false, 1, 1, 0, 0}.validate()), std::invalid_argument);
  EXPECT_THROW((AugmentSpec{0, 0, false, 1.2, 0.9, 0, 0}.validate()), std::invalid_argument);
  EXPECT_THROW((AugmentSpec{0, 0, false, 1, 1, -1, 0}.validate()), std::invalid_argument);
}

TEST(Synth, BalanceAndDeterminism) {
  const Dataset a = synth_dataset(10, 32, 5);
  EXPECT_EQ(a.balance(), (ClassBalance{5, 5}));
  const Dataset b = synth_dataset(10, 32, 5);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(*a.samples[i].image, *b.samples[i].image);
  EXPECT_THROW(synth_dataset(9, 32, 5), std::invalid_argument);
}

TEST(Synth, CentralRegionBrighterWhenPresent) {
  const std::size_t size = 64;
  const Dataset ds = synth_dataset(100, size, 12);
  double sum[2] = {0, 0};
  for (const auto& s : ds.samples) {
    const GrayImage& img = *s.image;
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double dx = (x + 0.5 - size / 2.0) / (0.3 * size), dy = (y + 0.5 - size / 2.0) / (0.3 * size);
        if (dx * dx + dy * dy <= 1.0) {
          acc += img.at(x, y);
          ++count;
        }
      }
    sum[class_index(s.label)] += acc / static_cast<double>(count) / 50.0;
  }
  EXPECT_GT(sum[0] - sum[1], 40.0);
}

TEST(Synth, SeparableByBrightPixelCount) {
  for (std::uint64_t seed : {1u, 42u, 777u}) {
    const Dataset ds = synth_dataset(100, 64, seed);
    std::size_t min_present = SIZE_MAX, max_absent = 0;
    for (const auto& s : ds.samples) {
      const std::size_t n = bright_pixels(*s.image);
      if (s.label == Label::kPresent) min_present = std::min(min_present, n);
      else max_absent = std::max(max_absent, n);
    }
    EXPECT_LT(max_absent, min_present) << "seed " << seed;
  }
}
