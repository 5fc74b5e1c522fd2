#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "ultravar/error.hpp"
#include "ultravar/synth.hpp"

using namespace uvar;
namespace fs = std::filesystem;

namespace {

// Mean over pixels within (inside) or beyond `radius_mult` activation radii.
double disk_mean(const SynthConfig& c, const Tensor& img, bool inside, double radius_mult = 1.0) {
  const double r = c.activation_radius * radius_mult;
  double s = 0.0;
  int n = 0;
  for (std::size_t y = 0; y < c.side; ++y)
    for (std::size_t x = 0; x < c.side; ++x) {
      const double dx = x + 0.5 - c.activation_x, dy = y + 0.5 - c.activation_y;
      const bool in = dx * dx + dy * dy <= r * r;
      if (in != inside) continue;
      s += img.data()[y * c.side + x];
      ++n;
    }
  return s / n;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out << bytes;
}

class TempDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("uvar_synth_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                        "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

}  // namespace

TEST(SynthConfig, Validation) {
  SynthConfig c;
  EXPECT_NO_THROW(c.validate());
  c.side = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = SynthConfig{};
  c.speckle_level = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = SynthConfig{};
  c.class_count = 3;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Render, ZeroAmplitudeMakesClassesIdentical) {
  SynthConfig c;
  c.activation_amplitude = 0.0;
  for (std::uint64_t s = 0; s < 5; ++s) {
    Rng a(s), b(s);
    ImageSample x = render_image(c, 0, a), y = render_image(c, 1, b);
    for (std::size_t i = 0; i < x.image.numel(); ++i) ASSERT_EQ(x.image.data()[i], y.image.data()[i]);
  }
}

TEST(Render, DeterministicAndSplitSeparated) {
  SynthConfig c;
  ImageSample a = render_indexed(c, Split::Train, 1, 4), b = render_indexed(c, Split::Train, 1, 4);
  ImageSample t = render_indexed(c, Split::Test, 1, 4);
  EXPECT_EQ(a.image.shape(), (Shape{1, 32, 32}));
  bool same_test = true;
  for (std::size_t i = 0; i < a.image.numel(); ++i) {
    EXPECT_EQ(a.image.data()[i], b.image.data()[i]);
    same_test = same_test && a.image.data()[i] == t.image.data()[i];
  }
  EXPECT_FALSE(same_test);
}

TEST(Render, PixelsInUnitRange) {
  SynthConfig c;
  for (std::size_t i = 0; i < 20; ++i) {
    const ImageSample s = render_indexed(c, Split::Train, i % 2, i);
    for (float v : s.image.data()) {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 1.0f);
    }
  }
}

TEST(Render, VesselMapWithinFloorAndOne) {
  SynthConfig c;
  Rng rng(3);
  Tensor v = vessel_map(c, rng);
  const auto [lo, hi] = std::minmax_element(v.data().begin(), v.data().end());
  EXPECT_GE(*lo, static_cast<float>(c.tissue_floor) - 1e-6f);
  EXPECT_LE(*hi, 1.0f);
  EXPECT_GT(*hi, *lo + 0.2f);
}

// Activation raises the disk and leaves the surround alone.
TEST(Render, ActivationIsLocalizedToDisk) {
  SynthConfig c;
  double in[2] = {0, 0}, out[2] = {0, 0};
  const int n = 200;
  for (std::size_t label = 0; label < 2; ++label)
    for (int i = 0; i < n; ++i) {
      ImageSample s = render_indexed(c, Split::Train, label, i);
      in[label] += disk_mean(c, s.image, true) / n;
      out[label] += disk_mean(c, s.image, false, 2.5) / n;
    }
  EXPECT_GT(in[1] - in[0], 0.15);
  EXPECT_LT(std::fabs(out[1] - out[0]), 0.02);
}

TEST(Dataset, CountsLabelsAndSplits) {
  SynthConfig c;
  Dataset d = make_dataset(c, {141, 75}, {39, 15});
  ASSERT_EQ(d.train.size(), 216u);
  ASSERT_EQ(d.test.size(), 54u);
  std::size_t ones = 0;
  for (const auto& s : d.train) {
    EXPECT_EQ(s.split, Split::Train);
    ones += s.label;
  }
  EXPECT_EQ(ones, 75u);
  ones = 0;
  for (const auto& s : d.test) {
    EXPECT_EQ(s.split, Split::Test);
    ones += s.label;
  }
  EXPECT_EQ(ones, 15u);
}

TEST(Dataset, TrainAndTestAreDisjoint) {
  SynthConfig c;
  Dataset d = make_dataset(c, {30, 30}, {10, 10});
  for (const auto& t : d.test)
    for (const auto& s : d.train)
      ASSERT_FALSE(std::equal(t.image.data().begin(), t.image.data().end(), s.image.data().begin()));
}

// A threshold on the disk mean fitted on train separates the test split.
TEST(Dataset, DiskThresholdSeparatesClasses) {
  SynthConfig c;
  Dataset d = make_dataset(c, {141, 75}, {39, 15});
  std::vector<std::pair<double, std::size_t>> tr;
  for (const auto& s : d.train) tr.emplace_back(disk_mean(c, s.image, true), s.label);
  double best = 0, thr = 0;
  for (const auto& t : tr) {
    int ok = 0;
    for (const auto& u : tr) ok += (u.first > t.first) == (u.second == 1);
    if (ok > best) {
      best = ok;
      thr = t.first;
    }
  }
  int ok = 0;
  for (const auto& s : d.test) ok += (disk_mean(c, s.image, true) > thr) == (s.label == 1);
  EXPECT_GE(best / tr.size(), 0.9);
  EXPECT_GE(ok / 54.0, 0.9);
}

TEST(Pgm, HeaderAndZeroImage) {
  Tensor z = Tensor::zeros({1, 32, 32});
  auto bytes = encode_pgm(z);
  const std::string header = "P5\n32 32\n255\n";
  ASSERT_EQ(bytes.size(), header.size() + 1024);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + header.size()), header);
  EXPECT_TRUE(std::all_of(bytes.begin() + header.size(), bytes.end(), [](std::uint8_t b) { return b == 0; }));
}

TEST(Pgm, RoundTripWithinHalfStep) {
  SynthConfig c;
  Tensor img = render_indexed(c, Split::Train, 1, 0).image;
  Tensor back = decode_pgm(encode_pgm(img));
  ASSERT_EQ(back.numel(), img.numel());
  for (std::size_t i = 0; i < img.numel(); ++i) EXPECT_LE(std::fabs(back.data()[i] - img.data()[i]), 1.0 / 510 + 1e-7);
  Tensor again = decode_pgm(encode_pgm(back));
  for (std::size_t i = 0; i < img.numel(); ++i) EXPECT_EQ(again.data()[i], back.data()[i]);
}

TEST(Pgm, MalformedInputsRejected) {
  auto good = encode_pgm(Tensor::zeros({1, 4, 4}));
  auto plain = good;
  plain[1] = '2';
  EXPECT_THROW(decode_pgm(plain), ParseError);
  std::string deep = "P5\n4 4\n65535\n" + std::string(32, '\0');
  EXPECT_THROW(decode_pgm(std::vector<std::uint8_t>(deep.begin(), deep.end())), ParseError);
  auto truncated = good;
  truncated.pop_back();
  EXPECT_THROW(decode_pgm(truncated), ParseError);
  EXPECT_THROW(decode_pgm({}), ParseError);
}

TEST_F(TempDir, PgmFileRoundTrip) {
  SynthConfig c;
  Tensor img = render_indexed(c, Split::Test, 0, 2).image;
  write_pgm(img, dir_ / "a.pgm");
  EXPECT_EQ(slurp(dir_ / "a.pgm").substr(0, 13), "P5\n32 32\n255\n");
  Tensor back = read_pgm(dir_ / "a.pgm");
  EXPECT_EQ(back.shape(), (Shape{1, 32, 32}));
  EXPECT_THROW(read_pgm(dir_ / "missing.pgm"), IoError);
}

TEST_F(TempDir, ManifestFormatAndRoundTrip) {
  std::vector<ManifestEntry> entries{{"train/class0_0000.pgm", 0, Split::Train}, {"test/class1_0003.pgm", 1, Split::Test}};
  write_manifest(entries, dir_ / "manifest.tsv");
  EXPECT_EQ(slurp(dir_ / "manifest.tsv"), "train/class0_0000.pgm\t0\ttrain\ntest/class1_0003.pgm\t1\ttest\n");
  auto back = read_manifest(dir_ / "manifest.tsv");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].path, "test/class1_0003.pgm");
  EXPECT_EQ(back[1].label, 1u);
  EXPECT_EQ(back[1].split, Split::Test);
}

TEST_F(TempDir, ManifestRejectsBadRows) {
  spit(dir_ / "m1.tsv", "a.pgm\tx\ttrain\n");
  EXPECT_THROW(read_manifest(dir_ / "m1.tsv"), ParseError);
  spit(dir_ / "m2.tsv", "a.pgm\t0\tvalidation\n");
  EXPECT_THROW(read_manifest(dir_ / "m2.tsv"), ParseError);
  spit(dir_ / "m3.tsv", "a.pgm\t0\n");
  EXPECT_THROW(read_manifest(dir_ / "m3.tsv"), ParseError);
  EXPECT_THROW(read_manifest(dir_ / "none.tsv"), IoError);
}

TEST(Split, Names) {
  EXPECT_STREQ(split_name(Split::Train), "train");
  EXPECT_EQ(parse_split("test"), Split::Test);
  EXPECT_THROW(parse_split("val"), ParseError);
}
