#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>

#include <unistd.h>

#include "convivit/data.hpp"
#include "convivit/errors.hpp"
#include "probes.hpp"

using namespace convivit;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("convivit_data_" + std::to_string(getpid()) + "_" + name);
  fs::remove_all(p);
  return p;
}

SynthTaskSpec small_spec() {
  SynthTaskSpec s;
  s.height = 32;
  s.width = 32;
  return s;
}

// Column of the intensity-weighted circular mean over pixels brighter than
// the background, for frame t. Circular so that wrap-around does not bias it.
double circular_column(const Clip& c, std::int64_t t) {
  const auto T = c.video.dim(1), H = c.video.dim(2), W = c.video.dim(3);
  auto v = c.video.data();
  double sx = 0, cx = 0;
  for (std::int64_t ch = 0; ch < 3; ++ch)
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t x = 0; x < W; ++x) {
        const double w = std::max(0.0, double(v[static_cast<std::size_t>(((ch * T + t) * H + y) * W + x)]) - 0.3);
        const double a = 2 * std::numbers::pi * double(x) / double(W);
        sx += w * std::sin(a);
        cx += w * std::cos(a);
      }
  return std::atan2(sx, cx) * double(W) / (2 * std::numbers::pi);
}

double wrapped_shift(double from, double to, double period) {
  double d = std::fmod(to - from, period);
  if (d > period / 2) d -= period;
  if (d < -period / 2) d += period;
  return d;
}

void write_raw(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out << bytes;
}

}  // namespace

TEST(Synth, SameSeedSameClip) {
  auto s = small_spec();
  auto a = generate_clip(s, 2, 77), b = generate_clip(s, 2, 77), c = generate_clip(s, 2, 78);
  ASSERT_EQ(a.video.shape(), (Shape{3, 8, 32, 32}));
  EXPECT_TRUE(std::equal(a.video.data().begin(), a.video.data().end(), b.video.data().begin()));
  EXPECT_FALSE(std::equal(a.video.data().begin(), a.video.data().end(), c.video.data().begin()));
  EXPECT_EQ(a.label, 2);
  EXPECT_EQ(a.seed, 77u);
}

TEST(Synth, ValuesInUnitInterval) {
  for (std::int64_t k = 0; k < 4; ++k) {
    auto c = generate_clip(small_spec(), k, 10 + k);
    for (float x : c.video.data()) {
      ASSERT_GE(x, 0.0f);
      ASSERT_LE(x, 1.0f);
    }
  }
}

TEST(Synth, RightwardBlobMovesRight) {
  // Without distractors and noise the only structure is the moving blob.
  auto s = small_spec();
  s.distractors = 0;
  s.noise_std = 0;
  EXPECT_STREQ(direction_name(3), "right");
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto c = generate_clip(s, 3, seed);
    const double shift = wrapped_shift(circular_column(c, 0), circular_column(c, s.frames - 1), double(s.width));
    EXPECT_NEAR(shift, s.speed * double(s.frames - 1), 0.5) << "seed " << seed;
  }
}

TEST(Synth, LeftwardBlobMovesLeft) {
  auto s = small_spec();
  s.distractors = 0;
  s.noise_std = 0;
  auto c = generate_clip(s, 2, 3);
  EXPECT_LT(wrapped_shift(circular_column(c, 0), circular_column(c, s.frames - 1), double(s.width)), -5.0);
}

TEST(Synth, DatasetIsBalanced) {
  auto s = small_spec();
  for (std::int64_t n : {8, 10, 13}) {
    auto d = generate_dataset(s, n, 5);
    ASSERT_EQ(static_cast<std::int64_t>(d.size()), n);
    std::vector<std::int64_t> count(4, 0);
    for (std::size_t i = 0; i < d.size(); ++i) {
      EXPECT_EQ(d[i].label, static_cast<std::int64_t>(i) % 4);
      ++count[static_cast<std::size_t>(d[i].label)];
    }
    for (auto c : count) {
      EXPECT_GE(c, n / 4);
      EXPECT_LE(c, (n + 3) / 4);
    }
  }
}

TEST(Synth, ClassOutOfRange) {
  EXPECT_THROW(generate_clip(small_spec(), 4, 0), Error);
  EXPECT_THROW(generate_clip(small_spec(), -1, 0), Error);
  EXPECT_THROW(direction_name(8), Error);
}

TEST(Synth, SpecValidation) {
  auto s = small_spec();
  s.num_classes = 9;
  EXPECT_THROW(s.validate(), ConfigError);
  s = small_spec();
  s.speed = 0.5;
  EXPECT_THROW(s.validate(), ConfigError);
  s = small_spec();
  s.noise_std = -1;
  EXPECT_THROW(s.validate(), ConfigError);
  s = small_spec();
  s.blob_radius = 0;
  EXPECT_THROW(s.validate(), ConfigError);
  EXPECT_NO_THROW(small_spec().validate());
}

TEST(Synth, FirstFrameAloneIsNotPredictive) {
  SynthTaskSpec s;
  auto train = generate_dataset(s, 200, 1);
  auto test = generate_dataset(s, 200, 2);
  auto r = probe::frame_probe(train, test, {0}, s.num_classes, 3);
  EXPECT_GT(r.train_accuracy, 0.9);  // the probe has enough capacity to fit
  EXPECT_LT(std::abs(r.test_accuracy - 0.25), 0.10) << "test accuracy " << r.test_accuracy;
}

TEST(ClipFile, RoundTripIsBitwise) {
  auto dir = scratch("clip");
  fs::create_directories(dir);
  auto c = generate_clip(small_spec(), 1, 9);
  save_clip(c, dir / "a.cvc");
  auto back = load_clip(dir / "a.cvc");
  ASSERT_EQ(back.video.shape(), c.video.shape());
  EXPECT_EQ(0, std::memcmp(back.video.ptr(), c.video.ptr(), sizeof(float) * c.video.numel()));
  fs::remove_all(dir);
}

TEST(ClipFile, Truncated) {
  auto dir = scratch("trunc");
  fs::create_directories(dir);
  save_clip(generate_clip(small_spec(), 0, 1), dir / "a.cvc");
  fs::resize_file(dir / "a.cvc", fs::file_size(dir / "a.cvc") - 3);
  try {
    load_clip(dir / "a.cvc");
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("missing"), std::string::npos) << e.what();
  }
  fs::resize_file(dir / "a.cvc", 7);
  EXPECT_THROW(load_clip(dir / "a.cvc"), IoError);
  fs::remove_all(dir);
}

TEST(ClipFile, WrongVersionNamesBoth) {
  auto dir = scratch("ver");
  fs::create_directories(dir);
  std::string bytes = "CVVTC";
  bytes += std::string("\x07\x00\x00\x00", 4);
  write_raw(dir / "a.cvc", bytes);
  try {
    load_clip(dir / "a.cvc");
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("version 7"), std::string::npos) << m;
    EXPECT_NE(m.find("expected 1"), std::string::npos) << m;
  }
  fs::remove_all(dir);
}

TEST(ClipFile, BadMagicAndTrailingBytes) {
  auto dir = scratch("magic");
  fs::create_directories(dir);
  write_raw(dir / "a.cvc", "NOTACLIPFILE");
  try {
    load_clip(dir / "a.cvc");
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("bad magic"), std::string::npos) << e.what();
  }
  save_clip(generate_clip(small_spec(), 0, 1), dir / "b.cvc");
  {
    std::ofstream out(dir / "b.cvc", std::ios::binary | std::ios::app);
    out << "xx";
  }
  EXPECT_THROW(load_clip(dir / "b.cvc"), IoError);
  EXPECT_THROW(load_clip(dir / "missing.cvc"), IoError);
  fs::remove_all(dir);
}

TEST(Frames, SingleRedFrame) {
  auto dir = scratch("red");
  fs::create_directories(dir);
  write_raw(dir / "f0.ppm", std::string("P6\n2 2\n255\n") + std::string("\xff\x00\x00\xff\x00\x00\xff\x00\x00\xff\x00\x00", 12));
  auto c = load_frames_dir(dir);
  ASSERT_EQ(c.video.shape(), (Shape{3, 1, 2, 2}));
  for (std::int64_t i = 0; i < 4; ++i) {
    EXPECT_EQ(c.video.data()[i], 1.0f);
    EXPECT_EQ(c.video.data()[4 + i], 0.0f);
    EXPECT_EQ(c.video.data()[8 + i], 0.0f);
  }
  fs::remove_all(dir);
}

TEST(Frames, SortedByNameAndStacked) {
  auto dir = scratch("stack");
  fs::create_directories(dir);
  Image dark{2, 1, 3, std::vector<std::uint8_t>(6, 0)};
  Image light{2, 1, 3, std::vector<std::uint8_t>(6, 255)};
  write_pnm(light, dir / "b.ppm");
  write_pnm(dark, dir / "a.ppm");
  auto c = load_frames_dir(dir);
  ASSERT_EQ(c.video.shape(), (Shape{3, 2, 1, 2}));
  EXPECT_EQ(c.video.at({0, 0, 0, 0}), 0.0f);
  EXPECT_EQ(c.video.at({0, 1, 0, 0}), 1.0f);
  fs::remove_all(dir);
}

TEST(Frames, InconsistentSizes) {
  auto dir = scratch("sizes");
  fs::create_directories(dir);
  write_pnm(Image{2, 2, 3, std::vector<std::uint8_t>(12, 9)}, dir / "a.ppm");
  write_pnm(Image{3, 2, 3, std::vector<std::uint8_t>(18, 9)}, dir / "b.ppm");
  EXPECT_THROW(load_frames_dir(dir), IoError);
  fs::remove_all(dir);
}

TEST(Frames, MalformedHeader) {
  auto dir = scratch("hdr");
  fs::create_directories(dir);
  write_raw(dir / "a.ppm", "P6\n2 x\n255\n");
  try {
    load_frames_dir(dir);
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("malformed PNM header"), std::string::npos) << e.what();
  }
  fs::remove_all(dir);
  fs::create_directories(dir);
  EXPECT_THROW(load_frames_dir(dir), IoError);  // empty
  fs::remove_all(dir);
}

TEST(Heatmap, Colormap) {
  EXPECT_EQ(heatmap_color(0.0f), (std::array<std::uint8_t, 3>{0, 0, 255}));
  EXPECT_EQ(heatmap_color(1.0f), (std::array<std::uint8_t, 3>{255, 0, 0}));
  EXPECT_EQ(heatmap_color(0.5f), (std::array<std::uint8_t, 3>{128, 0, 128}));
}

TEST(Heatmap, UniformHalfMap) {
  auto dir = scratch("half");
  fs::create_directories(dir);
  save_heatmap_ppm(std::vector<float>(6, 0.5f), 2, 3, dir / "h.ppm", 4);
  auto img = read_pnm(dir / "h.ppm");
  EXPECT_EQ(img.width, 12);
  EXPECT_EQ(img.height, 8);
  for (std::size_t i = 0; i < img.pixels.size(); i += 3) {
    ASSERT_EQ(img.pixels[i], 128);
    ASSERT_EQ(img.pixels[i + 1], 0);
    ASSERT_EQ(img.pixels[i + 2], 128);
  }
  fs::remove_all(dir);
}

TEST(Heatmap, RoundTrip) {
  auto dir = scratch("rt");
  fs::create_directories(dir);
  std::vector<float> m{0.0f, 0.1f, 0.33f, 0.5f, 0.77f, 1.0f};
  save_heatmap_ppm(m, 2, 3, dir / "h.ppm");
  std::int64_t rows = 0, cols = 0;
  auto back = load_heatmap_ppm(dir / "h.ppm", rows, cols);
  EXPECT_EQ(rows, 2);
  EXPECT_EQ(cols, 3);
  for (std::size_t i = 0; i < m.size(); ++i) EXPECT_NEAR(back[i], m[i], 1.0 / 255.0);
  EXPECT_THROW(save_heatmap_ppm(m, 2, 2, dir / "bad.ppm"), Error);
  fs::remove_all(dir);
}

TEST(FeatureMap, PgmIsMinMaxScaled) {
  auto dir = scratch("pgm");
  fs::create_directories(dir);
  save_feature_pgm({-2.0f, 0.0f, 2.0f, 1.0f}, 2, 2, dir / "f.pgm");
  auto img = read_pnm(dir / "f.pgm");
  EXPECT_EQ(img.channels, 1);
  EXPECT_EQ(img.pixels, (std::vector<std::uint8_t>{0, 128, 255, 191}));
  save_feature_pgm({3.0f, 3.0f}, 1, 2, dir / "c.pgm");
  EXPECT_EQ(read_pnm(dir / "c.pgm").pixels, (std::vector<std::uint8_t>{0, 0}));
  fs::remove_all(dir);
}

TEST(Manifest, RoundTripWithRelativePaths) {
  auto dir = scratch("man");
  fs::create_directories(dir / "clips");
  std::vector<ManifestEntry> entries{{"clips/a.cvc", 2}, {dir / "clips" / "b.cvc", 0}};
  write_manifest(entries, dir / "list.txt");
  auto back = read_manifest(dir / "list.txt");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].path, dir / "clips" / "a.cvc");
  EXPECT_EQ(back[0].label, 2);
  EXPECT_EQ(back[1].path, dir / "clips" / "b.cvc");
  EXPECT_EQ(back[1].label, 0);
  fs::remove_all(dir);
}

TEST(Manifest, BadLabel) {
  auto dir = scratch("badlabel");
  fs::create_directories(dir);
  write_raw(dir / "list.txt", "a.cvc\tone\n");
  try {
    read_manifest(dir / "list.txt");
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("bad label"), std::string::npos) << e.what();
  }
  write_raw(dir / "list.txt", "a.cvc -1\n");
  EXPECT_THROW(read_manifest(dir / "list.txt"), IoError);
  EXPECT_THROW(read_manifest(dir / "nope.txt"), IoError);
  fs::remove_all(dir);
}

TEST(Manifest, LoadsClipsAndFrameDirs) {
  auto dir = scratch("load");
  fs::create_directories(dir / "frames");
  auto c = generate_clip(small_spec(), 1, 4);
  save_clip(c, dir / "c.cvc");
  write_pnm(Image{2, 2, 3, std::vector<std::uint8_t>(12, 255)}, dir / "frames" / "0.ppm");
  write_manifest({{"c.cvc", 3}, {"frames", 1}}, dir / "m.txt");
  auto clips = load_manifest_clips(dir / "m.txt");
  ASSERT_EQ(clips.size(), 2u);
  EXPECT_EQ(clips[0].label, 3);  // label comes from the manifest
  EXPECT_EQ(clips[0].video.shape(), c.video.shape());
  EXPECT_EQ(clips[1].label, 1);
  EXPECT_EQ(clips[1].video.shape(), (Shape{3, 1, 2, 2}));
  fs::remove_all(dir);
}
