#include <gtest/gtest.h>
#include <png.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "quadrank/image.hpp"

using namespace quadrank;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "quadrank_image_test";
  fs::create_directories(dir);
  return dir / name;
}

GrayImage random_image(int w, int h, std::uint64_t seed) {
  Rng rng(seed);
  GrayImage img(w, h);
  for (float& v : img.pixels()) v = static_cast<float>(rng.canonical());
  return img;
}

void write_png(const fs::path& path, int w, int h, png_uint_32 format, const void* data) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  png.width = w;
  png.height = h;
  png.format = format;
  ASSERT_TRUE(png_image_write_to_file(&png, path.string().c_str(), 0, data, 0, nullptr));
}

}  // namespace

// ---------------------------------------------------------------------------
// Loading

TEST(LoadImage, EightBitPgm) {
  const auto path = scratch("tiny.pgm");
  write_file_atomic(path, std::string("P5\n2 2\n255\n") + std::string("\x00\xff\x80\x40", 4));
  const GrayImage img = load_image(path);
  ASSERT_EQ(img.width(), 2);
  ASSERT_EQ(img.height(), 2);
  EXPECT_FLOAT_EQ(img(0, 0), 0.0f);
  EXPECT_FLOAT_EQ(img(1, 0), 1.0f);
  EXPECT_FLOAT_EQ(img(0, 1), 128.0f / 255.0f);
  EXPECT_FLOAT_EQ(img(1, 1), 64.0f / 255.0f);
}

TEST(LoadImage, SixteenBitPgmWithComment) {
  const auto path = scratch("deep.pgm");
  write_file_atomic(path, std::string("P5\n# depth\n2 1\n65535\n") + std::string("\x01\x00\xff\xff", 4));
  const GrayImage img = load_image(path);
  EXPECT_FLOAT_EQ(img(0, 0), 256.0f / 65535.0f);
  EXPECT_FLOAT_EQ(img(1, 0), 1.0f);
}

TEST(LoadImage, ColorPpmUsesLuma) {
  const auto path = scratch("color.ppm");
  write_file_atomic(path, std::string("P6 1 1 255\n") + std::string("\xff\x00\x00", 3));
  EXPECT_NEAR(load_image(path)(0, 0), 0.299f, 1e-6);
}

TEST(LoadImage, WhitePng) {
  const auto path = scratch("white.png");
  std::vector<unsigned char> px(16, 255);
  write_png(path, 4, 4, PNG_FORMAT_GRAY, px.data());
  const GrayImage img = load_image(path);
  ASSERT_EQ(img.width(), 4);
  for (float v : img.pixels()) EXPECT_EQ(v, 1.0f);
}

TEST(LoadImage, ColorPngUsesLuma) {
  const auto path = scratch("rgb.png");
  const unsigned char px[6] = {0, 255, 0, 0, 0, 255};
  write_png(path, 2, 1, PNG_FORMAT_RGB, px);
  const GrayImage img = load_image(path);
  EXPECT_NEAR(img(0, 0), 0.587f, 1e-6);
  EXPECT_NEAR(img(1, 0), 0.114f, 1e-6);
}

TEST(LoadImage, SixteenBitPng) {
  const auto path = scratch("deep.png");
  const std::uint16_t px[3] = {0, 1000, 65535};
  write_png(path, 3, 1, PNG_FORMAT_LINEAR_Y, px);
  const GrayImage img = load_image(path);
  EXPECT_FLOAT_EQ(img(0, 0), 0.0f);
  EXPECT_NEAR(img(1, 0), 1000.0f / 65535.0f, 1e-6);
  EXPECT_FLOAT_EQ(img(2, 0), 1.0f);
}

TEST(LoadImage, TruncatedIsMalformed) {
  const auto path = scratch("cut.pgm");
  write_file_atomic(path, "P5\n4 4\n255\n\x01\x02");
  try {
    load_image(path);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("malformed image"), std::string::npos);
  }
}

TEST(LoadImage, BadHeaderAndDepth) {
  const auto hdr = scratch("hdr.pgm");
  write_file_atomic(hdr, "P5\nx 4\n255\n");
  EXPECT_THROW(load_image(hdr), Error);
  const auto deep = scratch("deeper.pgm");
  write_file_atomic(deep, "P5\n1 1\n70000\n\x00\x00\x00");
  try {
    load_image(deep);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("unsupported bit depth"), std::string::npos);
  }
  EXPECT_THROW(load_image(scratch("does_not_exist.pgm")), Error);
}

TEST(SavePgm, RoundTripOnByteGrid) {
  GrayImage img(5, 3);
  for (int i = 0; i < 15; ++i) img.pixels()[i] = (i * 17) / 255.0f;
  const auto path = scratch("rt.pgm");
  save_pgm(img, path);
  EXPECT_EQ(load_image(path), img);
}

// ---------------------------------------------------------------------------
// Blur

TEST(GaussianBlur, ZeroSigmaIsIdentity) {
  const GrayImage img = random_image(20, 15, 1);
  EXPECT_EQ(gaussian_blur(img, 0.0), img);
  EXPECT_THROW(gaussian_blur(img, -1.0), Error);
}

TEST(GaussianBlur, ImpulseMatchesDirectKernel) {
  GrayImage img(41, 41, 0.0f);
  img(20, 20) = 1.0f;
  const double sigma = 1.0;
  const GrayImage out = gaussian_blur(img, sigma);
  // direct 2D evaluation of the renormalized truncated kernel (radius 3)
  double norm = 0;
  for (int dy = -3; dy <= 3; ++dy)
    for (int dx = -3; dx <= 3; ++dx) norm += std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
  EXPECT_NEAR(out(20, 20), 1.0 / norm, 1e-6);
  EXPECT_NEAR(out(22, 19), std::exp(-5.0 / 2.0) / norm, 1e-6);
  EXPECT_EQ(out(24, 20), 0.0f);
  double mass = 0;
  for (float v : out.pixels()) mass += v;
  EXPECT_NEAR(mass, 1.0, 1e-6);
}

TEST(GaussianBlur, ConstantPreserved) {
  const GrayImage img(30, 30, 0.5f);
  for (double s : {0.5, 1.6, 4.0}) {
    const GrayImage out = gaussian_blur(img, s);
    for (float v : out.pixels()) EXPECT_NEAR(v, 0.5f, 1e-6);
  }
}

// ---------------------------------------------------------------------------
// Pyramid

TEST(Pyramid, LevelsAndSizes) {
  const GrayImage img = random_image(256, 256, 2);
  const ScalePyramid pyr = build_pyramid(img, 3, 3, 1.6);
  ASSERT_EQ(pyr.level_count(), 9u);
  for (std::size_t k = 0; k < 9; ++k) {
    EXPECT_NEAR(pyr.level(k).sigma, 1.6 * std::pow(2.0, k / 3.0), 1e-12);
    const int side = 256 >> (k / 3);
    EXPECT_EQ(pyr.level(k).image.width(), side);
    EXPECT_EQ(pyr.level(k).image.height(), side);
  }
  for (std::size_t k = 0; k + 1 < 9; ++k) {
    EXPECT_NEAR(pyr.level(k + 1).sigma / pyr.level(k).sigma, std::pow(2.0, 1.0 / 3.0), 1e-12);
  }
  for (const auto& oct : pyr.octave_stacks) EXPECT_EQ(oct.stack.size(), 5u);
}

TEST(Pyramid, TooSmall) {
  const GrayImage img = random_image(17, 17, 3);
  try {
    build_pyramid(img, 2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("image too small"), std::string::npos);
  }
  EXPECT_NO_THROW(build_pyramid(img, 1));
  EXPECT_THROW(build_pyramid(img, 0), Error);
}

TEST(Pyramid, IncrementalMatchesDirectBlur) {
  // sampled kernels only compose like continuous Gaussians on band-limited input
  const GrayImage img = gaussian_blur(random_image(96, 96, 4), 2.0);
  const ScalePyramid pyr = build_pyramid(img, 1, 3, 1.6);
  for (int j = -1; j <= 3; ++j) {
    const auto& lvl = pyr.octave_stacks[0].stack[j + 1];
    const GrayImage direct = gaussian_blur(img, lvl.sigma);
    double worst = 0;
    for (int y = 16; y < 80; ++y)
      for (int x = 16; x < 80; ++x) worst = std::max(worst, double(std::abs(direct(x, y) - lvl.image(x, y))));
    EXPECT_LT(worst, 1e-3) << "level " << j;
  }
}

TEST(Pyramid, AutoOctaves) {
  EXPECT_EQ(auto_octaves(256, 256), 4);
  EXPECT_EQ(auto_octaves(64, 64), 2);
  EXPECT_EQ(auto_octaves(40, 300), 1);
  EXPECT_EQ(auto_octaves(4096, 4096), 4);
}

// ---------------------------------------------------------------------------
// Sampling

TEST(Bilinear, GridMidpointAndClamp) {
  GrayImage img(3, 2);
  img(0, 0) = 0.0f;
  img(1, 0) = 1.0f;
  img(2, 0) = 0.25f;
  img(0, 1) = 0.75f;
  EXPECT_EQ(sample_bilinear(img, 1, 0), 1.0f);
  EXPECT_EQ(sample_bilinear(img, 2, 0), 0.25f);
  EXPECT_FLOAT_EQ(sample_bilinear(img, 0.5, 0), 0.5f);
  EXPECT_EQ(sample_bilinear(img, -5, -5), img(0, 0));
  EXPECT_EQ(sample_bilinear(img, 50, 50), img(2, 1));
}

TEST(Bilinear, ReproducesAffineSurface) {
  GrayImage img(32, 32);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) img(x, y) = static_cast<float>(0.1 + 0.01 * x - 0.02 * y + 0.7);
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    const double x = rng.uniform(0, 31), y = rng.uniform(0, 31);
    EXPECT_NEAR(sample_bilinear(img, x, y), 0.1 + 0.01 * x - 0.02 * y + 0.7, 1e-6);
  }
}

// ---------------------------------------------------------------------------
// Patches

TEST(NormalizePatch, Degenerate) {
  Patch17 raw;
  raw.values.fill(0.37f);
  EXPECT_EQ(normalize_patch(raw), Patch17{});
}

TEST(NormalizePatch, Checkerboard) {
  Patch17 raw;
  for (int i = 0; i < Patch17::kCells; ++i) raw.values[i] = static_cast<float>(i % 2);
  const Patch17 p = normalize_patch(raw);
  // 145 zeros and 144 ones: mean 144/289, population sd sqrt(144*145)/289
  const double mean = 144.0 / 289.0, sd = std::sqrt(144.0 * 145.0) / 289.0;
  double sum = 0;
  for (int i = 0; i < Patch17::kCells; ++i) {
    EXPECT_NEAR(p.values[i], ((i % 2) - mean) / sd, 1e-6);
    sum += p.values[i];
  }
  EXPECT_NEAR(sum, 0.0, 1e-5);
}

TEST(NormalizePatch, RandomMoments) {
  Rng rng(6);
  Patch17 raw;
  for (float& v : raw.values) v = static_cast<float>(rng.uniform(-3, 5));
  const Patch17 p = normalize_patch(raw);
  double s = 0, ss = 0;
  for (float v : p.values) s += v;
  const double mean = s / Patch17::kCells;
  for (float v : p.values) ss += (v - mean) * (v - mean);
  EXPECT_NEAR(mean, 0.0, 1e-6);
  EXPECT_NEAR(std::sqrt(ss / Patch17::kCells), 1.0, 1e-5);
}

TEST(ExtractPatch, CenterIsPixel) {
  const GrayImage img = random_image(40, 40, 7);
  const Patch17 raw = extract_raw_patch(img, 20, 17, 1.0, 0.0);
  EXPECT_EQ(raw.at(0, 0), img(20, 17));
  EXPECT_EQ(raw.at(3, -2), img(23, 15));
}

TEST(ExtractPatch, HalfTurnIsPointReflection) {
  const GrayImage img = random_image(60, 60, 8);
  const Patch17 a = extract_raw_patch(img, 30.3, 29.6, 1.3, 0.0);
  const Patch17 b = extract_raw_patch(img, 30.3, 29.6, 1.3, kPi);
  for (int v = -8; v <= 8; ++v)
    for (int u = -8; u <= 8; ++u) EXPECT_NEAR(a.at(u, v), b.at(-u, -v), 1e-6);
}

TEST(ExtractPatch, QuarterTurnDirection) {
  // with y pointing down, cell (1, 0) at rotation pi/2 lies at (x, y + 1)
  const GrayImage img = random_image(40, 40, 9);
  const Patch17 p = extract_raw_patch(img, 20, 20, 1.0, kPi / 2);
  EXPECT_NEAR(p.at(1, 0), img(20, 21), 1e-6);
  EXPECT_NEAR(p.at(0, 1), img(19, 20), 1e-6);
}

TEST(ExtractPatch, ScaleDoublesSlope) {
  GrayImage img(100, 100);
  const double g = 0.004;
  for (int y = 0; y < 100; ++y)
    for (int x = 0; x < 100; ++x) img(x, y) = static_cast<float>(0.2 + g * x);
  const Patch17 raw = extract_raw_patch(img, 50, 50, 2.0, 0.0);
  for (int v = -8; v <= 8; ++v)
    for (int u = -8; u < 8; ++u) EXPECT_NEAR(raw.at(u + 1, v) - raw.at(u, v), 2 * g, 1e-4);
}

TEST(ExtractPatch, AffineIntensityInvariance) {
  const GrayImage img = random_image(64, 64, 10);
  GrayImage changed = img;
  for (float& v : changed.pixels()) v = 0.6f * v + 0.2f;
  Rng rng(11);
  for (int i = 0; i < 20; ++i) {
    const double x = rng.uniform(15, 48), y = rng.uniform(15, 48);
    const double s = rng.uniform(0.4, 1.5), r = rng.uniform(0, 2 * kPi);
    const Patch17 a = extract_patch(img, x, y, s, r);
    const Patch17 b = extract_patch(changed, x, y, s, r);
    for (int k = 0; k < Patch17::kCells; ++k) EXPECT_NEAR(a.values[k], b.values[k], 1e-4);
  }
}

TEST(ExtractPatch, RejectsNonPositiveScale) {
  const GrayImage img = random_image(20, 20, 12);
  EXPECT_THROW(extract_patch(img, 10, 10, 0.0, 0.0), Error);
}
