#pragma once

#include <png.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "quadrank/core.hpp"

namespace quadrank {

// Row-major single-channel raster.
template <class T>
class Raster {
 public:
  Raster() = default;
  Raster(int width, int height, T fill = T{})
      : width_(width), height_(height) {
    if (width < 1 || height < 1) throw Error("raster dimensions must be >= 1");
    data_.assign(static_cast<std::size_t>(width) * height, fill);
  }
  Raster(int width, int height, std::vector<T> data)
      : width_(width), height_(height), data_(std::move(data)) {
    if (width < 1 || height < 1) throw Error("raster dimensions must be >= 1");
    if (data_.size() != static_cast<std::size_t>(width) * height)
      throw Error("raster data size does not match dimensions");
  }

  int width() const { return width_; }
  int height() const { return height_; }
  bool empty() const { return data_.empty(); }

  T& operator()(int x, int y) { return data_[index(x, y)]; }
  const T& operator()(int x, int y) const { return data_[index(x, y)]; }

  T* row(int y) { return data_.data() + static_cast<std::size_t>(y) * width_; }
  const T* row(int y) const {
    return data_.data() + static_cast<std::size_t>(y) * width_;
  }

  std::span<T> pixels() { return data_; }
  std::span<const T> pixels() const { return data_; }

  bool operator==(const Raster&) const = default;

 private:
  std::size_t index(int x, int y) const {
    return static_cast<std::size_t>(y) * width_ + x;
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<T> data_;
};

using GrayImage = Raster<float>;
using ResponseMap = Raster<float>;

// ---------------------------------------------------------------------------
// File I/O

namespace detail {

inline float luma(float r, float g, float b) {
  return 0.299f * r + 0.587f * g + 0.114f * b;
}

inline GrayImage parse_pnm(const std::string& bytes) {
  std::size_t pos = 0;
  const auto malformed = [] { return Error("malformed image"); };
  const auto skip_space = [&] {
    while (pos < bytes.size()) {
      const char c = bytes[pos];
      if (c == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  const auto read_uint = [&]() -> long {
    skip_space();
    long v = 0;
    std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + (bytes[pos] - '0');
      if (v > (1L << 30)) throw malformed();
      ++pos;
    }
    if (pos == start) throw malformed();
    return v;
  };

  if (bytes.size() < 2 || bytes[0] != 'P') throw malformed();
  const char kind = bytes[1];
  if (kind != '5' && kind != '6') throw Error("unsupported image format");
  pos = 2;
  const long w = read_uint();
  const long h = read_uint();
  const long maxval = read_uint();
  if (w < 1 || h < 1 || maxval < 1) throw malformed();
  if (maxval > 65535) throw Error("unsupported bit depth");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    throw malformed();
  ++pos;

  const int channels = kind == '6' ? 3 : 1;
  const int bps = maxval > 255 ? 2 : 1;
  const std::size_t need = static_cast<std::size_t>(w) * h * channels * bps;
  if (bytes.size() - pos < need) throw malformed();

  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + pos);
  const float denom = static_cast<float>(maxval);
  const auto sample = [&](std::size_t i) -> float {
    unsigned v = bps == 2 ? (unsigned(p[2 * i]) << 8) | p[2 * i + 1] : p[i];
    return static_cast<float>(v) / denom;
  };

  GrayImage img(static_cast<int>(w), static_cast<int>(h));
  auto out = img.pixels();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (channels == 1) {
      out[i] = std::min(1.0f, sample(i));
    } else {
      out[i] = std::min(1.0f, luma(sample(3 * i), sample(3 * i + 1), sample(3 * i + 2)));
    }
  }
  return img;
}

inline GrayImage read_png(const std::filesystem::path& path) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.string().c_str())) {
    throw Error("malformed image: " + std::string(png.message));
  }
  const bool wide = (png.format & PNG_FORMAT_FLAG_LINEAR) != 0;
  const bool color = (png.format & PNG_FORMAT_FLAG_COLOR) != 0;
  if (wide) {
    png.format = color ? PNG_FORMAT_LINEAR_RGB : PNG_FORMAT_LINEAR_Y;
  } else {
    png.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  }
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr)) {
    std::string msg = png.message;
    png_image_free(&png);
    throw Error("malformed image: " + msg);
  }
  GrayImage img(static_cast<int>(png.width), static_cast<int>(png.height));
  auto out = img.pixels();
  const auto sample = [&](std::size_t i) -> float {
    if (!wide) return buf[i] / 255.0f;
    std::uint16_t v;
    std::memcpy(&v, buf.data() + 2 * i, 2);
    return v / 65535.0f;
  };
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = color ? std::min(1.0f, luma(sample(3 * i), sample(3 * i + 1), sample(3 * i + 2)))
                   : sample(i);
  }
  return img;
}

}  // namespace detail

// Loads binary PGM/PPM (8 or 16 bit) or PNG; color is reduced with BT.601 luma.
inline GrayImage load_image(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  static constexpr unsigned char kPngMagic[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (bytes.size() >= 8 && std::memcmp(bytes.data(), kPngMagic, 8) == 0) {
    return detail::read_png(path);
  }
  return detail::parse_pnm(bytes);
}

inline std::string encode_pgm(const GrayImage& img) {
  std::string out = "P5\n" + std::to_string(img.width()) + " " +
                    std::to_string(img.height()) + "\n255\n";
  const std::size_t header = out.size();
  out.resize(header + img.pixels().size());
  std::size_t i = header;
  for (float v : img.pixels()) {
    const float c = std::clamp(v, 0.0f, 1.0f);
    out[i++] = static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0f)));
  }
  return out;
}

// 8-bit P5; exact round trip for data that originated as 8-bit.
inline void save_pgm(const GrayImage& img, const std::filesystem::path& path) {
  write_file_atomic(path, encode_pgm(img));
}

// Min-max scales an arbitrary-valued map to [0, 255] and writes P5.
inline void save_heatmap(const ResponseMap& map, const std::filesystem::path& path) {
  const auto px = map.pixels();
  const auto [lo, hi] = std::minmax_element(px.begin(), px.end());
  const float range = *hi - *lo;
  GrayImage scaled(map.width(), map.height());
  auto out = scaled.pixels();
  for (std::size_t i = 0; i < px.size(); ++i) {
    out[i] = range > 0 ? (px[i] - *lo) / range : 0.0f;
  }
  save_pgm(scaled, path);
}

// ---------------------------------------------------------------------------
// Filtering and sampling

// Separable Gaussian, radius ceil(3 sigma), kernel renormalized to unit sum,
// clamp-to-edge borders.
inline GrayImage gaussian_blur(const GrayImage& img, double sigma) {
  if (sigma < 0) throw Error("gaussian_blur: sigma must be >= 0");
  if (sigma == 0) return img;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += kernel[i + radius];
  }
  for (double& k : kernel) k /= sum;

  const int w = img.width();
  const int h = img.height();
  GrayImage tmp(w, h);
  GrayImage out(w, h);
  parallel_for(static_cast<std::size_t>(h), [&](std::size_t yi) {
    const int y = static_cast<int>(yi);
    const float* src = img.row(y);
    float* dst = tmp.row(y);
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int k = -radius; k <= radius; ++k) {
        acc += kernel[k + radius] * src[std::clamp(x + k, 0, w - 1)];
      }
      dst[x] = static_cast<float>(acc);
    }
  });
  parallel_for(static_cast<std::size_t>(h), [&](std::size_t yi) {
    const int y = static_cast<int>(yi);
    float* dst = out.row(y);
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int k = -radius; k <= radius; ++k) {
        acc += kernel[k + radius] * tmp(x, std::clamp(y + k, 0, h - 1));
      }
      dst[x] = static_cast<float>(acc);
    }
  });
  return out;
}

// Keeps every second pixel in both directions.
inline GrayImage decimate(const GrayImage& img) {
  const int w = std::max(1, img.width() / 2);
  const int h = std::max(1, img.height() / 2);
  GrayImage out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out(x, y) = img(2 * x, 2 * y);
  return out;
}

// Bilinear interpolation with coordinates clamped to the pixel grid.
inline float sample_bilinear(const GrayImage& img, double x, double y) {
  x = std::clamp(x, 0.0, static_cast<double>(img.width() - 1));
  y = std::clamp(y, 0.0, static_cast<double>(img.height() - 1));
  const int x0 = static_cast<int>(x);
  const int y0 = static_cast<int>(y);
  const int x1 = std::min(x0 + 1, img.width() - 1);
  const int y1 = std::min(y0 + 1, img.height() - 1);
  const double fx = x - x0;
  const double fy = y - y0;
  const double top = (1 - fx) * img(x0, y0) + fx * img(x1, y0);
  const double bot = (1 - fx) * img(x0, y1) + fx * img(x1, y1);
  return static_cast<float>((1 - fy) * top + fy * bot);
}

// ---------------------------------------------------------------------------
// Scale pyramid

struct PyramidLevel {
  GrayImage image;
  double sigma = 0;  // blur in base-image pixels
};

// Each octave carries scales_per_octave nominal levels plus one extra level
// below and above (index -1 and scales_per_octave), so that every nominal
// level has a neighbor on both sides in scale.
struct PyramidOctave {
  int stride = 1;                     // base pixels per octave pixel
  std::vector<PyramidLevel> stack;    // scales_per_octave + 2 entries
};

struct ScalePyramid {
  GrayImage base;
  int octaves = 0;
  int scales_per_octave = 3;
  double sigma0 = 1.6;
  std::vector<PyramidOctave> octave_stacks;

  double level_sigma(int octave, int index) const {
    return sigma0 * std::exp2(octave + static_cast<double>(index) / scales_per_octave);
  }

  std::size_t level_count() const {
    return static_cast<std::size_t>(octaves) * scales_per_octave;
  }

  // Nominal level k = octave * scales_per_octave + index.
  const PyramidLevel& level(std::size_t k) const {
    const auto o = k / scales_per_octave;
    const auto j = k % scales_per_octave;
    return octave_stacks.at(o).stack.at(j + 1);
  }
};

inline constexpr int kPatchSize = 17;
inline constexpr int kPatchRadius = 8;

// Largest octave count keeping the smallest octave at least min_side pixels.
inline int auto_octaves(int width, int height, int min_side = 32, int cap = 4) {
  int o = 1;
  while (o < cap && (std::min(width, height) >> o) >= min_side) ++o;
  return o;
}

// Levels are blurred incrementally from their predecessor. Octave o > 0 starts
// from the decimated level of octave o-1 whose sigma equals its own first
// (extra) level.
inline ScalePyramid build_pyramid(const GrayImage& img, int octaves,
                                  int scales_per_octave = 3, double sigma0 = 1.6) {
  if (octaves < 1) throw Error("build_pyramid: octaves must be >= 1");
  if (scales_per_octave < 1) throw Error("build_pyramid: scales_per_octave must be >= 1");
  if (sigma0 <= 0) throw Error("build_pyramid: sigma0 must be > 0");
  const int min_side = std::min(img.width(), img.height()) >> (octaves - 1);
  if (min_side < kPatchSize) throw Error("image too small for requested octave count");

  ScalePyramid pyr;
  pyr.base = img;
  pyr.octaves = octaves;
  pyr.scales_per_octave = scales_per_octave;
  pyr.sigma0 = sigma0;
  const int S = scales_per_octave;

  for (int o = 0; o < octaves; ++o) {
    PyramidOctave oct;
    oct.stride = 1 << o;
    const double px = oct.stride;
    PyramidLevel first;
    first.sigma = pyr.level_sigma(o, -1);
    if (o == 0) {
      first.image = gaussian_blur(img, first.sigma);
    } else {
      // level S-1 of the previous octave has sigma0 * 2^(o - 1/S)
      first.image = decimate(pyr.octave_stacks[o - 1].stack[S].image);
    }
    oct.stack.push_back(std::move(first));
    for (int j = 0; j <= S; ++j) {
      const PyramidLevel& prev = oct.stack.back();
      PyramidLevel next;
      next.sigma = pyr.level_sigma(o, j);
      const double inc = std::sqrt(next.sigma * next.sigma - prev.sigma * prev.sigma) / px;
      next.image = gaussian_blur(prev.image, inc);
      oct.stack.push_back(std::move(next));
    }
    pyr.octave_stacks.push_back(std::move(oct));
  }
  return pyr;
}

// ---------------------------------------------------------------------------
// Patches

struct Patch17 {
  static constexpr int kSize = kPatchSize;
  static constexpr int kCells = kSize * kSize;

  std::array<float, kCells> values{};

  // u, v in [-8, 8]; u is the column offset, v the row offset.
  float& at(int u, int v) { return values[(v + kPatchRadius) * kSize + (u + kPatchRadius)]; }
  float at(int u, int v) const {
    return values[(v + kPatchRadius) * kSize + (u + kPatchRadius)];
  }

  bool operator==(const Patch17&) const = default;
};

inline constexpr double kDegenerateStddev = 1e-8;

// Standardizes to mean 0 and unit (population) standard deviation; a flat
// patch becomes all zeros.
inline Patch17 normalize_patch(const Patch17& raw) {
  double sum = 0;
  for (float v : raw.values) sum += v;
  const double mean = sum / Patch17::kCells;
  double ss = 0;
  for (float v : raw.values) ss += (v - mean) * (v - mean);
  const double stddev = std::sqrt(ss / Patch17::kCells);
  Patch17 out;
  if (stddev < kDegenerateStddev) return out;
  for (int i = 0; i < Patch17::kCells; ++i) {
    out.values[i] = static_cast<float>((raw.values[i] - mean) / stddev);
  }
  return out;
}

// Samples a 17x17 lattice centered at (x, y): cell (u, v) sits at
// (x, y) + scale * Rot(rotation) * (u, v), Rot = [cos -sin; sin cos] in pixel
// coordinates (clockwise on screen, since y points down).
inline Patch17 extract_raw_patch(const GrayImage& img, double x, double y,
                                 double scale, double rotation) {
  if (!(scale > 0)) throw Error("extract_patch: scale must be > 0");
  const double c = std::cos(rotation) * scale;
  const double s = std::sin(rotation) * scale;
  Patch17 p;
  for (int v = -kPatchRadius; v <= kPatchRadius; ++v) {
    for (int u = -kPatchRadius; u <= kPatchRadius; ++u) {
      p.at(u, v) = sample_bilinear(img, x + c * u - s * v, y + s * u + c * v);
    }
  }
  return p;
}

inline Patch17 extract_patch(const GrayImage& img, double x, double y,
                             double scale = 1.0, double rotation = 0.0) {
  return normalize_patch(extract_raw_patch(img, x, y, scale, rotation));
}

}  // namespace quadrank
