#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "quadrank/core.hpp"
#include "quadrank/evaluator.hpp"
#include "quadrank/geometry.hpp"
#include "quadrank/image.hpp"
#include "quadrank/quadgen.hpp"

namespace quadrank {

// Rounds to the 8-bit grid so images survive a PGM round trip unchanged.
inline GrayImage quantize8(GrayImage img) {
  for (float& v : img.pixels()) v = static_cast<float>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)) / 255.0f;
  return img;
}

// Two bands of filtered noise with a few filled rectangles and ellipses
// blended on top.
inline GrayImage synthetic_texture(int width, int height, Rng& rng) {
  GrayImage acc(width, height, 0.5f);
  constexpr double kBands[][2] = {{1.0, 0.15}, {3.0, 0.06}};  // blur, rms amplitude
  for (const auto& band : kBands) {
    GrayImage noise(width, height);
    for (float& v : noise.pixels()) v = static_cast<float>(rng.normal());
    noise = gaussian_blur(noise, band[0]);
    double ss = 0;
    for (float v : noise.pixels()) ss += double(v) * v;
    const double scale = band[1] / std::sqrt(ss / noise.pixels().size());
    auto dst = acc.pixels();
    auto src = noise.pixels();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += static_cast<float>(scale * src[i]);
  }

  const int shapes = 8 + static_cast<int>(rng.below(5));
  for (int s = 0; s < shapes; ++s) {
    const double cx = rng.uniform(0, width), cy = rng.uniform(0, height);
    const double rx = rng.uniform(4, width / 8.0), ry = rng.uniform(4, height / 8.0);
    const double angle = rng.uniform(0, kPi);
    const float level = static_cast<float>(rng.uniform(0.1, 0.9));
    const bool ellipse = rng.below(2) == 0;
    const double c = std::cos(angle), sn = std::sin(angle);
    const double reach = std::max(rx, ry) * 1.5;
    for (int y = std::max(0, int(cy - reach)); y < std::min(height, int(cy + reach) + 1); ++y) {
      for (int x = std::max(0, int(cx - reach)); x < std::min(width, int(cx + reach) + 1); ++x) {
        const double u = (c * (x - cx) + sn * (y - cy)) / rx;
        const double v = (-sn * (x - cx) + c * (y - cy)) / ry;
        const bool in = ellipse ? u * u + v * v <= 1.0 : std::abs(u) <= 1.0 && std::abs(v) <= 1.0;
        if (in) acc(x, y) = 0.5f * acc(x, y) + 0.5f * level;
      }
    }
  }
  for (float& v : acc.pixels()) v = std::clamp(v, 0.02f, 0.98f);
  return quantize8(std::move(acc));
}

// ---------------------------------------------------------------------------
// Pair manifests
//
//   # quadrank pair manifest v1
//   image_a <path relative to the manifest>
//   image_b <path>
//   class <transform class>
//   homography
//   h00 h01 h02
//   h10 h11 h12
//   h20 h21 h22
//
// Matrix entries carry 17 significant digits and parse back bit-exactly.

struct PairManifest {
  std::string image_a;
  std::string image_b;
  std::string transform_class;
  Mat3 mapping;

  bool operator==(const PairManifest&) const = default;
};

inline std::string format_manifest(const PairManifest& m) {
  std::string out = "# quadrank pair manifest v1\n";
  out += "image_a " + m.image_a + "\n";
  out += "image_b " + m.image_b + "\n";
  out += "class " + m.transform_class + "\n";
  out += "homography\n";
  char buf[96];
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", m.mapping(r, c));
      out += buf;
      out += c < 2 ? " " : "\n";
    }
  }
  return out;
}

inline PairManifest parse_manifest(const std::string& text) {
  PairManifest m;
  std::istringstream in(text);
  std::string line;
  bool have_h = false, have_a = false, have_b = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "image_a") {
      ls >> m.image_a;
      have_a = true;
    } else if (key == "image_b") {
      ls >> m.image_b;
      have_b = true;
    } else if (key == "class") {
      ls >> m.transform_class;
    } else if (key == "homography") {
      for (int r = 0; r < 3; ++r) {
        if (!std::getline(in, line)) throw Error("manifest: truncated homography");
        std::istringstream rs(line);
        for (int c = 0; c < 3; ++c) {
          std::string tok;
          if (!(rs >> tok)) throw Error("manifest: homography row needs 3 values");
          char* end = nullptr;
          m.mapping(r, c) = std::strtod(tok.c_str(), &end);
          if (end == tok.c_str() || *end != '\0') throw Error("manifest: bad number '" + tok + "'");
        }
      }
      have_h = true;
    } else {
      throw Error("manifest: unknown key '" + key + "'");
    }
  }
  if (!have_a || !have_b || !have_h) throw Error("manifest: missing image_a, image_b or homography");
  if (m.transform_class.empty()) m.transform_class = "unknown";
  return m;
}

inline EvalPair load_pair(const std::filesystem::path& manifest_path) {
  const PairManifest m = parse_manifest(read_file(manifest_path));
  const auto dir = manifest_path.parent_path();
  EvalPair p;
  p.name = manifest_path.stem().string();
  p.transform_class = m.transform_class;
  p.image_a = load_image(dir / m.image_a);
  p.image_b = load_image(dir / m.image_b);
  p.mapping = m.mapping;
  return p;
}

// A manifest file, or every *.txt manifest in a directory (sorted by name).
inline std::vector<EvalPair> load_pairs(const std::filesystem::path& where) {
  namespace fs = std::filesystem;
  if (!fs::exists(where)) throw Error("pairs path does not exist: " + where.string());
  if (fs::is_regular_file(where)) return {load_pair(where)};
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(where)) {
    if (e.is_regular_file() && e.path().extension() == ".txt") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw Error("no pair manifests in " + where.string());
  std::vector<EvalPair> out;
  for (const auto& f : files) out.push_back(load_pair(f));
  return out;
}

// Every .pgm/.png in a directory (sorted by name), or a single image file.
inline std::vector<GrayImage> load_images(const std::filesystem::path& where) {
  namespace fs = std::filesystem;
  if (!fs::exists(where)) throw Error("image path does not exist: " + where.string());
  if (fs::is_regular_file(where)) return {load_image(where)};
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(where)) {
    const auto ext = e.path().extension().string();
    if (e.is_regular_file() && (ext == ".pgm" || ext == ".png")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw Error("no images in " + where.string());
  std::vector<GrayImage> out;
  for (const auto& f : files) out.push_back(load_image(f));
  return out;
}

// ---------------------------------------------------------------------------
// Fixture suite

inline const std::vector<std::string>& fixture_classes() {
  static const std::vector<std::string> k = {"viewpoint", "zoom_rotation", "illumination", "blur"};
  return k;
}

struct FixtureOptions {
  int base_images = 5;
  int train_images = 5;
  int size = 256;
};

// Derives the second image and ground truth for one transformation class.
inline EvalPair make_fixture_pair(const GrayImage& base, const std::string& cls, Rng& rng) {
  EvalPair p;
  p.transform_class = cls;
  p.image_a = base;
  const int w = base.width(), h = base.height();
  if (cls == "viewpoint") {
    // anisotropy ratio stretch^2 in [1.2, 2], i.e. roughly 35-60 degrees of tilt
    WarpSpec spec;
    spec.alpha = rng.uniform(0, 2 * kPi);
    spec.stretch = rng.uniform(1.1, 1.4);
    p.mapping = about_center(warp_matrix(spec), w, h);
    p.image_b = resample(base, p.mapping);
  } else if (cls == "zoom_rotation") {
    const double angle = rng.uniform(0.3, 1.2);
    const double zoom = rng.uniform(1.2, 1.6);
    p.mapping = about_center(Mat3::rotation(angle) * Mat3::scaling(zoom, zoom), w, h);
    p.image_b = resample(base, p.mapping);
  } else if (cls == "illumination") {
    const double gain = rng.uniform(0.5, 0.8);
    const double bias = rng.uniform(0.0, 0.15);
    p.image_b = resample(base, Mat3::identity(), gain, bias);
  } else if (cls == "blur") {
    p.image_b = gaussian_blur(base, rng.uniform(1.0, 2.0));
  } else {
    throw Error("unknown fixture class '" + cls + "'");
  }
  p.image_b = quantize8(std::move(p.image_b));
  return p;
}

inline std::vector<GrayImage> make_base_images(int count, int size, Rng rng) {
  std::vector<GrayImage> out;
  for (int i = 0; i < count; ++i) out.push_back(synthetic_texture(size, size, rng));
  return out;
}

// Held-out evaluation pairs (base x class) and separate training images, all
// from independent streams of the same seed.
struct FixtureSuite {
  std::vector<EvalPair> pairs;
  std::vector<GrayImage> train_images;
};

inline FixtureSuite make_fixture_suite(std::uint64_t seed, const FixtureOptions& opt = {}) {
  Rng root(seed);
  Rng eval_rng = root.fork(1);
  Rng warp_rng = root.fork(2);
  Rng train_rng = root.fork(3);
  FixtureSuite suite;
  const auto bases = make_base_images(opt.base_images, opt.size, eval_rng);
  for (int i = 0; i < opt.base_images; ++i) {
    for (const auto& cls : fixture_classes()) {
      EvalPair p = make_fixture_pair(bases[i], cls, warp_rng);
      char name[64];
      std::snprintf(name, sizeof name, "base%02d_%s", i, cls.c_str());
      p.name = name;
      suite.pairs.push_back(std::move(p));
    }
  }
  suite.train_images = make_base_images(opt.train_images, opt.size, train_rng);
  return suite;
}

// Writes pairs/<name>.txt with its two images and train/train_XX.pgm.
inline void write_fixture_suite(const FixtureSuite& suite, const std::filesystem::path& out_dir) {
  const auto pairs_dir = out_dir / "pairs";
  const auto train_dir = out_dir / "train";
  for (const auto& p : suite.pairs) {
    PairManifest m{p.name + "_a.pgm", p.name + "_b.pgm", p.transform_class, p.mapping};
    save_pgm(p.image_a, pairs_dir / m.image_a);
    save_pgm(p.image_b, pairs_dir / m.image_b);
    write_file_atomic(pairs_dir / (p.name + ".txt"), format_manifest(m));
  }
  for (std::size_t i = 0; i < suite.train_images.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "train_%02zu.pgm", i);
    save_pgm(suite.train_images[i], train_dir / name);
  }
}

}  // namespace quadrank
