#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "quadrank/core.hpp"
#include "quadrank/geometry.hpp"
#include "quadrank/image.hpp"

namespace quadrank {

// Axis-aligned box, inclusive bounds, in image-a coordinates.
struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  bool empty() const { return x1 < x0 || y1 < y0; }
  bool contains(Point2 p) const { return p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1; }
  bool operator==(const Box&) const = default;
};

// Positions whose 17x17 support lies inside a w x h image.
inline Box support_box(int width, int height) {
  return {double(kPatchRadius), double(kPatchRadius), double(width - 1 - kPatchRadius),
          double(height - 1 - kPatchRadius)};
}

// Two images with a ground-truth point map from a to b.
struct CorrespondencePair {
  GrayImage image_a;
  GrayImage image_b;
  Mat3 mapping;          // a -> b
  bool aligned = false;  // pixel-aligned pair, mapping is the identity
  Box valid_box;         // bounding box of the valid region in a

  Point2 to_b(Point2 p) const { return aligned ? p : mapping.apply(p); }

  // p has full support in a and its image has full support in b.
  bool in_valid_region(Point2 p) const {
    return support_box(image_a.width(), image_a.height()).contains(p) &&
           support_box(image_b.width(), image_b.height()).contains(to_b(p));
  }
};

namespace detail {

inline Box compute_valid_box(const GrayImage& a, const GrayImage& b, const Mat3& mapping) {
  Box box = support_box(a.width(), a.height());
  const Box sb = support_box(b.width(), b.height());
  const Mat3 inv = mapping.inverse();
  double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
  for (Point2 c : {Point2{sb.x0, sb.y0}, Point2{sb.x1, sb.y0}, Point2{sb.x0, sb.y1},
                   Point2{sb.x1, sb.y1}}) {
    const Point2 q = inv.apply(c);
    x0 = std::min(x0, q.x);
    y0 = std::min(y0, q.y);
    x1 = std::max(x1, q.x);
    y1 = std::max(y1, q.y);
  }
  box.x0 = std::max(box.x0, x0);
  box.y0 = std::max(box.y0, y0);
  box.x1 = std::min(box.x1, x1);
  box.y1 = std::min(box.y1, y1);
  return box;
}

}  // namespace detail

// Area-preserving warp rot(alpha) * diag(s, 1/s) * rot(-alpha) plus a
// gain/bias illumination change.
struct WarpSpec {
  double alpha = 0;
  double stretch = 1;
  double gain = 1;
  double bias = 0;
};

inline constexpr double kSmallWarpMax = 1.1;
inline constexpr double kLargeWarpMax = 2.0;

inline WarpSpec sample_warp_spec(Rng& rng, double stretch_max) {
  WarpSpec w;
  w.alpha = rng.uniform(0.0, 2.0 * kPi);
  w.stretch = rng.uniform(1.0, stretch_max);
  w.gain = rng.uniform(0.7, 1.3);
  w.bias = rng.uniform(-0.1, 0.1);
  return w;
}

inline Mat3 warp_matrix(const WarpSpec& w) {
  return Mat3::rotation(w.alpha) * Mat3::scaling(w.stretch, 1.0 / w.stretch) *
         Mat3::rotation(-w.alpha);
}

inline Mat3 about_center(const Mat3& linear, int width, int height) {
  const double cx = (width - 1) / 2.0, cy = (height - 1) / 2.0;
  return Mat3::translation(cx, cy) * linear * Mat3::translation(-cx, -cy);
}

// Resamples img through the inverse of a->b mapping, then applies
// I <- clamp(gain * I + bias, 0, 1).
inline GrayImage resample(const GrayImage& img, const Mat3& mapping, double gain = 1.0,
                          double bias = 0.0) {
  const Mat3 inv = mapping.inverse();
  GrayImage out(img.width(), img.height());
  parallel_for(static_cast<std::size_t>(img.height()), [&](std::size_t yi) {
    const int y = static_cast<int>(yi);
    for (int x = 0; x < img.width(); ++x) {
      const Point2 src = inv.apply({double(x), double(y)});
      const double v = gain * sample_bilinear(img, src.x, src.y) + bias;
      out(x, y) = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  });
  return out;
}

inline CorrespondencePair make_mapped_pair(GrayImage a, GrayImage b, const Mat3& mapping) {
  if (std::abs(mapping.affine_det()) <= 1e-9) throw Error("mapping is not invertible");
  CorrespondencePair p;
  p.valid_box = detail::compute_valid_box(a, b, mapping);
  p.image_a = std::move(a);
  p.image_b = std::move(b);
  p.mapping = mapping;
  if (p.valid_box.empty()) throw Error("pair has an empty valid region");
  return p;
}

inline CorrespondencePair make_warp_pair(const GrayImage& img, const WarpSpec& spec) {
  if (img.width() < 64 || img.height() < 64) throw Error("make_warp_pair: image must be >= 64x64");
  const Mat3 a_to_b = about_center(warp_matrix(spec), img.width(), img.height());
  return make_mapped_pair(img, resample(img, a_to_b, spec.gain, spec.bias), a_to_b);
}

inline CorrespondencePair make_warp_pair(const GrayImage& img, double stretch_max, Rng& rng) {
  return make_warp_pair(img, sample_warp_spec(rng, stretch_max));
}

// Pixel-aligned images of the same scene (e.g. color and depth).
inline CorrespondencePair make_aligned_pair(GrayImage a, GrayImage b) {
  if (a.width() != b.width() || a.height() != b.height())
    throw Error("make_aligned_pair: image sizes differ");
  CorrespondencePair p;
  p.valid_box = support_box(a.width(), a.height());
  if (p.valid_box.empty()) throw Error("pair has an empty valid region");
  p.image_a = std::move(a);
  p.image_b = std::move(b);
  p.aligned = true;
  return p;
}

// ---------------------------------------------------------------------------
// Quadruples

// How a transformation family is applied across the four patches:
// invariance shares one draw per image (1, 1, 2, 2); augmentation shares one
// draw per correspondence (1, 2, 1, 2); frozen leaves it at identity.
enum class TransformRole { frozen, invariance, augmentation };

struct QuadSampling {
  TransformRole rotation = TransformRole::invariance;
  TransformRole scale = TransformRole::augmentation;
  double scale_min = 1.0 / 3.0;
  double scale_max = 3.0;
  double min_separation = 3.0;

  static QuadSampling frozen() {
    QuadSampling s;
    s.rotation = TransformRole::frozen;
    s.scale = TransformRole::frozen;
    return s;
  }
};

// p1, p2 from image a; p3, p4 their correspondents in image b.
struct Quadruple {
  std::array<Patch17, 4> patches;
  std::array<Point2, 4> centers;
  std::array<double, 4> rotations{};
  std::array<double, 4> scales{};
};

namespace detail {

inline Point2 draw_valid_point(const CorrespondencePair& pair, Rng& rng) {
  const Box& b = pair.valid_box;
  for (int attempt = 0; attempt < 10000; ++attempt) {
    const Point2 p{rng.uniform(b.x0, b.x1), rng.uniform(b.y0, b.y1)};
    if (pair.in_valid_region(p)) return p;
  }
  throw Error("valid region too small to sample from");
}

template <class V>
std::array<V, 4> assign(TransformRole role, V first, V second, V identity) {
  switch (role) {
    case TransformRole::invariance:
      return {first, first, second, second};
    case TransformRole::augmentation:
      return {first, second, first, second};
    case TransformRole::frozen:
      break;
  }
  return {identity, identity, identity, identity};
}

}  // namespace detail

inline Quadruple sample_quadruple(const CorrespondencePair& pair, Rng& rng,
                                  const QuadSampling& cfg = {}) {
  const Point2 qi = detail::draw_valid_point(pair, rng);
  Point2 qj;
  for (int attempt = 0;; ++attempt) {
    if (attempt == 10000) throw Error("valid region too small for two separated points");
    qj = detail::draw_valid_point(pair, rng);
    if (std::hypot(qj.x - qi.x, qj.y - qi.y) >= cfg.min_separation) break;
  }
  const double r1 = rng.uniform(0.0, 2.0 * kPi);
  const double r2 = rng.uniform(0.0, 2.0 * kPi);
  const double s1 = rng.uniform(cfg.scale_min, cfg.scale_max);
  const double s2 = rng.uniform(cfg.scale_min, cfg.scale_max);

  Quadruple q;
  q.centers = {qi, qj, pair.to_b(qi), pair.to_b(qj)};
  q.rotations = detail::assign(cfg.rotation, r1, r2, 0.0);
  q.scales = detail::assign(cfg.scale, s1, s2, 1.0);
  for (int k = 0; k < 4; ++k) {
    const GrayImage& img = k < 2 ? pair.image_a : pair.image_b;
    q.patches[k] = extract_patch(img, q.centers[k].x, q.centers[k].y, q.scales[k], q.rotations[k]);
  }
  return q;
}

// Produces a fresh correspondence pair per call.
using PairSource = std::function<CorrespondencePair(Rng&)>;

// Picks an image uniformly and warps it with a random area-preserving warp.
inline PairSource warp_source(std::shared_ptr<const std::vector<GrayImage>> images,
                              double stretch_max) {
  if (!images || images->empty()) throw Error("warp_source: no images");
  return [images, stretch_max](Rng& rng) {
    const auto& img = (*images)[rng.below(images->size())];
    return make_warp_pair(img, stretch_max, rng);
  };
}

// Always yields the same pair.
inline PairSource fixed_source(std::shared_ptr<const CorrespondencePair> pair) {
  return [pair](Rng&) { return *pair; };
}

struct EpochSample {
  std::size_t source = 0;
  std::vector<std::vector<Quadruple>> batches;
};

// One epoch segment: draws a source uniformly, one pair from it, a pool of
// quads_per_pair quadruples, and cuts the pool into full batches. The
// remainder is dropped so every batch has exactly batch_size entries.
inline EpochSample sample_batch(std::span<const PairSource> sources, std::size_t quads_per_pair,
                                std::size_t batch_size, Rng& rng,
                                const QuadSampling& cfg = {}) {
  if (sources.empty()) throw Error("sample_batch: no sources");
  if (batch_size < 1) throw Error("sample_batch: batch_size must be >= 1");
  if (batch_size > quads_per_pair) throw Error("sample_batch: batch_size exceeds pool size");
  EpochSample out;
  out.source = static_cast<std::size_t>(rng.below(sources.size()));
  const CorrespondencePair pair = sources[out.source](rng);
  const std::size_t nbatches = quads_per_pair / batch_size;
  out.batches.resize(nbatches);
  for (auto& b : out.batches) {
    b.reserve(batch_size);
    for (std::size_t i = 0; i < batch_size; ++i) b.push_back(sample_quadruple(pair, rng, cfg));
  }
  // remainder quadruples are still drawn so the stream does not depend on
  // the batch size
  for (std::size_t i = nbatches * batch_size; i < quads_per_pair; ++i) {
    (void)sample_quadruple(pair, rng, cfg);
  }
  return out;
}

}  // namespace quadrank
