#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "quadrank/core.hpp"
#include "quadrank/image.hpp"
#include "quadrank/model.hpp"

namespace quadrank {

enum class Polarity { maximum, minimum };

inline const char* polarity_name(Polarity p) { return p == Polarity::maximum ? "max" : "min"; }

// A localized scale-space extremum in base-image coordinates.
struct Detection {
  double x = 0, y = 0;
  double s = 0;         // scale in sigma units
  double response = 0;  // refined response
  Polarity polarity = Polarity::maximum;
  double level = 0;     // continuous nominal level index (octave * S + j)

  bool operator==(const Detection&) const = default;
};

// Response maps aligned with a scale pyramid. Each octave holds S + 2 maps:
// stack index t corresponds to nominal level j = t - 1, so the first and last
// maps only serve as scale neighbors.
struct VolumeOctave {
  int stride = 1;
  std::vector<ResponseMap> maps;
};

struct ResponseVolume {
  int scales_per_octave = 3;
  double sigma0 = 1.6;
  int offset = kPatchRadius;  // map pixel (x, y) is octave pixel (x + offset, y + offset)
  std::vector<VolumeOctave> octaves;

  std::size_t level_count() const { return octaves.size() * scales_per_octave; }

  double sigma_at(int octave, double j) const {
    return sigma0 * std::exp2(octave + j / scales_per_octave);
  }
};

inline ResponseVolume compute_volume(const ResponseModel& model, const ScalePyramid& pyr) {
  ResponseVolume vol;
  vol.scales_per_octave = pyr.scales_per_octave;
  vol.sigma0 = pyr.sigma0;
  for (const auto& oct : pyr.octave_stacks) {
    VolumeOctave vo;
    vo.stride = oct.stride;
    for (const auto& lvl : oct.stack) vo.maps.push_back(forward_dense(model, lvl.image));
    vol.octaves.push_back(std::move(vo));
  }
  return vol;
}

struct Candidate {
  int octave = 0;
  int level = 0;  // nominal index within the octave, 0..S-1
  int x = 0, y = 0;
  Polarity polarity = Polarity::maximum;

  bool operator==(const Candidate&) const = default;
};

// Strict extrema over the 26 scale-space neighbors. Samples on the spatial
// border of a map are never selected; scale neighbors come from the extra
// maps of the same octave.
inline std::vector<Candidate> nms_3x3x3(const ResponseVolume& vol) {
  std::vector<Candidate> out;
  const int S = vol.scales_per_octave;
  for (int o = 0; o < static_cast<int>(vol.octaves.size()); ++o) {
    const auto& maps = vol.octaves[o].maps;
    if (static_cast<int>(maps.size()) != S + 2)
      throw Error("nms_3x3x3: octave must hold scales_per_octave + 2 maps");
    for (int j = 0; j < S; ++j) {
      const ResponseMap& below = maps[j];
      const ResponseMap& mid = maps[j + 1];
      const ResponseMap& above = maps[j + 2];
      const int w = mid.width(), h = mid.height();
      for (int y = 1; y + 1 < h; ++y) {
        for (int x = 1; x + 1 < w; ++x) {
          const float v = mid(x, y);
          bool is_max = true, is_min = true;
          for (const ResponseMap* m : {&below, &mid, &above}) {
            for (int dy = -1; dy <= 1 && (is_max || is_min); ++dy) {
              for (int dx = -1; dx <= 1; ++dx) {
                if (m == &mid && dx == 0 && dy == 0) continue;
                const float n = (*m)(x + dx, y + dy);
                if (n >= v) is_max = false;
                if (n <= v) is_min = false;
              }
            }
          }
          if (is_max) out.push_back({o, j, x, y, Polarity::maximum});
          if (is_min) out.push_back({o, j, x, y, Polarity::minimum});
        }
      }
    }
  }
  return out;
}

inline constexpr int kMaxLocalizationSteps = 5;

// Fits a quadratic from central differences and steps to its optimum; when an
// offset component exceeds half a sample the fit is redone at the adjacent
// sample in that direction.
inline std::optional<Detection> localize_taylor(const ResponseVolume& vol, const Candidate& c) {
  const int S = vol.scales_per_octave;
  const auto& maps = vol.octaves.at(c.octave).maps;
  const int w = maps.front().width(), h = maps.front().height();
  int x = c.x, y = c.y, j = c.level;
  for (int step = 0; step < kMaxLocalizationSteps; ++step) {
    if (x < 1 || y < 1 || x + 1 >= w || y + 1 >= h || j < 0 || j >= S) return std::nullopt;
    const auto D = [&](int dx, int dy, int dj) -> double {
      return maps[j + 1 + dj](x + dx, y + dy);
    };
    const double v = D(0, 0, 0);
    const double g[3] = {(D(1, 0, 0) - D(-1, 0, 0)) / 2, (D(0, 1, 0) - D(0, -1, 0)) / 2,
                         (D(0, 0, 1) - D(0, 0, -1)) / 2};
    const double dxx = D(1, 0, 0) + D(-1, 0, 0) - 2 * v;
    const double dyy = D(0, 1, 0) + D(0, -1, 0) - 2 * v;
    const double dss = D(0, 0, 1) + D(0, 0, -1) - 2 * v;
    const double dxy = (D(1, 1, 0) - D(-1, 1, 0) - D(1, -1, 0) + D(-1, -1, 0)) / 4;
    const double dxs = (D(1, 0, 1) - D(-1, 0, 1) - D(1, 0, -1) + D(-1, 0, -1)) / 4;
    const double dys = (D(0, 1, 1) - D(0, -1, 1) - D(0, 1, -1) + D(0, -1, -1)) / 4;
    const double H[3][3] = {{dxx, dxy, dxs}, {dxy, dyy, dys}, {dxs, dys, dss}};
    const double det = H[0][0] * (H[1][1] * H[2][2] - H[1][2] * H[2][1]) -
                       H[0][1] * (H[1][0] * H[2][2] - H[1][2] * H[2][0]) +
                       H[0][2] * (H[1][0] * H[2][1] - H[1][1] * H[2][0]);
    if (!(std::abs(det) >= 1e-12)) return std::nullopt;
    // delta = -H^-1 g via Cramer's rule
    double delta[3];
    for (int k = 0; k < 3; ++k) {
      double M[3][3];
      for (int r = 0; r < 3; ++r)
        for (int col = 0; col < 3; ++col) M[r][col] = col == k ? -g[r] : H[r][col];
      delta[k] = (M[0][0] * (M[1][1] * M[2][2] - M[1][2] * M[2][1]) -
                  M[0][1] * (M[1][0] * M[2][2] - M[1][2] * M[2][0]) +
                  M[0][2] * (M[1][0] * M[2][1] - M[1][1] * M[2][0])) /
                 det;
    }
    if (std::abs(delta[0]) <= 0.5 && std::abs(delta[1]) <= 0.5 && std::abs(delta[2]) <= 0.5) {
      const int stride = vol.octaves[c.octave].stride;
      Detection d;
      d.x = (x + vol.offset + delta[0]) * stride;
      d.y = (y + vol.offset + delta[1]) * stride;
      d.level = c.octave * S + j + delta[2];
      d.s = vol.sigma_at(c.octave, j + delta[2]);
      d.response = v + 0.5 * (g[0] * delta[0] + g[1] * delta[1] + g[2] * delta[2]);
      d.polarity = c.polarity;
      return d;
    }
    const auto move = [](double d) { return d > 0.5 ? 1 : (d < -0.5 ? -1 : 0); };
    x += move(delta[0]);
    y += move(delta[1]);
    j += move(delta[2]);
  }
  return std::nullopt;
}

// Orders by |response| descending, ties by (scale, y, x) ascending, and keeps
// the first min(n, size) entries.
inline std::vector<Detection> select_top(std::vector<Detection> dets, std::size_t n) {
  if (n < 1) throw Error("select_top: n must be >= 1");
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    const double ra = std::abs(a.response), rb = std::abs(b.response);
    if (ra != rb) return ra > rb;
    if (a.s != b.s) return a.s < b.s;
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
  });
  if (dets.size() > n) dets.resize(n);
  return dets;
}

// ---------------------------------------------------------------------------
// Baselines

inline constexpr double kDogSigmaLow = 1.6;
inline const double kDogSigmaHigh = 1.6 * std::exp2(1.0 / 3.0);

// Linear model whose filter is G(sigma_high) - G(sigma_low) on the patch
// lattice, with continuous Gaussian normalization and zero bias.
inline ResponseModel make_dog_model(double sigma_low = kDogSigmaLow,
                                    double sigma_high = kDogSigmaHigh) {
  ResponseModel m("linear", 0);
  auto p = m.params();
  const auto gauss = [](double u, double v, double s) {
    return std::exp(-(u * u + v * v) / (2 * s * s)) / (2 * kPi * s * s);
  };
  for (int v = -kPatchRadius; v <= kPatchRadius; ++v) {
    for (int u = -kPatchRadius; u <= kPatchRadius; ++u) {
      p[(v + kPatchRadius) * kPatchSize + (u + kPatchRadius)] =
          static_cast<float>(gauss(u, v, sigma_high) - gauss(u, v, sigma_low));
    }
  }
  p[kPatchSize * kPatchSize] = 0.0f;
  return m;
}

// Untrained linear filter with the standard initialization.
inline ResponseModel make_random_model(std::uint64_t seed) { return ResponseModel("linear", seed); }

// ---------------------------------------------------------------------------
// Pipeline

struct DetectOptions {
  int octaves = 0;  // 0: choose from the image size
  int scales_per_octave = 3;
  double sigma0 = 1.6;
};

inline std::vector<Detection> detect_in_volume(const ResponseVolume& vol, std::size_t n_points,
                                               double threshold) {
  std::vector<Detection> kept;
  for (const Candidate& c : nms_3x3x3(vol)) {
    auto d = localize_taylor(vol, c);
    if (d && std::abs(d->response) > threshold) kept.push_back(*d);
  }
  return select_top(std::move(kept), n_points);
}

inline std::vector<Detection> detect(const ResponseModel& model, const GrayImage& img,
                                     std::size_t n_points, double threshold = 0.0,
                                     const DetectOptions& opt = {}) {
  const int octaves = opt.octaves > 0 ? opt.octaves : auto_octaves(img.width(), img.height());
  const ScalePyramid pyr = build_pyramid(img, octaves, opt.scales_per_octave, opt.sigma0);
  return detect_in_volume(compute_volume(model, pyr), n_points, threshold);
}

inline std::string detections_csv(const std::vector<Detection>& dets, std::uint64_t seed) {
  std::string out = csv_header_comment(seed);
  out += "x,y,scale,response,polarity\n";
  char line[160];
  for (const auto& d : dets) {
    std::snprintf(line, sizeof line, "%.6f,%.6f,%.6f,%.6f,%s\n", d.x, d.y, d.s, d.response,
                  polarity_name(d.polarity));
    out += line;
  }
  return out;
}

inline void save_volume_heatmaps(const ResponseVolume& vol, const std::filesystem::path& dir,
                                 const std::string& stem) {
  const int S = vol.scales_per_octave;
  for (std::size_t o = 0; o < vol.octaves.size(); ++o) {
    for (int j = 0; j < S; ++j) {
      const auto k = o * S + j;
      save_heatmap(vol.octaves[o].maps[j + 1],
                   dir / (stem + "_level" + std::to_string(k) + ".pgm"));
    }
  }
}

}  // namespace quadrank
