#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "quadrank/core.hpp"
#include "quadrank/detector.hpp"
#include "quadrank/geometry.hpp"

namespace quadrank {

inline constexpr double kRegionScale = 3.0;
inline constexpr double kOverlapThreshold = 0.4;
inline constexpr int kOverlapGrid = 200;

// Ground-truth map between two images of known size.
struct GroundTruth {
  Mat3 mapping;  // a -> b
  int width_a = 0, height_a = 0;
  int width_b = 0, height_b = 0;

  GroundTruth inverse() const { return {mapping.inverse(), width_b, height_b, width_a, height_a}; }
};

inline bool inside_image(Point2 p, int w, int h) {
  return p.x >= 0 && p.y >= 0 && p.x <= w - 1 && p.y <= h - 1;
}

// 1 - |A n B| / |A u B| where A is det_a's measurement disc pushed into b's
// frame through the local linearization of the mapping and B is det_b's disc.
// Areas are estimated on a kOverlapGrid^2 raster over the joint bounding box.
inline double region_overlap_error(const Detection& a, const Detection& b, const Mat3& mapping) {
  const Point2 ca = mapping.apply({a.x, a.y});
  const auto J = mapping.jacobian({a.x, a.y});
  const double ra = kRegionScale * a.s;
  const double rb = kRegionScale * b.s;
  const double jdet = J[0] * J[3] - J[1] * J[2];
  if (std::abs(jdet) < 1e-15) throw Error("region_overlap_error: degenerate mapping");
  // inverse Jacobian maps b-frame offsets back to a's disc
  const std::array<double, 4> Ji = {J[3] / jdet, -J[1] / jdet, -J[2] / jdet, J[0] / jdet};

  const double ex = ra * std::hypot(J[0], J[1]);
  const double ey = ra * std::hypot(J[2], J[3]);
  const double ax0 = ca.x - ex, ax1 = ca.x + ex, ay0 = ca.y - ey, ay1 = ca.y + ey;
  const double bx0 = b.x - rb, bx1 = b.x + rb, by0 = b.y - rb, by1 = b.y + rb;
  if (ax1 < bx0 || bx1 < ax0 || ay1 < by0 || by1 < ay0) return 1.0;

  const double x0 = std::min(ax0, bx0), x1 = std::max(ax1, bx1);
  const double y0 = std::min(ay0, by0), y1 = std::max(ay1, by1);
  const double hx = (x1 - x0) / kOverlapGrid, hy = (y1 - y0) / kOverlapGrid;
  const double ra2 = ra * ra, rb2 = rb * rb;
  long in_a = 0, in_b = 0, both = 0;
  for (int iy = 0; iy < kOverlapGrid; ++iy) {
    const double y = y0 + (iy + 0.5) * hy;
    for (int ix = 0; ix < kOverlapGrid; ++ix) {
      const double x = x0 + (ix + 0.5) * hx;
      const double dx = x - ca.x, dy = y - ca.y;
      const double u = Ji[0] * dx + Ji[1] * dy;
      const double v = Ji[2] * dx + Ji[3] * dy;
      const bool ia = u * u + v * v <= ra2;
      const bool ib = (x - b.x) * (x - b.x) + (y - b.y) * (y - b.y) <= rb2;
      in_a += ia;
      in_b += ib;
      both += ia && ib;
    }
  }
  const long uni = in_a + in_b - both;
  if (uni == 0) return 1.0;
  return 1.0 - static_cast<double>(both) / static_cast<double>(uni);
}

struct RepeatabilityReport {
  std::size_t n_requested = 0;
  std::size_t n_a = 0;
  std::size_t n_b = 0;
  std::size_t n_correspondences = 0;
  double repeatability = 0;
  bool empty_common_region = false;
  std::vector<std::pair<std::size_t, std::size_t>> matches;  // indices into the kept lists
};

struct OverlapCandidate {
  double error = 1;
  std::size_t i = 0, j = 0;
};

// All (i, j) with overlap error below the threshold.
inline std::vector<OverlapCandidate> acceptable_pairs(const std::vector<Detection>& a,
                                                      const std::vector<Detection>& b,
                                                      const Mat3& mapping) {
  std::vector<OverlapCandidate> out;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Point2 ca = mapping.apply({a[i].x, a[i].y});
    const auto J = mapping.jacobian({a[i].x, a[i].y});
    const double reach_a =
        kRegionScale * a[i].s * std::sqrt(J[0] * J[0] + J[1] * J[1] + J[2] * J[2] + J[3] * J[3]);
    for (std::size_t j = 0; j < b.size(); ++j) {
      const double dist = std::hypot(ca.x - b[j].x, ca.y - b[j].y);
      if (dist > reach_a + kRegionScale * b[j].s) continue;
      const double e = region_overlap_error(a[i], b[j], mapping);
      if (e < kOverlapThreshold) out.push_back({e, i, j});
    }
  }
  return out;
}

// Both lists are cut to n_points first, then restricted to detections whose
// mapped position falls inside the other image; matching is greedy by
// ascending overlap error, one-to-one.
inline RepeatabilityReport repeatability(const std::vector<Detection>& dets_a,
                                         const std::vector<Detection>& dets_b,
                                         const GroundTruth& gt, std::size_t n_points) {
  RepeatabilityReport rep;
  rep.n_requested = n_points;
  const Mat3 inv = gt.mapping.inverse();
  std::vector<Detection> a, b;
  for (std::size_t i = 0; i < std::min(n_points, dets_a.size()); ++i) {
    if (inside_image(gt.mapping.apply({dets_a[i].x, dets_a[i].y}), gt.width_b, gt.height_b))
      a.push_back(dets_a[i]);
  }
  for (std::size_t j = 0; j < std::min(n_points, dets_b.size()); ++j) {
    if (inside_image(inv.apply({dets_b[j].x, dets_b[j].y}), gt.width_a, gt.height_a))
      b.push_back(dets_b[j]);
  }
  rep.n_a = a.size();
  rep.n_b = b.size();
  if (a.empty() || b.empty()) {
    rep.empty_common_region = true;
    return rep;
  }
  auto cands = acceptable_pairs(a, b, gt.mapping);
  std::sort(cands.begin(), cands.end(), [](const OverlapCandidate& l, const OverlapCandidate& r) {
    return std::tie(l.error, l.i, l.j) < std::tie(r.error, r.i, r.j);
  });
  std::vector<char> used_a(a.size(), 0), used_b(b.size(), 0);
  for (const auto& c : cands) {
    if (used_a[c.i] || used_b[c.j]) continue;
    used_a[c.i] = used_b[c.j] = 1;
    rep.matches.emplace_back(c.i, c.j);
  }
  rep.n_correspondences = rep.matches.size();
  rep.repeatability =
      static_cast<double>(rep.n_correspondences) / static_cast<double>(std::min(rep.n_a, rep.n_b));
  return rep;
}

// ---------------------------------------------------------------------------
// Benchmark matrix

struct NamedModel {
  std::string name;
  ResponseModel model;
};

struct EvalPair {
  std::string name;
  std::string transform_class;
  GrayImage image_a;
  GrayImage image_b;
  Mat3 mapping;

  GroundTruth ground_truth() const {
    return {mapping, image_a.width(), image_a.height(), image_b.width(), image_b.height()};
  }
};

struct BenchRow {
  std::string model;
  std::string pair;  // "mean" for per-class averages
  std::string transform_class;
  std::size_t budget = 0;
  double n_a = 0, n_b = 0, n_corr = 0;
  double repeatability = 0;
  bool is_mean = false;
};

inline std::vector<BenchRow> bench_matrix(const std::vector<NamedModel>& models,
                                          const std::vector<EvalPair>& pairs,
                                          const std::vector<std::size_t>& budgets,
                                          const DetectOptions& opt = {}) {
  if (budgets.empty()) throw Error("bench_matrix: no budgets");
  const std::size_t max_budget = *std::max_element(budgets.begin(), budgets.end());
  std::vector<BenchRow> rows;
  for (const auto& m : models) {
    // class -> budget -> (sum of rows, count)
    std::map<std::string, std::map<std::size_t, std::pair<BenchRow, int>>> acc;
    std::vector<std::string> class_order;
    for (const auto& p : pairs) {
      const auto da = detect(m.model, p.image_a, max_budget, 0.0, opt);
      const auto db = detect(m.model, p.image_b, max_budget, 0.0, opt);
      if (!acc.count(p.transform_class)) class_order.push_back(p.transform_class);
      for (std::size_t budget : budgets) {
        const auto rep = repeatability(da, db, p.ground_truth(), budget);
        BenchRow r{m.name, p.name, p.transform_class, budget, double(rep.n_a), double(rep.n_b),
                   double(rep.n_correspondences), rep.repeatability, false};
        rows.push_back(r);
        auto& [sum, count] = acc[p.transform_class][budget];
        sum.n_a += r.n_a;
        sum.n_b += r.n_b;
        sum.n_corr += r.n_corr;
        sum.repeatability += r.repeatability;
        ++count;
      }
    }
    for (const auto& cls : class_order) {
      for (std::size_t budget : budgets) {
        const auto& [sum, count] = acc[cls][budget];
        if (count < 2) continue;  // a lone pair is its own mean
        rows.push_back({m.name, "mean", cls, budget, sum.n_a / count, sum.n_b / count,
                        sum.n_corr / count, sum.repeatability / count, true});
      }
    }
  }
  return rows;
}

// Mean repeatability of one model over all per-pair rows at a budget.
inline double mean_repeatability(const std::vector<BenchRow>& rows, const std::string& model,
                                 std::size_t budget) {
  double sum = 0;
  int n = 0;
  for (const auto& r : rows) {
    if (r.is_mean || r.model != model || r.budget != budget) continue;
    sum += r.repeatability;
    ++n;
  }
  return n ? sum / n : 0.0;
}

inline std::string bench_csv(const std::vector<BenchRow>& rows, std::uint64_t seed) {
  std::string out = csv_header_comment(seed);
  out += "# repeatability over the common region; budget applied before restriction\n";
  out += "model,pair,transform_class,budget,n_a,n_b,n_corr,repeatability\n";
  char line[512];
  for (const auto& r : rows) {
    if (r.is_mean) {
      std::snprintf(line, sizeof line, "%s,%s,%s,%zu,%.2f,%.2f,%.2f,%.6f\n", r.model.c_str(),
                    r.pair.c_str(), r.transform_class.c_str(), r.budget, r.n_a, r.n_b, r.n_corr,
                    r.repeatability);
    } else {
      std::snprintf(line, sizeof line, "%s,%s,%s,%zu,%.0f,%.0f,%.0f,%.6f\n", r.model.c_str(),
                    r.pair.c_str(), r.transform_class.c_str(), r.budget, r.n_a, r.n_b, r.n_corr,
                    r.repeatability);
    }
    out += line;
  }
  return out;
}

}  // namespace quadrank
