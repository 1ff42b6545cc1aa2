#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "quadrank/evaluator.hpp"
#include "quadrank/fixtures.hpp"

using namespace quadrank;

namespace {

Detection det(double x, double y, double s) {
  Detection d;
  d.x = x;
  d.y = y;
  d.s = s;
  return d;
}

GroundTruth identity_gt(int w = 200, int h = 200) { return {Mat3::identity(), w, h, w, h}; }

// Maximum bipartite matching by augmenting paths.
std::size_t max_matching(std::size_t na, std::size_t nb, const std::vector<std::vector<char>>& ok) {
  std::vector<int> owner(nb, -1);
  std::size_t count = 0;
  for (std::size_t i = 0; i < na; ++i) {
    std::vector<char> seen(nb, 0);
    std::function<bool(std::size_t)> augment = [&](std::size_t u) {
      for (std::size_t v = 0; v < nb; ++v) {
        if (!ok[u][v] || seen[v]) continue;
        seen[v] = 1;
        if (owner[v] < 0 || augment(static_cast<std::size_t>(owner[v]))) {
          owner[v] = static_cast<int>(u);
          return true;
        }
      }
      return false;
    };
    count += augment(i);
  }
  return count;
}

}  // namespace

// ---------------------------------------------------------------------------
// Overlap error

TEST(OverlapError, IdenticalDetections) {
  EXPECT_NEAR(region_overlap_error(det(50, 50, 2), det(50, 50, 2), Mat3::identity()), 0.0, 1e-12);
}

TEST(OverlapError, DisjointDiscs) {
  EXPECT_EQ(region_overlap_error(det(50, 50, 1), det(150, 50, 1), Mat3::identity()), 1.0);
}

TEST(OverlapError, ConcentricDiscs) {
  // radii 3 and 6
  EXPECT_NEAR(region_overlap_error(det(50, 50, 1), det(50, 50, 2), Mat3::identity()), 0.75, 0.005);
  EXPECT_NEAR(region_overlap_error(det(50, 50, 2), det(50, 50, 1), Mat3::identity()), 0.75, 0.005);
}

TEST(OverlapError, ShiftedEqualDiscs) {
  // lens area for two radius-r discs at distance d
  const double r = 6, d = 4;
  const double lens = 2 * r * r * std::acos(d / (2 * r)) - d / 2 * std::sqrt(4 * r * r - d * d);
  const double expect = 1 - lens / (2 * kPi * r * r - lens);
  EXPECT_NEAR(region_overlap_error(det(60, 60, 2), det(64, 60, 2), Mat3::identity()), expect, 0.005);
}

TEST(OverlapError, MappedEllipse) {
  // a disc of radius 3 stretched by diag(2, 1/2) covers an ellipse of area 9 pi,
  // compared against the disc of radius 3: intersection is 4 * 9 * atan(1/2)
  const Mat3 m = Mat3::scaling(2.0, 0.5);
  const double inter = 4 * 9 * std::atan(0.5);
  const double expect = 1 - inter / (2 * 9 * kPi - inter);
  EXPECT_NEAR(region_overlap_error(det(20, 40, 1), det(40, 20, 1), m), expect, 0.005);
}

TEST(OverlapError, UniformScalingInvariance) {
  Rng rng(1);
  const Mat3 m = Mat3::translation(5, -3) * Mat3::rotation(0.4) * Mat3::scaling(1.3, 1.1);
  for (int t = 0; t < 20; ++t) {
    const Detection a = det(rng.uniform(40, 60), rng.uniform(40, 60), rng.uniform(1, 3));
    const Point2 c = m.apply({a.x, a.y});
    const Detection b = det(c.x + rng.uniform(-3, 3), c.y + rng.uniform(-3, 3), rng.uniform(1, 3));
    const double k = 2.5;
    const Mat3 S = Mat3::scaling(k, k);
    const Mat3 mk = S * m * S.inverse();
    const double e1 = region_overlap_error(a, b, m);
    const double e2 = region_overlap_error(det(a.x * k, a.y * k, a.s * k), det(b.x * k, b.y * k, b.s * k), mk);
    EXPECT_NEAR(e1, e2, 0.005);
  }
}

// ---------------------------------------------------------------------------
// Repeatability

TEST(Repeatability, IdenticalListsScoreOne) {
  std::vector<Detection> a;
  for (int i = 0; i < 30; ++i) a.push_back(det(10 + 6 * i, 20 + 5 * (i % 7), 1.5 + 0.1 * (i % 3)));
  const auto rep = repeatability(a, a, identity_gt(), 100);
  EXPECT_EQ(rep.n_correspondences, 30u);
  EXPECT_DOUBLE_EQ(rep.repeatability, 1.0);
  EXPECT_FALSE(rep.empty_common_region);
}

TEST(Repeatability, TenfoldScaleScoresZero) {
  std::vector<Detection> a, b;
  for (int i = 0; i < 10; ++i) {
    a.push_back(det(20 + 15 * i, 100, 0.5));
    b.push_back(det(20 + 15 * i, 100, 5.0));
  }
  EXPECT_EQ(repeatability(a, b, identity_gt(), 100).repeatability, 0.0);
}

TEST(Repeatability, BudgetAppliedBeforeCommonRegion) {
  // b's first detection maps outside image a, so the budget of 2 leaves one
  // usable detection rather than pulling in the third
  const GroundTruth gt{Mat3::translation(50, 0), 100, 100, 100, 100};
  const std::vector<Detection> a{det(10, 50, 1), det(30, 50, 1), det(40, 70, 1)};
  const std::vector<Detection> b{det(20, 50, 1), det(60, 50, 1), det(80, 50, 1), det(90, 70, 1)};
  const auto rep = repeatability(a, b, gt, 2);
  EXPECT_EQ(rep.n_a, 2u);
  EXPECT_EQ(rep.n_b, 1u);
  EXPECT_EQ(rep.n_correspondences, 1u);
  EXPECT_DOUBLE_EQ(rep.repeatability, 1.0);
}

TEST(Repeatability, EmptyCommonRegionFlagged) {
  const GroundTruth gt{Mat3::translation(500, 0), 100, 100, 100, 100};
  const auto rep = repeatability({det(50, 50, 1)}, {det(50, 50, 1)}, gt, 10);
  EXPECT_TRUE(rep.empty_common_region);
  EXPECT_EQ(rep.repeatability, 0.0);
}

TEST(Repeatability, GreedyCloseToOptimal) {
  Rng rng(2);
  int identical = 0;
  for (int trial = 0; trial < 60; ++trial) {
    std::vector<Detection> a, b;
    for (int i = 0; i < 20; ++i) {
      a.push_back(det(rng.uniform(10, 50), rng.uniform(10, 50), rng.uniform(1, 3)));
      b.push_back(det(rng.uniform(10, 50), rng.uniform(10, 50), rng.uniform(1, 3)));
    }
    const auto rep = repeatability(a, b, identity_gt(60, 60), 20);
    std::vector<std::vector<char>> ok(20, std::vector<char>(20, 0));
    for (std::size_t i = 0; i < 20; ++i)
      for (std::size_t j = 0; j < 20; ++j)
        ok[i][j] = region_overlap_error(a[i], b[j], Mat3::identity()) < kOverlapThreshold;
    const std::size_t best = max_matching(20, 20, ok);
    EXPECT_LE(rep.n_correspondences, best);
    EXPECT_LE(best - rep.n_correspondences, 1u);
    identical += best == rep.n_correspondences;
  }
  EXPECT_GT(identical, 40);
}

TEST(Repeatability, SymmetricUnderInverse) {
  Rng rng(3);
  const Mat3 m = about_center(Mat3::rotation(0.5) * Mat3::scaling(1.3, 1.3), 120, 120);
  const GroundTruth gt{m, 120, 120, 120, 120};
  std::vector<Detection> a, b;
  for (int i = 0; i < 40; ++i) {
    const Detection d = det(rng.uniform(20, 100), rng.uniform(20, 100), rng.uniform(1, 2.5));
    a.push_back(d);
    const Point2 c = m.apply({d.x, d.y});
    b.push_back(det(c.x + rng.uniform(-2, 2), c.y + rng.uniform(-2, 2), d.s * 1.3 * rng.uniform(0.8, 1.2)));
  }
  const auto ab = repeatability(a, b, gt, 40);
  const auto ba = repeatability(b, a, gt.inverse(), 40);
  EXPECT_EQ(ab.n_a, ba.n_b);
  EXPECT_EQ(ab.n_b, ba.n_a);
  EXPECT_NEAR(ab.repeatability, ba.repeatability, 0.01 + 1.0 / std::min(ab.n_a, ab.n_b));
}

TEST(Repeatability, AddingPerfectPairNeverHurts) {
  Rng rng(4);
  std::vector<Detection> a, b;
  for (int i = 0; i < 15; ++i) {
    a.push_back(det(rng.uniform(10, 90), rng.uniform(10, 90), rng.uniform(1, 3)));
    b.push_back(det(rng.uniform(10, 90), rng.uniform(10, 90), rng.uniform(1, 3)));
  }
  std::size_t prev = repeatability(a, b, identity_gt(100, 100), 100).n_correspondences;
  for (int k = 0; k < 10; ++k) {
    const Detection d = det(rng.uniform(10, 90), rng.uniform(10, 90), rng.uniform(1, 3));
    a.push_back(d);
    b.push_back(d);
    const std::size_t now = repeatability(a, b, identity_gt(100, 100), 100).n_correspondences;
    EXPECT_GE(now, prev);
    prev = now;
  }
}

// ---------------------------------------------------------------------------
// Bench matrix

TEST(BenchMatrix, SinglePairSingleRow) {
  const auto suite = make_fixture_suite(5, {1, 0, 128});
  const std::vector<EvalPair> one{suite.pairs.front()};
  const auto rows = bench_matrix({{"dog", make_dog_model()}}, one, {100});
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].model, "dog");
  EXPECT_EQ(rows[0].pair, one[0].name);
  EXPECT_EQ(rows[0].budget, 100u);
  EXPECT_GE(rows[0].repeatability, 0.0);
  EXPECT_LE(rows[0].repeatability, 1.0);
}

TEST(BenchMatrix, ClassMeansAndDeterminism) {
  const auto suite = make_fixture_suite(6, {2, 0, 128});
  const std::vector<NamedModel> models{{"dog", make_dog_model()}, {"random", make_random_model(1)}};
  const auto rows = bench_matrix(models, suite.pairs, {20, 50});
  // 2 models x 8 pairs x 2 budgets, plus 2 models x 4 classes x 2 budgets
  EXPECT_EQ(rows.size(), 32u + 16u);
  for (const auto& r : rows) {
    if (!r.is_mean) continue;
    double sum = 0;
    int n = 0;
    for (const auto& q : rows)
      if (!q.is_mean && q.model == r.model && q.transform_class == r.transform_class && q.budget == r.budget) {
        sum += q.repeatability;
        ++n;
      }
    EXPECT_EQ(n, 2);
    EXPECT_NEAR(r.repeatability, sum / n, 1e-12);
  }
  EXPECT_EQ(bench_csv(rows, 9), bench_csv(bench_matrix(models, suite.pairs, {20, 50}), 9));
  EXPECT_THROW(bench_matrix(models, suite.pairs, {}), Error);
}

TEST(BenchMatrix, IlluminationPairIsHighlyRepeatable) {
  const auto suite = make_fixture_suite(8, {1, 0, 256});
  for (const auto& p : suite.pairs) {
    if (p.transform_class != "illumination") continue;
    const auto rows = bench_matrix({{"dog", make_dog_model()}}, {p}, {50});
    EXPECT_GT(rows[0].repeatability, 0.8);
  }
}
