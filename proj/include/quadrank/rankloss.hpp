#pragma once

#include <algorithm>
#include <span>

#include "quadrank/core.hpp"

namespace quadrank {

// Responses of one quadruple: h1, h2 are two points of the first image, h3, h4
// their correspondents in the transformed image.
struct QuadResponses {
  double h1 = 0, h2 = 0, h3 = 0, h4 = 0;
};

// d(loss)/d(h1..h4).
struct QuadGrad {
  double g1 = 0, g2 = 0, g3 = 0, g4 = 0;
};

// Positive iff the pair keeps its relative order across the transformation.
inline double agreement(const QuadResponses& q) {
  return (q.h1 - q.h2) * (q.h3 - q.h4);
}

inline double hinge(double r) { return std::max(0.0, 1.0 - r); }

// 0/1 misranking indicator; monitoring only, it has no useful gradient.
inline int misrank_count(double r) { return r <= 0.0 ? 1 : 0; }

struct HingeResult {
  double loss = 0;
  QuadGrad grad;
};

// At R == 1 the active-branch gradient is returned.
inline HingeResult hinge_grad(const QuadResponses& q) {
  const double a = q.h1 - q.h2;
  const double b = q.h3 - q.h4;
  const double r = a * b;
  HingeResult out;
  if (r > 1.0) return out;
  out.loss = 1.0 - r;
  out.grad = {-b, b, -a, a};
  return out;
}

struct BatchLoss {
  double mean_loss = 0;
  double misrank_fraction = 0;
};

inline BatchLoss batch_loss(std::span<const QuadResponses> quads) {
  if (quads.empty()) throw Error("batch_loss: empty batch");
  double loss = 0;
  double misranked = 0;
  for (const auto& q : quads) {
    const double r = agreement(q);
    loss += hinge(r);
    misranked += misrank_count(r);
  }
  const double n = static_cast<double>(quads.size());
  return {loss / n, misranked / n};
}

}  // namespace quadrank
