#include "diffattn/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "diffattn/error.hpp"

namespace diffattn {

namespace {

constexpr double kProbFloor = 1e-12;

double sq_dist(std::span<const double> a, std::span<const double> b) {
  require_same_length(a, b, "squared distance");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

void check_label(std::span<const double> probs, std::size_t label) {
  if (label >= probs.size()) {
    throw DomainError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                      std::to_string(probs.size()) + " classes");
  }
}

// Accumulates k * d/dx D(a, x) = -2k(a - x) into gx and 2k(a - x) into ga.
void add_dist_grad(double k, std::span<const double> a, std::span<const double> x, Vector& ga,
                   Vector& gx) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = 2.0 * k * (a[i] - x[i]);
    ga[i] += d;
    gx[i] -= d;
  }
}

}  // namespace

CrossEntropy cross_entropy(std::span<const double> probs, std::size_t label,
                           bool scale_by_classes) {
  check_label(probs, label);
  CrossEntropy out;
  double p = probs[label];
  if (p <= 0.0) {
    p = kProbFloor;
    out.clamped = true;
  }
  out.value = -std::log(p);
  if (scale_by_classes) out.value /= static_cast<double>(probs.size());
  return out;
}

Vector cross_entropy_logit_grad(std::span<const double> probs, std::size_t label,
                                bool scale_by_classes) {
  check_label(probs, label);
  Vector g(probs.begin(), probs.end());
  g[label] -= 1.0;
  if (scale_by_classes) {
    const double inv = 1.0 / static_cast<double>(probs.size());
    for (double& x : g) x *= inv;
  }
  return g;
}

double triplet_loss(std::span<const double> s, std::span<const double> s_plus,
                    std::span<const double> s_minus, double alpha) {
  return std::max(0.0, sq_dist(s, s_plus) + alpha - sq_dist(s, s_minus));
}

TripletGrads triplet_grads(std::span<const double> s, std::span<const double> s_plus,
                           std::span<const double> s_minus, double alpha) {
  const std::size_t n = s.size();
  TripletGrads g{Vector(n, 0.0), Vector(n, 0.0), Vector(n, 0.0), false};
  g.active = alpha + sq_dist(s, s_plus) - sq_dist(s, s_minus) >= 0.0;
  if (!g.active) return g;
  for (std::size_t i = 0; i < n; ++i) {
    g.support[i] = -2.0 * (s[i] - s_plus[i]);
    g.oppose[i] = 2.0 * (s[i] - s_minus[i]);
    g.target[i] = 2.0 * (s_minus[i] - s_plus[i]);
  }
  return g;
}

QuintupletTerms quintuplet_terms(std::span<const double> anchor, std::span<const double> p_plus,
                                 std::span<const double> p_plusplus,
                                 std::span<const double> n_minusminus,
                                 std::span<const double> n_minus, const QuintupletConfig& cfg) {
  const double d1 = sq_dist(anchor, p_plus);
  const double d2 = sq_dist(anchor, p_plusplus);
  const double d3 = sq_dist(anchor, n_minusminus);
  const double d4 = sq_dist(anchor, n_minus);
  return {cfg.alpha1 + d1 - d2, cfg.alpha2 + d2 - d3, cfg.alpha3 + d3 - d4};
}

double quintuplet_loss(std::span<const double> anchor, std::span<const double> p_plus,
                       std::span<const double> p_plusplus, std::span<const double> n_minusminus,
                       std::span<const double> n_minus, const QuintupletConfig& cfg,
                       double theta_norm_sq) {
  if (cfg.alpha1 < 0 || cfg.alpha2 < 0 || cfg.alpha3 < 0) {
    throw DomainError("quintuplet margins must be non-negative");
  }
  const auto t = quintuplet_terms(anchor, p_plus, p_plusplus, n_minusminus, n_minus, cfg);
  return std::max(0.0, t.near) + std::max(0.0, t.middle) + std::max(0.0, t.far) +
         cfg.lambda * theta_norm_sq;
}

QuintupletGrads quintuplet_grads(std::span<const double> anchor, std::span<const double> p_plus,
                                 std::span<const double> p_plusplus,
                                 std::span<const double> n_minusminus,
                                 std::span<const double> n_minus, const QuintupletConfig& cfg) {
  const std::size_t n = anchor.size();
  QuintupletGrads g{Vector(n, 0.0), Vector(n, 0.0), Vector(n, 0.0), Vector(n, 0.0),
                    Vector(n, 0.0)};
  const auto t = quintuplet_terms(anchor, p_plus, p_plusplus, n_minusminus, n_minus, cfg);
  if (t.near >= 0.0) {
    add_dist_grad(1.0, anchor, p_plus, g.anchor, g.p_plus);
    add_dist_grad(-1.0, anchor, p_plusplus, g.anchor, g.p_plusplus);
  }
  if (t.middle >= 0.0) {
    add_dist_grad(1.0, anchor, p_plusplus, g.anchor, g.p_plusplus);
    add_dist_grad(-1.0, anchor, n_minusminus, g.anchor, g.n_minusminus);
  }
  if (t.far >= 0.0) {
    add_dist_grad(1.0, anchor, n_minusminus, g.anchor, g.n_minusminus);
    add_dist_grad(-1.0, anchor, n_minus, g.anchor, g.n_minus);
  }
  return g;
}

}  // namespace diffattn
