#pragma once

#include <cstddef>
#include <span>

#include "diffattn/tensor.hpp"

namespace diffattn {

struct CrossEntropy {
  double value = 0.0;
  bool clamped = false;  // probs[label] was 0 and got clamped to 1e-12
};

// -(1/C) log probs[label] when scale_by_classes, else -log probs[label].
CrossEntropy cross_entropy(std::span<const double> probs, std::size_t label,
                           bool scale_by_classes = true);

// Gradient of cross_entropy(softmax(logits)) w.r.t. the logits.
Vector cross_entropy_logit_grad(std::span<const double> probs, std::size_t label,
                                bool scale_by_classes = true);

// max(0, |s - s+|^2 + alpha - |s - s-|^2)
double triplet_loss(std::span<const double> s, std::span<const double> s_plus,
                    std::span<const double> s_minus, double alpha);

struct TripletGrads {
  Vector target;
  Vector support;
  Vector oppose;
  bool active = false;
};

// Closed forms, active when alpha + |s-s+|^2 - |s-s-|^2 >= 0:
//   d/ds+ = -2(s - s+),  d/ds- = 2(s - s-),  d/ds = 2(s- - s+)
TripletGrads triplet_grads(std::span<const double> s, std::span<const double> s_plus,
                           std::span<const double> s_minus, double alpha);

inline double joint_loss(double cross, double triplet, double nu) { return cross + nu * triplet; }

struct QuintupletConfig {
  double alpha1 = 0.006;
  double alpha2 = 0.2;
  double alpha3 = 0.006;
  double lambda = 1e-4;
};

struct QuintupletTerms {
  double near = 0.0;    // alpha1 + D(a,p+)  - D(a,p++)
  double middle = 0.0;  // alpha2 + D(a,p++) - D(a,n--)
  double far = 0.0;     // alpha3 + D(a,n--) - D(a,n-)
};

// Raw hinge arguments; each slack is max(0, term).
QuintupletTerms quintuplet_terms(std::span<const double> anchor, std::span<const double> p_plus,
                                 std::span<const double> p_plusplus,
                                 std::span<const double> n_minusminus,
                                 std::span<const double> n_minus, const QuintupletConfig& cfg);

// Slacks at their minimal feasible values plus lambda * theta_norm_sq.
double quintuplet_loss(std::span<const double> anchor, std::span<const double> p_plus,
                       std::span<const double> p_plusplus, std::span<const double> n_minusminus,
                       std::span<const double> n_minus, const QuintupletConfig& cfg,
                       double theta_norm_sq);

struct QuintupletGrads {
  Vector anchor, p_plus, p_plusplus, n_minusminus, n_minus;
};

// Subgradient of the slack sum w.r.t. the five embeddings. The regularizer's 2*lambda*theta
// belongs to the parameters and is added by the caller.
QuintupletGrads quintuplet_grads(std::span<const double> anchor, std::span<const double> p_plus,
                                 std::span<const double> p_plusplus,
                                 std::span<const double> n_minusminus,
                                 std::span<const double> n_minus, const QuintupletConfig& cfg);

}  // namespace diffattn
