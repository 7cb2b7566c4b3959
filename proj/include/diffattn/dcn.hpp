#pragma once

// Differential context: projections of the exemplar attention maps onto the target map,
// the supporting/opposing context built from them, and the combination with the target map
//
//   d = s (*) tanh(W1 r+ - W2 r-)    (*) = Add or Mul
//
// followed by renormalization to a distribution.

#include <span>

#include "diffattn/tensor.hpp"

namespace diffattn {

enum class DcnMode { Add, Mul };
enum class DcnVariant { Fixed, Learned };       // v1, v2
enum class DcnScaling { Scalar, Diagonal, Full };

struct DcnParams {
  DcnMode mode = DcnMode::Mul;
  DcnVariant variant = DcnVariant::Learned;
  DcnScaling scaling = DcnScaling::Diagonal;
  Matrix w_support;  // scales r+: 1x1, 1xR or RxR
  Matrix w_oppose;   // scales r-

  bool trainable() const { return variant == DcnVariant::Learned; }
};

// v1 freezes both scalings at the scalar 1.0; v2 starts from 1 (identity for Full).
DcnParams init_dcn(DcnMode mode, DcnVariant variant, std::size_t regions,
                   DcnScaling learned_scaling = DcnScaling::Diagonal);

struct DcnOptions {
  bool product_only = false;         // Mul: s * t instead of s * (1 + t)
  bool subtract_projections = false;  // r+ = proj(s+) - proj(s-) instead of the sum
  bool plain_difference = false;      // t = r+ - r-, no scaling and no tanh
  bool renormalize = true;
};

// (s . v) s / |s|^2
Vector project(std::span<const double> v, std::span<const double> s);
// v - project(v, s)
Vector reject(std::span<const double> v, std::span<const double> s);

Vector supporting_context(std::span<const double> s, std::span<const double> s_plus,
                          std::span<const double> s_minus, bool subtract_projections = false);
Vector opposing_context(std::span<const double> s, std::span<const double> s_plus,
                        std::span<const double> s_minus);

struct ContextGrads {
  Vector target, support, oppose;
};

// Adds the gradients of both contexts w.r.t. s, s+, s- into `out` (sized by the caller).
void contexts_backward(std::span<const double> s, std::span<const double> s_plus,
                       std::span<const double> s_minus, std::span<const double> grad_r_plus,
                       std::span<const double> grad_r_minus, bool subtract_projections,
                       ContextGrads& out);

struct DifferentialTrace {
  Vector t;         // tanh(W1 r+ - W2 r-) or the plain difference
  Vector raw;       // s (*) t before renormalization
  Vector adjusted;  // raw after clamp (Mul) or shift (Add)
  Vector out;       // final distribution (== raw when renormalize is off)
  double total = 1.0;
  std::size_t shift_index = 0;
  bool shifted = false;
};

DifferentialTrace differential_forward(std::span<const double> s, std::span<const double> r_plus,
                                       std::span<const double> r_minus, const DcnParams& p,
                                       const DcnOptions& opts = {});

Vector differential_context(std::span<const double> s, std::span<const double> r_plus,
                            std::span<const double> r_minus, const DcnParams& p,
                            const DcnOptions& opts = {});

struct DifferentialGrads {
  Vector s, r_plus, r_minus;
};

// Returns input gradients; accumulates scaling gradients into `grad` when non-null.
DifferentialGrads differential_backward(const DifferentialTrace& trace, std::span<const double> s,
                                        std::span<const double> r_plus,
                                        std::span<const double> r_minus, const DcnParams& p,
                                        const DcnOptions& opts, std::span<const double> grad_out,
                                        DcnParams* grad);

}  // namespace diffattn
