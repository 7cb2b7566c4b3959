#pragma once

// Finite-difference gradient checking.
//
// The oracle is a second, self-contained implementation of every model's forward pass
// written with scalar loops in long double. Central differences are taken on it, so the
// analytic backward pass in model.cpp is compared against code that shares nothing with it.

#include <cstdint>
#include <string>
#include <vector>

#include "diffattn/model.hpp"

namespace diffattn {

struct GradCheckShape {
  std::size_t regions = 8;
  std::size_t dim = 16;
  std::size_t hidden = 8;
  std::size_t classes = 4;
  std::size_t k = 1;  // exemplar pairs; the quintuplet loss always uses two
};

struct GradCheckInstance {
  ModelParams params;
  Matrix image;
  Vector question;
  std::size_t label = 0;
  std::vector<Matrix> supports;
  std::vector<Matrix> opposes;

  Sample sample() const;
};

// Parameter values in extended precision, one flat array per block (for_each_block order).
using WideParams = std::vector<std::vector<long double>>;
WideParams widen(const ModelParams& p);

struct ReferenceResult {
  long double loss = 0;
  // Distance of the instance to the nearest non-differentiable point (hinges, clamps, the
  // argmin of the additive shift); finite differences are unreliable when this is small.
  long double kink = 0;
  Vector final_map;
  Vector probs;
};

ReferenceResult reference_forward(const GradCheckInstance& inst, const WideParams& w,
                                  const LossSpec& spec);

// Random instance whose kink distance exceeds `min_kink`.
GradCheckInstance random_instance(ModelKind kind, const GradCheckShape& shape,
                                  const LossSpec& spec, Rng& rng, double min_kink = 1e-3);

struct BlockCheck {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t entries = 0;
};

struct GradCheckReport {
  ModelKind kind = ModelKind::Baseline;
  std::size_t samples = 0;
  std::vector<BlockCheck> blocks;  // trainable blocks only
  double max_rel_error = 0.0;

  bool passed(double tol) const { return max_rel_error <= tol; }
};

struct GradCheckOptions {
  GradCheckShape shape;
  std::size_t samples = 5;
  std::uint64_t seed = 0;
  double epsilon = 1e-5;
  double floor = 1e-8;  // denominator floor of the relative error
  LossSpec loss;
};

// Relative error |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-8);

GradCheckReport grad_check(ModelKind kind, const GradCheckOptions& opts);

}  // namespace diffattn
