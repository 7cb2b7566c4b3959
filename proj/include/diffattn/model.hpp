#pragma once

// Full per-item forward/backward for the six model variants: the attention baseline,
// the differential attention network (joint cross-entropy + metric loss over attention
// maps) and the four differential context networks.

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "diffattn/attention.hpp"
#include "diffattn/dcn.hpp"
#include "diffattn/losses.hpp"

namespace diffattn {

enum class ModelKind { Baseline, Dan, DcnAddV1, DcnAddV2, DcnMulV1, DcnMulV2 };

inline constexpr ModelKind kAllModels[] = {ModelKind::Baseline, ModelKind::Dan,
                                           ModelKind::DcnAddV1, ModelKind::DcnAddV2,
                                           ModelKind::DcnMulV1, ModelKind::DcnMulV2};

std::string_view to_string(ModelKind kind);
ModelKind parse_model_kind(std::string_view name);  // baseline, dan, dcn-add-v1, ...

bool is_dcn(ModelKind kind);
bool uses_exemplars(ModelKind kind);

enum class MetricLoss { Triplet, Quintuplet };

struct LossSpec {
  double nu = 10.0;
  double alpha = 0.2;
  MetricLoss metric = MetricLoss::Triplet;
  QuintupletConfig quintuplet;
  // Divide the cross-entropy by the class count, as in the joint objective. The DCN objective
  // is the plain softmax cross-entropy and ignores this flag unless dcn_scaled_ce is set.
  bool scale_cross_entropy = true;
  bool dcn_scaled_ce = false;
  DcnOptions dcn;
};

struct ModelParams {
  ModelKind kind = ModelKind::Baseline;
  AttentionParams attention;
  AnswerParams answer;
  DcnParams dcn;  // empty matrices unless kind is a DCN variant

  std::size_t feature_dim() const { return attention.feature_dim(); }
  std::size_t hidden_dim() const { return attention.hidden_dim(); }
  std::size_t classes() const { return answer.classes(); }

  // Visits every parameter block as f(name, matrix, trainable).
  template <typename F>
  void for_each_block(F&& f) {
    f("W_I", attention.w_image, true);
    f("W_Q", attention.w_question, true);
    f("b_q", attention.b_question, true);
    f("W_P", attention.w_proj, true);
    f("b_P", attention.b_proj, true);
    f("W_A", answer.w_answer, true);
    f("b_A", answer.b_answer, true);
    if (is_dcn(kind)) {
      f("W_1", dcn.w_support, dcn.trainable());
      f("W_2", dcn.w_oppose, dcn.trainable());
    }
  }
  template <typename F>
  void for_each_block(F&& f) const {
    const_cast<ModelParams*>(this)->for_each_block(
        [&](const char* name, Matrix& m, bool trainable) {
          f(name, static_cast<const Matrix&>(m), trainable);
        });
  }

  friend bool operator==(const ModelParams& a, const ModelParams& b);
};

struct ModelShape {
  std::size_t regions = 16;
  std::size_t dim = 32;
  std::size_t hidden = 64;
  std::size_t classes = 8;
  DcnScaling learned_scaling = DcnScaling::Diagonal;
};

ModelParams init_model(ModelKind kind, const ModelShape& shape, Rng& rng);
ModelParams zeros_like(const ModelParams& p);

// Sum of squares over trainable parameters.
double trainable_norm_sq(const ModelParams& p);

// One training example with its retrieved exemplars. Every branch is evaluated with the
// target's question. For the quintuplet loss, supports = {p+, p++} and opposes = {n--, n-}.
struct Sample {
  const Matrix* image = nullptr;
  std::span<const double> question;
  std::size_t label = 0;
  std::vector<const Matrix*> supports;
  std::vector<const Matrix*> opposes;
};

struct ForwardResult {
  double loss = 0.0;
  double cross = 0.0;
  double metric = 0.0;   // triplet (mean over pairs) or quintuplet loss, before nu
  bool metric_satisfied = false;  // every triplet meets the margin
  bool clamped = false;
  AttentionMap target_map;
  AttentionMap support_map;  // mean over supports
  AttentionMap oppose_map;
  AttentionMap final_map;    // map that weights the image features
  Vector probs;
  std::size_t predicted = 0;
};

// Where gradients go. With `metric` null the metric-loss gradient is folded into `cls`
// (the joint objective); otherwise it is kept separate, unscaled by nu.
struct GradSink {
  ModelParams* cls = nullptr;
  ModelParams* metric = nullptr;
};

ForwardResult forward_backward(const Sample& sample, const ModelParams& params,
                               const LossSpec& spec, GradSink sink);

inline ForwardResult forward(const Sample& sample, const ModelParams& params,
                             const LossSpec& spec) {
  return forward_backward(sample, params, spec, {});
}

}  // namespace diffattn
