#pragma once

// Question-guided soft attention over image regions and the additive answer head.
//
//   hidden_r = tanh(g_r W_I + (f W_Q + b_q))       question term broadcast over regions
//   logit_r  = hidden_r W_P + b_P
//   map      = softmax(logits)
//   v_att    = sum_r map_r g_r
//   answer   = (v_att + f) W_A + b_A

#include <cstdint>
#include <random>
#include <span>

#include "diffattn/tensor.hpp"

namespace diffattn {

using Rng = std::mt19937_64;

// Probability vector over the R image regions.
using AttentionMap = Vector;

struct AttentionParams {
  Matrix w_image;     // D x A
  Matrix w_question;  // D x A
  Matrix b_question;  // 1 x A
  Matrix w_proj;      // A x 1
  Matrix b_proj;      // 1 x 1

  std::size_t feature_dim() const { return w_image.rows(); }
  std::size_t hidden_dim() const { return w_image.cols(); }
};

struct AnswerParams {
  Matrix w_answer;  // D x C
  Matrix b_answer;  // 1 x C

  std::size_t classes() const { return w_answer.cols(); }
};

// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
AttentionParams init_attention(std::size_t dim, std::size_t hidden, Rng& rng);
AnswerParams init_answer(std::size_t dim, std::size_t classes, Rng& rng);

void check_attention_shapes(const AttentionParams& p);

// Everything the backward pass needs from one attention evaluation.
struct AttentionTrace {
  Matrix hidden;  // R x A, post-tanh
  AttentionMap map;
};

// f W_Q + b_q; shared by every branch evaluated with the same question.
Vector question_term(std::span<const double> question, const AttentionParams& p);

AttentionTrace attention_forward(const Matrix& image, std::span<const double> q_term,
                                 const AttentionParams& p);

AttentionMap attention_map(const Matrix& image, std::span<const double> question,
                           const AttentionParams& p);

// Accumulates dL/dW_I, dL/dW_P, dL/db_P into `grad` and adds dL/d(question term) into
// `grad_q_term`. Feed the summed question-term gradient of all branches to
// question_term_backward once.
void attention_backward(const Matrix& image, const AttentionTrace& trace,
                        std::span<const double> grad_map, const AttentionParams& p,
                        AttentionParams& grad, std::span<double> grad_q_term);

void question_term_backward(std::span<const double> question, std::span<const double> grad_q_term,
                            AttentionParams& grad);

Vector attend(const Matrix& image, std::span<const double> weights);

// dL/dweights_r = g_r . dL/dv ; accumulated into grad_weights.
void attend_backward(const Matrix& image, std::span<const double> grad_v,
                     std::span<double> grad_weights);

Vector answer_logits(std::span<const double> v_att, std::span<const double> question,
                     const AnswerParams& p);

// `fused` is v_att + f. Returns dL/dv_att.
Vector answer_backward(std::span<const double> fused, std::span<const double> grad_logits,
                       const AnswerParams& p, AnswerParams& grad);

}  // namespace diffattn
