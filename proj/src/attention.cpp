#include "diffattn/attention.hpp"

#include <cmath>
#include <string>

#include "diffattn/error.hpp"

namespace diffattn {

namespace {

Matrix uniform_matrix(std::size_t rows, std::size_t cols, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  for (double& x : m.flat()) x = dist(rng);
  return m;
}

void expect_shape(const Matrix& m, std::size_t rows, std::size_t cols, const char* name) {
  if (m.rows() != rows || m.cols() != cols) {
    throw ShapeError(std::string(name) + " has shape " + m.shape_str() + ", expected " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  }
}

}  // namespace

AttentionParams init_attention(std::size_t dim, std::size_t hidden, Rng& rng) {
  AttentionParams p;
  p.w_image = uniform_matrix(dim, hidden, dim, rng);
  p.w_question = uniform_matrix(dim, hidden, dim, rng);
  p.b_question = uniform_matrix(1, hidden, dim, rng);
  p.w_proj = uniform_matrix(hidden, 1, hidden, rng);
  p.b_proj = uniform_matrix(1, 1, hidden, rng);
  return p;
}

AnswerParams init_answer(std::size_t dim, std::size_t classes, Rng& rng) {
  AnswerParams p;
  p.w_answer = uniform_matrix(dim, classes, dim, rng);
  p.b_answer = uniform_matrix(1, classes, dim, rng);
  return p;
}

void check_attention_shapes(const AttentionParams& p) {
  const std::size_t d = p.feature_dim();
  const std::size_t a = p.hidden_dim();
  expect_shape(p.w_question, d, a, "W_Q");
  expect_shape(p.b_question, 1, a, "b_q");
  expect_shape(p.w_proj, a, 1, "W_P");
  expect_shape(p.b_proj, 1, 1, "b_P");
}

Vector question_term(std::span<const double> question, const AttentionParams& p) {
  Vector q = vecmat(question, p.w_question);
  axpy(1.0, p.b_question.row(0), q);
  return q;
}

AttentionTrace attention_forward(const Matrix& image, std::span<const double> q_term,
                                 const AttentionParams& p) {
  if (image.cols() != p.feature_dim()) {
    throw ShapeError("attention: image features " + image.shape_str() +
                     " do not match W_I " + p.w_image.shape_str());
  }
  if (q_term.size() != p.hidden_dim()) throw ShapeError("attention: question term length");
  const std::size_t regions = image.rows();
  const std::size_t hidden = p.hidden_dim();

  AttentionTrace trace{matmul(image, p.w_image), {}};
  Vector logits(regions);
  const double b_proj = p.b_proj(0, 0);
  for (std::size_t r = 0; r < regions; ++r) {
    auto h = trace.hidden.row(r);
    double logit = 0.0;
    for (std::size_t j = 0; j < hidden; ++j) {
      h[j] = std::tanh(h[j] + q_term[j]);
      logit += h[j] * p.w_proj(j, 0);
    }
    logits[r] = logit + b_proj;
  }
  trace.map = softmax(logits);
  return trace;
}

AttentionMap attention_map(const Matrix& image, std::span<const double> question,
                           const AttentionParams& p) {
  check_attention_shapes(p);
  if (question.size() != p.feature_dim()) {
    throw ShapeError("attention: question length " + std::to_string(question.size()) +
                     " does not match feature dim " + std::to_string(p.feature_dim()));
  }
  return attention_forward(image, question_term(question, p), p).map;
}

void attention_backward(const Matrix& image, const AttentionTrace& trace,
                        std::span<const double> grad_map, const AttentionParams& p,
                        AttentionParams& grad, std::span<double> grad_q_term) {
  const std::size_t regions = image.rows();
  const std::size_t hidden = p.hidden_dim();
  require_same_length(grad_map, trace.map, "attention_backward");

  // softmax: dL/dlogit_r = s_r (g_r - sum_k g_k s_k)
  const double mean = dot(grad_map, trace.map);
  Matrix grad_pre(regions, hidden);
  for (std::size_t r = 0; r < regions; ++r) {
    const double gl = trace.map[r] * (grad_map[r] - mean);
    if (gl == 0.0) continue;
    grad.b_proj(0, 0) += gl;
    auto h = trace.hidden.row(r);
    auto gp = grad_pre.row(r);
    for (std::size_t j = 0; j < hidden; ++j) {
      grad.w_proj(j, 0) += gl * h[j];
      gp[j] = gl * p.w_proj(j, 0) * (1.0 - h[j] * h[j]);
      grad_q_term[j] += gp[j];
    }
  }
  // dW_I += G^T grad_pre
  for (std::size_t r = 0; r < regions; ++r) {
    auto g = image.row(r);
    auto gp = grad_pre.row(r);
    for (std::size_t i = 0; i < g.size(); ++i) axpy(g[i], gp, grad.w_image.row(i));
  }
}

void question_term_backward(std::span<const double> question, std::span<const double> grad_q_term,
                            AttentionParams& grad) {
  axpy(1.0, grad_q_term, grad.b_question.row(0));
  for (std::size_t i = 0; i < question.size(); ++i) {
    axpy(question[i], grad_q_term, grad.w_question.row(i));
  }
}

Vector attend(const Matrix& image, std::span<const double> weights) {
  if (weights.size() != image.rows()) {
    throw ShapeError("attend: " + std::to_string(weights.size()) + " weights for " +
                     std::to_string(image.rows()) + " regions");
  }
  return vecmat(weights, image);
}

void attend_backward(const Matrix& image, std::span<const double> grad_v,
                     std::span<double> grad_weights) {
  for (std::size_t r = 0; r < image.rows(); ++r) grad_weights[r] += dot(image.row(r), grad_v);
}

Vector answer_logits(std::span<const double> v_att, std::span<const double> question,
                     const AnswerParams& p) {
  if (p.b_answer.cols() != p.classes()) throw ShapeError("b_A does not match W_A");
  Vector logits = vecmat(add(v_att, question), p.w_answer);
  axpy(1.0, p.b_answer.row(0), logits);
  return logits;
}

Vector answer_backward(std::span<const double> fused, std::span<const double> grad_logits,
                       const AnswerParams& p, AnswerParams& grad) {
  axpy(1.0, grad_logits, grad.b_answer.row(0));
  Vector grad_fused(fused.size());
  for (std::size_t i = 0; i < fused.size(); ++i) {
    axpy(fused[i], grad_logits, grad.w_answer.row(i));
    grad_fused[i] = dot(p.w_answer.row(i), grad_logits);
  }
  return grad_fused;
}

}  // namespace diffattn
