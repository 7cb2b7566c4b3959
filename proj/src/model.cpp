#include "diffattn/model.hpp"

#include <cmath>
#include <string>

#include "diffattn/error.hpp"

namespace diffattn {

namespace {

struct ModelName {
  ModelKind kind;
  std::string_view name;
};

constexpr ModelName kNames[] = {
    {ModelKind::Baseline, "baseline"},     {ModelKind::Dan, "dan"},
    {ModelKind::DcnAddV1, "dcn-add-v1"},   {ModelKind::DcnAddV2, "dcn-add-v2"},
    {ModelKind::DcnMulV1, "dcn-mul-v1"},   {ModelKind::DcnMulV2, "dcn-mul-v2"},
};

Vector mean_of(const std::vector<AttentionTrace>& traces, std::size_t n) {
  Vector out(n, 0.0);
  if (traces.empty()) return out;
  const double w = 1.0 / static_cast<double>(traces.size());
  for (const auto& t : traces) axpy(w, t.map, out);
  return out;
}

void check_finite(double x, const char* layer) {
  if (!std::isfinite(x)) throw NumericError(std::string("non-finite value in ") + layer);
}

void check_finite(std::span<const double> v, const char* layer) {
  if (!all_finite(v)) throw NumericError(std::string("non-finite value in ") + layer);
}

}  // namespace

std::string_view to_string(ModelKind kind) {
  for (const auto& n : kNames) {
    if (n.kind == kind) return n.name;
  }
  return "unknown";
}

ModelKind parse_model_kind(std::string_view name) {
  for (const auto& n : kNames) {
    if (n.name == name) return n.kind;
  }
  throw DomainError("unknown model '" + std::string(name) +
                    "' (expected baseline, dan, dcn-add-v1, dcn-add-v2, dcn-mul-v1, dcn-mul-v2)");
}

bool is_dcn(ModelKind kind) { return kind != ModelKind::Baseline && kind != ModelKind::Dan; }

bool uses_exemplars(ModelKind kind) { return kind != ModelKind::Baseline; }

bool operator==(const ModelParams& a, const ModelParams& b) {
  if (a.kind != b.kind) return false;
  if (is_dcn(a.kind) && (a.dcn.mode != b.dcn.mode || a.dcn.variant != b.dcn.variant ||
                         a.dcn.scaling != b.dcn.scaling)) {
    return false;
  }
  std::vector<const Matrix*> blocks_a;
  std::vector<const Matrix*> blocks_b;
  a.for_each_block([&](const char*, const Matrix& m, bool) { blocks_a.push_back(&m); });
  b.for_each_block([&](const char*, const Matrix& m, bool) { blocks_b.push_back(&m); });
  if (blocks_a.size() != blocks_b.size()) return false;
  for (std::size_t i = 0; i < blocks_a.size(); ++i) {
    if (!(*blocks_a[i] == *blocks_b[i])) return false;
  }
  return true;
}

ModelParams init_model(ModelKind kind, const ModelShape& shape, Rng& rng) {
  if (shape.regions == 0 || shape.dim == 0 || shape.hidden == 0 || shape.classes == 0) {
    throw DomainError("model dimensions must be positive");
  }
  ModelParams p;
  p.kind = kind;
  p.attention = init_attention(shape.dim, shape.hidden, rng);
  p.answer = init_answer(shape.dim, shape.classes, rng);
  if (is_dcn(kind)) {
    const DcnMode mode =
        (kind == ModelKind::DcnAddV1 || kind == ModelKind::DcnAddV2) ? DcnMode::Add : DcnMode::Mul;
    const DcnVariant variant =
        (kind == ModelKind::DcnAddV1 || kind == ModelKind::DcnMulV1) ? DcnVariant::Fixed
                                                                     : DcnVariant::Learned;
    p.dcn = init_dcn(mode, variant, shape.regions, shape.learned_scaling);
  }
  return p;
}

ModelParams zeros_like(const ModelParams& p) {
  ModelParams z = p;
  z.for_each_block([](const char*, Matrix& m, bool) { m.fill(0.0); });
  return z;
}

double trainable_norm_sq(const ModelParams& p) {
  double total = 0.0;
  p.for_each_block([&](const char*, const Matrix& m, bool trainable) {
    if (trainable) total += l2_norm_sq(m.flat());
  });
  return total;
}

ForwardResult forward_backward(const Sample& sample, const ModelParams& params,
                               const LossSpec& spec, GradSink sink) {
  if (sample.image == nullptr) throw DomainError("sample has no image");
  const Matrix& image = *sample.image;
  const auto& attn = params.attention;
  check_attention_shapes(attn);
  if (sample.question.size() != params.feature_dim()) {
    throw ShapeError("question length " + std::to_string(sample.question.size()) +
                     " does not match feature dim " + std::to_string(params.feature_dim()));
  }
  const ModelKind kind = params.kind;
  const bool dcn = is_dcn(kind);
  const bool quint = kind == ModelKind::Dan && spec.metric == MetricLoss::Quintuplet;
  if (uses_exemplars(kind)) {
    if (sample.supports.empty() || sample.supports.size() != sample.opposes.size()) {
      throw DomainError("model '" + std::string(to_string(kind)) +
                        "' needs matching non-empty support and oppose exemplars");
    }
    if (quint && sample.supports.size() != 2) {
      throw DomainError("quintuplet loss needs exactly two supports and two opposes");
    }
  }
  const std::size_t regions = image.rows();

  const Vector q_term = question_term(sample.question, attn);
  const AttentionTrace target = attention_forward(image, q_term, attn);
  check_finite(target.map, "attention map");
  std::vector<AttentionTrace> sup;
  std::vector<AttentionTrace> opp;
  for (const Matrix* g : sample.supports) sup.push_back(attention_forward(*g, q_term, attn));
  for (const Matrix* g : sample.opposes) opp.push_back(attention_forward(*g, q_term, attn));

  ForwardResult res;
  res.target_map = target.map;
  res.support_map = mean_of(sup, regions);
  res.oppose_map = mean_of(opp, regions);

  Vector r_plus;
  Vector r_minus;
  DifferentialTrace diff;
  if (dcn) {
    r_plus = supporting_context(res.target_map, res.support_map, res.oppose_map,
                                spec.dcn.subtract_projections);
    r_minus = opposing_context(res.target_map, res.support_map, res.oppose_map);
    diff = differential_forward(res.target_map, r_plus, r_minus, params.dcn, spec.dcn);
    check_finite(diff.out, "differential context");
    res.final_map = diff.out;
  } else {
    res.final_map = res.target_map;
  }

  const Vector v_att = attend(image, res.final_map);
  const Vector fused = add(v_att, sample.question);
  Vector logits = vecmat(fused, params.answer.w_answer);
  axpy(1.0, params.answer.b_answer.row(0), logits);
  res.probs = softmax(logits);
  check_finite(res.probs, "answer head");
  res.predicted = static_cast<std::size_t>(
      std::max_element(res.probs.begin(), res.probs.end()) - res.probs.begin());

  const bool scaled_ce = dcn ? spec.dcn_scaled_ce : spec.scale_cross_entropy;
  const CrossEntropy ce = cross_entropy(res.probs, sample.label, scaled_ce);
  res.cross = ce.value;
  res.clamped = ce.clamped;

  // Metric loss over attention maps; reported for every model, optimized only by DAN.
  double theta_sq = 0.0;
  if (!sup.empty() && !quint) {
    res.metric_satisfied = true;
    for (std::size_t j = 0; j < sup.size(); ++j) {
      const double t = triplet_loss(target.map, sup[j].map, opp[j].map, spec.alpha);
      res.metric += t / static_cast<double>(sup.size());
      const double gap = l2_norm_sq(sub(target.map, opp[j].map)) -
                         l2_norm_sq(sub(target.map, sup[j].map));
      if (gap < spec.alpha) res.metric_satisfied = false;
    }
  } else if (quint) {
    theta_sq = trainable_norm_sq(params);
    res.metric = quintuplet_loss(target.map, sup[0].map, sup[1].map, opp[0].map, opp[1].map,
                                 spec.quintuplet, theta_sq);
    const auto t = quintuplet_terms(target.map, sup[0].map, sup[1].map, opp[0].map, opp[1].map,
                                    spec.quintuplet);
    res.metric_satisfied = t.near <= 0.0 && t.middle <= 0.0 && t.far <= 0.0;
  }
  res.loss = kind == ModelKind::Dan ? joint_loss(res.cross, res.metric, spec.nu) : res.cross;
  check_finite(res.loss, "loss");

  if (sink.cls == nullptr) return res;

  // ---- backward ----
  ModelParams& gcls = *sink.cls;
  const Vector g_logits = cross_entropy_logit_grad(res.probs, sample.label, scaled_ce);
  const Vector g_v = answer_backward(fused, g_logits, params.answer, gcls.answer);
  Vector g_final(regions, 0.0);
  attend_backward(image, g_v, g_final);

  const std::size_t k = sup.size();
  Vector g_target = g_final;
  std::vector<Vector> g_sup(k, Vector(regions, 0.0));
  std::vector<Vector> g_opp(k, Vector(regions, 0.0));

  if (dcn) {
    DifferentialGrads dg = differential_backward(diff, res.target_map, r_plus, r_minus, params.dcn,
                                                 spec.dcn, g_final,
                                                 params.dcn.trainable() ? &gcls.dcn : nullptr);
    ContextGrads cg{std::move(dg.s), Vector(regions, 0.0), Vector(regions, 0.0)};
    contexts_backward(res.target_map, res.support_map, res.oppose_map, dg.r_plus, dg.r_minus,
                      spec.dcn.subtract_projections, cg);
    g_target = std::move(cg.target);
    const double w = 1.0 / static_cast<double>(k);
    for (std::size_t j = 0; j < k; ++j) {
      axpy(w, cg.support, g_sup[j]);
      axpy(w, cg.oppose, g_opp[j]);
    }
  }

  // Metric-loss gradients w.r.t. the maps.
  const bool has_metric = kind == ModelKind::Dan && (sink.metric != nullptr || spec.nu != 0.0);
  Vector m_target(regions, 0.0);
  std::vector<Vector> m_sup(k, Vector(regions, 0.0));
  std::vector<Vector> m_opp(k, Vector(regions, 0.0));
  if (has_metric) {
    if (quint) {
      const auto qg = quintuplet_grads(target.map, sup[0].map, sup[1].map, opp[0].map, opp[1].map,
                                       spec.quintuplet);
      m_target = qg.anchor;
      m_sup[0] = qg.p_plus;
      m_sup[1] = qg.p_plusplus;
      m_opp[0] = qg.n_minusminus;
      m_opp[1] = qg.n_minus;
    } else {
      const double w = 1.0 / static_cast<double>(k);
      for (std::size_t j = 0; j < k; ++j) {
        const auto tg = triplet_grads(target.map, sup[j].map, opp[j].map, spec.alpha);
        if (!tg.active) continue;
        axpy(w, tg.target, m_target);
        axpy(w, tg.support, m_sup[j]);
        axpy(w, tg.oppose, m_opp[j]);
      }
    }
  }

  const std::size_t hidden = params.hidden_dim();
  Vector gq_cls(hidden, 0.0);
  Vector gq_metric(hidden, 0.0);
  const bool separate = sink.metric != nullptr;
  ModelParams* gmetric = separate ? sink.metric : sink.cls;
  Vector& gq_m = separate ? gq_metric : gq_cls;
  const double mscale = separate ? 1.0 : spec.nu;

  auto backprop_branch = [&](const Matrix& img, const AttentionTrace& tr, Vector& g_cls_map,
                             const Vector& g_metric_map) {
    if (has_metric) {
      if (separate) {
        attention_backward(img, tr, g_metric_map, attn, gmetric->attention, gq_m);
      } else {
        axpy(mscale, g_metric_map, g_cls_map);
      }
    }
    attention_backward(img, tr, g_cls_map, attn, gcls.attention, gq_cls);
  };

  backprop_branch(image, target, g_target, m_target);
  for (std::size_t j = 0; j < k; ++j) {
    backprop_branch(*sample.supports[j], sup[j], g_sup[j], m_sup[j]);
    backprop_branch(*sample.opposes[j], opp[j], g_opp[j], m_opp[j]);
  }
  question_term_backward(sample.question, gq_cls, gcls.attention);
  if (separate && has_metric) question_term_backward(sample.question, gq_metric, gmetric->attention);

  if (quint && has_metric && spec.quintuplet.lambda != 0.0) {
    // d/dtheta lambda |theta|^2
    std::vector<const Matrix*> src;
    params.for_each_block([&](const char*, const Matrix& m, bool) { src.push_back(&m); });
    std::size_t i = 0;
    gmetric->for_each_block([&](const char*, Matrix& g, bool trainable) {
      if (trainable) axpy(2.0 * spec.quintuplet.lambda * mscale, src[i]->flat(), g.flat());
      ++i;
    });
  }
  return res;
}

}  // namespace diffattn
