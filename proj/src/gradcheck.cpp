#include "diffattn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "diffattn/error.hpp"

namespace diffattn {

namespace {

using Wide = long double;
using WideVec = std::vector<Wide>;

constexpr Wide kFloor = 1e-12L;
constexpr int kMaxAttempts = 1000;

// Block positions in for_each_block order.
enum Block { kWI, kWQ, kBQ, kWP, kBP, kWA, kBA, kW1, kW2 };

struct Dims {
  std::size_t R, D, A, C;
};

WideVec softmax_wide(const WideVec& x) {
  const Wide m = *std::max_element(x.begin(), x.end());
  WideVec out(x.size());
  Wide z = 0;
  for (std::size_t i = 0; i < x.size(); ++i) z += (out[i] = std::exp(x[i] - m));
  for (Wide& v : out) v /= z;
  return out;
}

Wide dot_wide(const WideVec& a, const WideVec& b) {
  Wide s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

Wide dist_sq(const WideVec& a, const WideVec& b) {
  Wide s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

WideVec attention_wide(const Matrix& g, const WideVec& q_term, const WideParams& w, const Dims& d) {
  WideVec logits(d.R);
  for (std::size_t r = 0; r < d.R; ++r) {
    Wide l = w[kBP][0];
    for (std::size_t a = 0; a < d.A; ++a) {
      Wide pre = q_term[a];
      for (std::size_t k = 0; k < d.D; ++k) pre += static_cast<Wide>(g(r, k)) * w[kWI][k * d.A + a];
      l += std::tanh(pre) * w[kWP][a];
    }
    logits[r] = l;
  }
  return softmax_wide(logits);
}

WideVec mean_wide(const std::vector<WideVec>& maps, std::size_t n) {
  WideVec out(n, 0);
  for (const auto& m : maps) {
    for (std::size_t i = 0; i < n; ++i) out[i] += m[i] / static_cast<Wide>(maps.size());
  }
  return out;
}

// W r for a scalar, diagonal or full scaling stored flat.
WideVec scale_wide(const WideVec& wflat, const WideVec& r) {
  const std::size_t n = r.size();
  WideVec out(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (wflat.size() == 1) {
      out[i] = wflat[0] * r[i];
    } else if (wflat.size() == n) {
      out[i] = wflat[i] * r[i];
    } else {
      for (std::size_t j = 0; j < n; ++j) out[i] += wflat[i * n + j] * r[j];
    }
  }
  return out;
}

Vector narrow(const WideVec& v) { return Vector(v.begin(), v.end()); }

}  // namespace

Sample GradCheckInstance::sample() const {
  Sample s;
  s.image = &image;
  s.question = question;
  s.label = label;
  for (const auto& m : supports) s.supports.push_back(&m);
  for (const auto& m : opposes) s.opposes.push_back(&m);
  return s;
}

WideParams widen(const ModelParams& p) {
  WideParams w;
  p.for_each_block([&](const char*, const Matrix& m, bool) {
    w.emplace_back(m.flat().begin(), m.flat().end());
  });
  return w;
}

ReferenceResult reference_forward(const GradCheckInstance& inst, const WideParams& w,
                                  const LossSpec& spec) {
  const ModelKind kind = inst.params.kind;
  const Dims d{inst.image.rows(), inst.image.cols(), inst.params.hidden_dim(),
               inst.params.classes()};
  const bool dcn = is_dcn(kind);
  const bool quint = kind == ModelKind::Dan && spec.metric == MetricLoss::Quintuplet;
  ReferenceResult res;
  res.kink = std::numeric_limits<Wide>::infinity();

  WideVec f(inst.question.begin(), inst.question.end());
  WideVec q_term(d.A);
  for (std::size_t a = 0; a < d.A; ++a) {
    Wide v = w[kBQ][a];
    for (std::size_t k = 0; k < d.D; ++k) v += f[k] * w[kWQ][k * d.A + a];
    q_term[a] = v;
  }
  const WideVec s = attention_wide(inst.image, q_term, w, d);
  std::vector<WideVec> sup;
  std::vector<WideVec> opp;
  for (const auto& g : inst.supports) sup.push_back(attention_wide(g, q_term, w, d));
  for (const auto& g : inst.opposes) opp.push_back(attention_wide(g, q_term, w, d));

  WideVec final_map = s;
  if (dcn) {
    const WideVec sp = mean_wide(sup, d.R);
    const WideVec sm = mean_wide(opp, d.R);
    const Wide ss = dot_wide(s, s);
    const Wide kp = dot_wide(s, sp) / ss;
    const Wide km = dot_wide(s, sm) / ss;
    WideVec r_plus(d.R);
    WideVec r_minus(d.R);
    for (std::size_t i = 0; i < d.R; ++i) {
      r_plus[i] = (spec.dcn.subtract_projections ? kp - km : kp + km) * s[i];
      r_minus[i] = (sp[i] - kp * s[i]) + (sm[i] - km * s[i]);
    }
    WideVec t(d.R);
    if (spec.dcn.plain_difference) {
      for (std::size_t i = 0; i < d.R; ++i) t[i] = r_plus[i] - r_minus[i];
    } else {
      const WideVec a = scale_wide(w[kW1], r_plus);
      const WideVec b = scale_wide(w[kW2], r_minus);
      for (std::size_t i = 0; i < d.R; ++i) t[i] = std::tanh(a[i] - b[i]);
    }
    const bool add_mode = kind == ModelKind::DcnAddV1 || kind == ModelKind::DcnAddV2;
    WideVec raw(d.R);
    for (std::size_t i = 0; i < d.R; ++i) {
      raw[i] = add_mode ? s[i] + t[i] : s[i] * (spec.dcn.product_only ? t[i] : 1 + t[i]);
    }
    final_map = raw;
    if (spec.dcn.renormalize) {
      if (add_mode) {
        WideVec sorted = raw;
        std::sort(sorted.begin(), sorted.end());
        res.kink = std::min({res.kink, std::abs(sorted[0]), sorted[1] - sorted[0]});
        if (sorted[0] < 0) {
          for (Wide& x : final_map) x += -sorted[0] + kFloor;
        }
      } else {
        for (Wide& x : final_map) {
          res.kink = std::min(res.kink, std::abs(x - kFloor));
          if (!(x > kFloor)) x = kFloor;
        }
      }
      Wide total = 0;
      for (Wide x : final_map) total += x;
      for (Wide& x : final_map) x /= total;
    }
  }

  WideVec logits(d.C);
  for (std::size_t c = 0; c < d.C; ++c) {
    Wide z = w[kBA][c];
    for (std::size_t k = 0; k < d.D; ++k) {
      Wide v = f[k];
      for (std::size_t r = 0; r < d.R; ++r) v += final_map[r] * static_cast<Wide>(inst.image(r, k));
      z += v * w[kWA][k * d.C + c];
    }
    logits[c] = z;
  }
  const WideVec probs = softmax_wide(logits);
  const bool scaled = dcn ? spec.dcn_scaled_ce : spec.scale_cross_entropy;
  Wide loss = -std::log(std::max(probs[inst.label], kFloor));
  if (scaled) loss /= static_cast<Wide>(d.C);

  if (kind == ModelKind::Dan) {
    Wide metric = 0;
    if (quint) {
      const QuintupletConfig& q = spec.quintuplet;
      const Wide d1 = dist_sq(s, sup[0]);
      const Wide d2 = dist_sq(s, sup[1]);
      const Wide d3 = dist_sq(s, opp[0]);
      const Wide d4 = dist_sq(s, opp[1]);
      for (Wide h : {q.alpha1 + d1 - d2, q.alpha2 + d2 - d3, q.alpha3 + d3 - d4}) {
        res.kink = std::min(res.kink, std::abs(h));
        metric += std::max(h, Wide{0});
      }
      Wide theta = 0;
      std::size_t b = 0;
      inst.params.for_each_block([&](const char*, const Matrix&, bool trainable) {
        if (trainable) {
          for (Wide x : w[b]) theta += x * x;
        }
        ++b;
      });
      metric += q.lambda * theta;
    } else {
      for (std::size_t j = 0; j < sup.size(); ++j) {
        const Wide h = spec.alpha + dist_sq(s, sup[j]) - dist_sq(s, opp[j]);
        res.kink = std::min(res.kink, std::abs(h));
        metric += std::max(h, Wide{0}) / static_cast<Wide>(sup.size());
      }
    }
    loss += spec.nu * metric;
  }
  res.loss = loss;
  res.final_map = narrow(final_map);
  res.probs = narrow(probs);
  return res;
}

GradCheckInstance random_instance(ModelKind kind, const GradCheckShape& shape,
                                  const LossSpec& spec, Rng& rng, double min_kink) {
  const bool quint = kind == ModelKind::Dan && spec.metric == MetricLoss::Quintuplet;
  const std::size_t k = quint ? 2 : shape.k;
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> jitter(-0.5, 0.5);
  std::uniform_int_distribution<std::size_t> pick_label(0, shape.classes - 1);
  auto random_matrix = [&](std::size_t r, std::size_t c) {
    Matrix m(r, c);
    for (double& x : m.flat()) x = normal(rng);
    return m;
  };

  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    GradCheckInstance inst;
    inst.params = init_model(kind, {shape.regions, shape.dim, shape.hidden, shape.classes,
                                    DcnScaling::Diagonal},
                             rng);
    // Move learned scalings off their initial value so every entry is exercised.
    if (is_dcn(kind) && inst.params.dcn.trainable()) {
      for (double& x : inst.params.dcn.w_support.flat()) x += jitter(rng);
      for (double& x : inst.params.dcn.w_oppose.flat()) x += jitter(rng);
    }
    inst.params.attention.b_proj(0, 0) = jitter(rng);
    inst.image = random_matrix(shape.regions, shape.dim);
    inst.question.resize(shape.dim);
    for (double& x : inst.question) x = normal(rng);
    inst.label = pick_label(rng);
    if (uses_exemplars(kind)) {
      for (std::size_t j = 0; j < k; ++j) {
        inst.supports.push_back(random_matrix(shape.regions, shape.dim));
        inst.opposes.push_back(random_matrix(shape.regions, shape.dim));
      }
    }
    const auto ref = reference_forward(inst, widen(inst.params), spec);
    if (ref.kink > min_kink && std::isfinite(static_cast<double>(ref.loss))) return inst;
  }
  throw NumericError("random_instance: could not draw an instance away from kinks");
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(ModelKind kind, const GradCheckOptions& opts) {
  if (opts.samples == 0) throw DomainError("grad_check: need at least one sample");
  if (!(opts.epsilon > 0.0)) throw DomainError("grad_check: epsilon must be positive");
  GradCheckReport report;
  report.kind = kind;
  report.samples = opts.samples;
  Rng rng(opts.seed);

  for (std::size_t n = 0; n < opts.samples; ++n) {
    const GradCheckInstance inst = random_instance(kind, opts.shape, opts.loss, rng);
    ModelParams grad = zeros_like(inst.params);
    forward_backward(inst.sample(), inst.params, opts.loss, {&grad, nullptr});
    const WideParams base = widen(inst.params);
    const WideParams analytic = widen(grad);

    std::size_t b = 0;
    std::size_t slot = 0;
    inst.params.for_each_block([&](const char* name, const Matrix&, bool trainable) {
      if (trainable) {
        if (report.blocks.size() <= slot) report.blocks.push_back({name, 0.0, 0});
        BlockCheck& bc = report.blocks[slot++];
        WideParams w = base;
        const Wide eps = opts.epsilon;
        for (std::size_t i = 0; i < w[b].size(); ++i) {
          w[b][i] = base[b][i] + eps;
          const Wide up = reference_forward(inst, w, opts.loss).loss;
          w[b][i] = base[b][i] - eps;
          const Wide down = reference_forward(inst, w, opts.loss).loss;
          w[b][i] = base[b][i];
          const double numeric = static_cast<double>((up - down) / (2 * eps));
          const double err =
              relative_error(static_cast<double>(analytic[b][i]), numeric, opts.floor);
          bc.max_rel_error = std::max(bc.max_rel_error, err);
          if (n == 0) ++bc.entries;
        }
      }
      ++b;
    });
  }
  for (const auto& bc : report.blocks) {
    report.max_rel_error = std::max(report.max_rel_error, bc.max_rel_error);
  }
  return report;
}

}  // namespace diffattn
