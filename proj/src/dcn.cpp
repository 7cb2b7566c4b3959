#include "diffattn/dcn.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "diffattn/error.hpp"

namespace diffattn {

namespace {

constexpr double kMassFloor = 1e-12;

double norm_sq_checked(std::span<const double> s) {
  const double n = l2_norm_sq(s);
  if (!(n > 0.0)) throw DomainError("projection onto a zero vector");
  return n;
}

Vector apply_scaling(const Matrix& w, std::span<const double> r) {
  const std::size_t n = r.size();
  Vector out(n, 0.0);
  if (w.size() == 1) {
    for (std::size_t i = 0; i < n; ++i) out[i] = w(0, 0) * r[i];
  } else if (w.rows() == 1 && w.cols() == n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = w(0, i) * r[i];
  } else if (w.rows() == n && w.cols() == n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = dot(w.row(i), r);
  } else {
    throw ShapeError("DCN scaling " + w.shape_str() + " does not fit " + std::to_string(n) +
                     " regions");
  }
  return out;
}

// Given dL/du for u = W r (scaled by sign), accumulates into grad_r and grad_w.
void scaling_backward(const Matrix& w, std::span<const double> r, std::span<const double> grad_u,
                      double sign, std::span<double> grad_r, Matrix* grad_w) {
  const std::size_t n = r.size();
  if (w.size() == 1) {
    for (std::size_t i = 0; i < n; ++i) grad_r[i] += sign * w(0, 0) * grad_u[i];
    if (grad_w) (*grad_w)(0, 0) += sign * dot(grad_u, r);
  } else if (w.rows() == 1) {
    for (std::size_t i = 0; i < n; ++i) {
      grad_r[i] += sign * w(0, i) * grad_u[i];
      if (grad_w) (*grad_w)(0, i) += sign * grad_u[i] * r[i];
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      axpy(sign * grad_u[i], w.row(i), grad_r);
      if (grad_w) axpy(sign * grad_u[i], r, grad_w->row(i));
    }
  }
}

// Backward of p = (s.v)/(s.s) s, accumulating with factor k.
void project_backward(std::span<const double> v, std::span<const double> s,
                      std::span<const double> grad_p, double k, Vector& grad_v, Vector& grad_s) {
  const double a = dot(s, v);
  const double b = l2_norm_sq(s);
  const double c = dot(grad_p, s);
  const double cb = k * c / b;
  const double ab = k * a / b;
  const double abc = 2.0 * k * a * c / (b * b);
  for (std::size_t i = 0; i < s.size(); ++i) {
    grad_v[i] += cb * s[i];
    grad_s[i] += ab * grad_p[i] + cb * v[i] - abc * s[i];
  }
}

}  // namespace

DcnParams init_dcn(DcnMode mode, DcnVariant variant, std::size_t regions,
                   DcnScaling learned_scaling) {
  DcnParams p;
  p.mode = mode;
  p.variant = variant;
  p.scaling = variant == DcnVariant::Fixed ? DcnScaling::Scalar : learned_scaling;
  switch (p.scaling) {
    case DcnScaling::Scalar:
      p.w_support = Matrix(1, 1, 1.0);
      break;
    case DcnScaling::Diagonal:
      p.w_support = Matrix(1, regions, 1.0);
      break;
    case DcnScaling::Full:
      p.w_support = Matrix::identity(regions);
      break;
  }
  p.w_oppose = p.w_support;
  return p;
}

Vector project(std::span<const double> v, std::span<const double> s) {
  require_same_length(v, s, "project");
  const double k = dot(s, v) / norm_sq_checked(s);
  return scale(s, k);
}

Vector reject(std::span<const double> v, std::span<const double> s) {
  return sub(v, project(v, s));
}

Vector supporting_context(std::span<const double> s, std::span<const double> s_plus,
                          std::span<const double> s_minus, bool subtract_projections) {
  require_same_length(s, s_plus, "supporting_context");
  require_same_length(s, s_minus, "supporting_context");
  const double n = norm_sq_checked(s);
  const double sign = subtract_projections ? -1.0 : 1.0;
  const double k = dot(s, s_plus) / n + sign * (dot(s, s_minus) / n);
  return scale(s, k);
}

Vector opposing_context(std::span<const double> s, std::span<const double> s_plus,
                        std::span<const double> s_minus) {
  require_same_length(s, s_plus, "opposing_context");
  require_same_length(s, s_minus, "opposing_context");
  return add(reject(s_plus, s), reject(s_minus, s));
}

void contexts_backward(std::span<const double> s, std::span<const double> s_plus,
                       std::span<const double> s_minus, std::span<const double> grad_r_plus,
                       std::span<const double> grad_r_minus, bool subtract_projections,
                       ContextGrads& out) {
  // r- = (s+ - proj(s+)) + (s- - proj(s-))
  axpy(1.0, grad_r_minus, out.support);
  axpy(1.0, grad_r_minus, out.oppose);
  Vector g_proj_plus = sub(grad_r_plus, grad_r_minus);
  Vector g_proj_minus = subtract_projections ? scale(grad_r_plus, -1.0) : Vector(grad_r_plus.begin(), grad_r_plus.end());
  axpy(-1.0, grad_r_minus, g_proj_minus);
  project_backward(s_plus, s, g_proj_plus, 1.0, out.support, out.target);
  project_backward(s_minus, s, g_proj_minus, 1.0, out.oppose, out.target);
}

DifferentialTrace differential_forward(std::span<const double> s, std::span<const double> r_plus,
                                       std::span<const double> r_minus, const DcnParams& p,
                                       const DcnOptions& opts) {
  require_same_length(s, r_plus, "differential_context");
  require_same_length(s, r_minus, "differential_context");
  const std::size_t n = s.size();
  DifferentialTrace tr;
  if (opts.plain_difference) {
    tr.t = sub(r_plus, r_minus);
  } else {
    Vector u = apply_scaling(p.w_support, r_plus);
    axpy(-1.0, apply_scaling(p.w_oppose, r_minus), u);
    tr.t = tanh_elem(u);
  }

  tr.raw.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (p.mode == DcnMode::Add) {
      tr.raw[i] = s[i] + tr.t[i];
    } else {
      tr.raw[i] = s[i] * (opts.product_only ? tr.t[i] : 1.0 + tr.t[i]);
    }
  }
  if (!opts.renormalize) {
    tr.adjusted = tr.raw;
    tr.out = tr.raw;
    return tr;
  }

  tr.adjusted = tr.raw;
  if (p.mode == DcnMode::Mul) {
    bool any_mass = false;
    for (double& x : tr.adjusted) {
      if (x > kMassFloor) {
        any_mass = true;
      } else {
        x = kMassFloor;
      }
    }
    if (!any_mass) throw NumericError("differential context: all mass clamped to zero");
  } else {
    const auto it = std::min_element(tr.raw.begin(), tr.raw.end());
    if (*it < 0.0) {
      tr.shifted = true;
      tr.shift_index = static_cast<std::size_t>(it - tr.raw.begin());
      const double shift = -*it + kMassFloor;
      for (double& x : tr.adjusted) x += shift;
    }
  }
  tr.total = 0.0;
  for (double x : tr.adjusted) tr.total += x;
  if (!(tr.total > 0.0) || !std::isfinite(tr.total)) {
    throw NumericError("differential context: non-positive total mass");
  }
  tr.out = scale(tr.adjusted, 1.0 / tr.total);
  return tr;
}

Vector differential_context(std::span<const double> s, std::span<const double> r_plus,
                            std::span<const double> r_minus, const DcnParams& p,
                            const DcnOptions& opts) {
  return differential_forward(s, r_plus, r_minus, p, opts).out;
}

DifferentialGrads differential_backward(const DifferentialTrace& tr, std::span<const double> s,
                                        std::span<const double> r_plus,
                                        std::span<const double> r_minus, const DcnParams& p,
                                        const DcnOptions& opts, std::span<const double> grad_out,
                                        DcnParams* grad) {
  const std::size_t n = s.size();
  Vector g_raw(grad_out.begin(), grad_out.end());
  if (opts.renormalize) {
    // out = adjusted / total
    const double mean = dot(grad_out, tr.out);
    for (std::size_t i = 0; i < n; ++i) g_raw[i] = (grad_out[i] - mean) / tr.total;
    if (p.mode == DcnMode::Mul) {
      for (std::size_t i = 0; i < n; ++i) {
        if (!(tr.raw[i] > kMassFloor)) g_raw[i] = 0.0;
      }
    } else if (tr.shifted) {
      double sum = 0.0;
      for (double g : g_raw) sum += g;
      g_raw[tr.shift_index] -= sum;
    }
  }

  DifferentialGrads out{Vector(n, 0.0), Vector(n, 0.0), Vector(n, 0.0)};
  Vector g_t(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (p.mode == DcnMode::Add) {
      out.s[i] = g_raw[i];
      g_t[i] = g_raw[i];
    } else {
      out.s[i] = g_raw[i] * (opts.product_only ? tr.t[i] : 1.0 + tr.t[i]);
      g_t[i] = g_raw[i] * s[i];
    }
  }
  if (opts.plain_difference) {
    out.r_plus = g_t;
    out.r_minus = scale(g_t, -1.0);
    return out;
  }
  Vector g_u(n);
  for (std::size_t i = 0; i < n; ++i) g_u[i] = g_t[i] * (1.0 - tr.t[i] * tr.t[i]);
  scaling_backward(p.w_support, r_plus, g_u, 1.0, out.r_plus, grad ? &grad->w_support : nullptr);
  scaling_backward(p.w_oppose, r_minus, g_u, -1.0, out.r_minus, grad ? &grad->w_oppose : nullptr);
  return out;
}

}  // namespace diffattn
