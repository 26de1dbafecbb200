#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>

#include <Eigen/Dense>

#include "linbp/common.hpp"

namespace linbp {

/// Dense row-major single-precision n-d array. Value semantics throughout:
/// copies are deep, results of every kernel are fresh tensors.
struct Tensor {
  std::vector<int> shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(checked_numel(shape), 0.0f) {}
  Tensor(std::vector<int> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != checked_numel(shape))
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                       shape_str(shape));
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

  static Tensor full(std::vector<int> s, float v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  static size_t checked_numel(const std::vector<int>& s) {
    size_t n = 1;
    for (int d : s) {
      if (d <= 0) throw ShapeError("non-positive dimension in " + shape_str(s));
      n *= static_cast<size_t>(d);
    }
    return n;
  }

  size_t numel() const { return data.size(); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape.at(static_cast<size_t>(i)); }

  float& operator[](size_t i) { return data[i]; }
  float operator[](size_t i) const { return data[i]; }

  float& at2(int i, int j) { return data[static_cast<size_t>(i) * shape[1] + j]; }
  float at2(int i, int j) const { return data[static_cast<size_t>(i) * shape[1] + j]; }

  Tensor reshaped(std::vector<int> s) const {
    if (checked_numel(s) != numel())
      throw ShapeError("reshape " + shape_str(shape) + " -> " + shape_str(s));
    Tensor t;
    t.shape = std::move(s);
    t.data = data;
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (float v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

using EigenRowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<EigenRowMat>;
using ConstMatMap = Eigen::Map<const EigenRowMat>;

// ---------------------------------------------------------------------------
// Elementwise helpers
// ---------------------------------------------------------------------------

/// sign with sign(0) = 0; zero gradient coordinates stay unperturbed.
inline Tensor sign(const Tensor& t) {
  Tensor out(t.shape);
  for (size_t i = 0; i < t.numel(); ++i) out.data[i] = t.data[i] > 0 ? 1.0f : (t.data[i] < 0 ? -1.0f : 0.0f);
  return out;
}

inline Tensor clamp(const Tensor& t, float lo, float hi) {
  Tensor out(t.shape);
  for (size_t i = 0; i < t.numel(); ++i) out.data[i] = std::min(std::max(t.data[i], lo), hi);
  return out;
}

inline Tensor clamp(const Tensor& t, const Tensor& lo, const Tensor& hi) {
  if (!t.same_shape(lo) || !t.same_shape(hi))
    throw ShapeError("clamp bounds " + shape_str(lo.shape) + "/" + shape_str(hi.shape) +
                     " vs tensor " + shape_str(t.shape));
  Tensor out(t.shape);
  for (size_t i = 0; i < t.numel(); ++i)
    out.data[i] = std::min(std::max(t.data[i], lo.data[i]), hi.data[i]);
  return out;
}

/// Projects x_adv into the intersection of the eps-ball around x_ref and the
/// [0,1] box: clamp(clamp(x_adv, x_ref-eps, x_ref+eps), 0, 1).
inline Tensor linf_project(const Tensor& x_adv, const Tensor& x_ref, float eps) {
  if (eps < 0) throw ConfigError("linf_project: eps must be >= 0, got " + std::to_string(eps));
  if (!x_adv.same_shape(x_ref))
    throw ShapeError("linf_project " + shape_str(x_adv.shape) + " vs " + shape_str(x_ref.shape));
  Tensor out(x_adv.shape);
  for (size_t i = 0; i < out.numel(); ++i) {
    float v = std::min(std::max(x_adv.data[i], x_ref.data[i] - eps), x_ref.data[i] + eps);
    out.data[i] = std::min(std::max(v, 0.0f), 1.0f);
  }
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("add " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  Tensor out(a.shape);
  for (size_t i = 0; i < a.numel(); ++i) out.data[i] = a.data[i] + b.data[i];
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("sub " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  Tensor out(a.shape);
  for (size_t i = 0; i < a.numel(); ++i) out.data[i] = a.data[i] - b.data[i];
  return out;
}

inline Tensor scale(const Tensor& a, float s) {
  Tensor out(a.shape);
  for (size_t i = 0; i < a.numel(); ++i) out.data[i] = a.data[i] * s;
  return out;
}

inline void add_inplace(Tensor& a, const Tensor& b, float s = 1.0f) {
  if (!a.same_shape(b)) throw ShapeError("add_inplace " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  for (size_t i = 0; i < a.numel(); ++i) a.data[i] += s * b.data[i];
}

inline float norm_l2(const Tensor& t) {
  double s = 0;
  for (float v : t.data) s += static_cast<double>(v) * v;
  return static_cast<float>(std::sqrt(s));
}

inline float norm_l1(const Tensor& t) {
  double s = 0;
  for (float v : t.data) s += std::fabs(static_cast<double>(v));
  return static_cast<float>(s);
}

inline float norm_linf(const Tensor& t) {
  float m = 0;
  for (float v : t.data) m = std::max(m, std::fabs(v));
  return m;
}

inline float max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("max_abs_diff " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  float m = 0;
  for (size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a.data[i] - b.data[i]));
  return m;
}

inline float dot(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("dot " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  double s = 0;
  for (size_t i = 0; i < a.numel(); ++i) s += static_cast<double>(a.data[i]) * b.data[i];
  return static_cast<float>(s);
}

// ---------------------------------------------------------------------------
// Random tensors
// ---------------------------------------------------------------------------

inline Tensor randn(Rng& rng, std::vector<int> shape, float stddev = 1.0f) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = stddev * rng.normal();
  return t;
}

inline Tensor rand_uniform(Rng& rng, std::vector<int> shape, float lo, float hi) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

/// C[m,n] = A[m,k] * B[k,n]; single-precision accumulation via Eigen.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2)
    throw ShapeError("matmul expects rank-2 operands, got " + shape_str(a.shape) + " and " +
                     shape_str(b.shape));
  if (a.shape[1] != b.shape[0])
    throw ShapeError("matmul inner dimensions disagree: " + shape_str(a.shape) + " x " +
                     shape_str(b.shape));
  const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor c({m, n});
  MatMap(c.data.data(), m, n).noalias() =
      ConstMatMap(a.data.data(), m, k) * ConstMatMap(b.data.data(), k, n);
  return c;
}

/// C[m,n] = A[m,k] * B[n,k]^T (no materialized transpose).
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[1])
    throw ShapeError("matmul_nt: " + shape_str(a.shape) + " x " + shape_str(b.shape) + "^T");
  const int m = a.shape[0], k = a.shape[1], n = b.shape[0];
  Tensor c({m, n});
  MatMap(c.data.data(), m, n).noalias() =
      ConstMatMap(a.data.data(), m, k) * ConstMatMap(b.data.data(), n, k).transpose();
  return c;
}

/// C[m,n] = A[k,m]^T * B[k,n].
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.shape[0] != b.shape[0])
    throw ShapeError("matmul_tn: " + shape_str(a.shape) + "^T x " + shape_str(b.shape));
  const int m = a.shape[1], k = a.shape[0], n = b.shape[1];
  Tensor c({m, n});
  MatMap(c.data.data(), m, n).noalias() =
      ConstMatMap(a.data.data(), k, m).transpose() * ConstMatMap(b.data.data(), k, n);
  return c;
}

inline Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2) throw ShapeError("transpose expects rank 2, got " + shape_str(a.shape));
  Tensor t({a.shape[1], a.shape[0]});
  MatMap(t.data.data(), a.shape[1], a.shape[0]) =
      ConstMatMap(a.data.data(), a.shape[0], a.shape[1]).transpose();
  return t;
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation with zero padding), channels-first
// ---------------------------------------------------------------------------

inline int conv_out_dim(int in, int k, int stride, int pad, const char* what) {
  const int span = in + 2 * pad - k;
  if (span < 0)
    throw ConfigError(std::string(what) + ": kernel " + std::to_string(k) +
                      " exceeds padded input " + std::to_string(in + 2 * pad));
  if (stride < 1) throw ConfigError(std::string(what) + ": stride must be >= 1");
  if (span % stride != 0)
    throw ConfigError(std::string(what) + ": non-integral output size, (" + std::to_string(in) +
                      "+2*" + std::to_string(pad) + "-" + std::to_string(k) + ") % " +
                      std::to_string(stride) + " != 0");
  return span / stride + 1;
}

/// Unfolds x[C,H,W] into col[(C*kh*kw), (Ho*Wo)] for GEMM-based convolution.
inline void im2col(const float* x, int C, int H, int W, int kh, int kw, int stride, int pad,
                   int Ho, int Wo, float* col) {
  const int patch = C * kh * kw;
  for (int p = 0; p < patch; ++p) {
    const int c = p / (kh * kw);
    const int dy = (p / kw) % kh;
    const int dx = p % kw;
    float* row = col + static_cast<size_t>(p) * Ho * Wo;
    for (int oy = 0; oy < Ho; ++oy) {
      const int iy = oy * stride + dy - pad;
      for (int ox = 0; ox < Wo; ++ox) {
        const int ix = ox * stride + dx - pad;
        row[oy * Wo + ox] = (iy >= 0 && iy < H && ix >= 0 && ix < W)
                                ? x[(static_cast<size_t>(c) * H + iy) * W + ix]
                                : 0.0f;
      }
    }
  }
}

/// Adjoint of im2col: scatter-adds col back into x (x must be zeroed first).
inline void col2im(const float* col, int C, int H, int W, int kh, int kw, int stride, int pad,
                   int Ho, int Wo, float* x) {
  const int patch = C * kh * kw;
  for (int p = 0; p < patch; ++p) {
    const int c = p / (kh * kw);
    const int dy = (p / kw) % kh;
    const int dx = p % kw;
    const float* row = col + static_cast<size_t>(p) * Ho * Wo;
    for (int oy = 0; oy < Ho; ++oy) {
      const int iy = oy * stride + dy - pad;
      if (iy < 0 || iy >= H) continue;
      for (int ox = 0; ox < Wo; ++ox) {
        const int ix = ox * stride + dx - pad;
        if (ix < 0 || ix >= W) continue;
        x[(static_cast<size_t>(c) * H + iy) * W + ix] += row[oy * Wo + ox];
      }
    }
  }
}

/// y[Cout,Ho,Wo] = w (*) x, w[Cout,Cin,kh,kw], zero padding, no bias.
inline Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  if (x.ndim() != 3) throw ShapeError("conv2d input must be [C,H,W], got " + shape_str(x.shape));
  if (w.ndim() != 4) throw ShapeError("conv2d weight must be [Cout,Cin,kh,kw], got " + shape_str(w.shape));
  if (x.shape[0] != w.shape[1])
    throw ShapeError("conv2d channels: input " + shape_str(x.shape) + " vs weight " + shape_str(w.shape));
  const int C = x.shape[0], H = x.shape[1], W = x.shape[2];
  const int Cout = w.shape[0], kh = w.shape[2], kw = w.shape[3];
  const int Ho = conv_out_dim(H, kh, stride, pad, "conv2d");
  const int Wo = conv_out_dim(W, kw, stride, pad, "conv2d");
  std::vector<float> col(static_cast<size_t>(C) * kh * kw * Ho * Wo);
  im2col(x.data.data(), C, H, W, kh, kw, stride, pad, Ho, Wo, col.data());
  Tensor y({Cout, Ho, Wo});
  MatMap(y.data.data(), Cout, Ho * Wo).noalias() =
      ConstMatMap(w.data.data(), Cout, C * kh * kw) * ConstMatMap(col.data(), C * kh * kw, Ho * Wo);
  return y;
}

/// Gradient of conv2d w.r.t. its input: col = w^T * gy, then col2im.
inline Tensor conv2d_input_grad(const Tensor& gy, const Tensor& w, int stride, int pad, int H, int W) {
  const int Cout = w.shape[0], Cin = w.shape[1], kh = w.shape[2], kw = w.shape[3];
  const int Ho = gy.shape[1], Wo = gy.shape[2];
  std::vector<float> col(static_cast<size_t>(Cin) * kh * kw * Ho * Wo);
  MatMap(col.data(), Cin * kh * kw, Ho * Wo).noalias() =
      ConstMatMap(w.data.data(), Cout, Cin * kh * kw).transpose() *
      ConstMatMap(gy.data.data(), Cout, Ho * Wo);
  Tensor gx({Cin, H, W});
  col2im(col.data(), Cin, H, W, kh, kw, stride, pad, Ho, Wo, gx.data.data());
  return gx;
}

/// Gradient of conv2d w.r.t. the kernel; accumulates into gw.
inline void conv2d_weight_grad(const Tensor& x, const Tensor& gy, int stride, int pad, Tensor& gw) {
  const int C = x.shape[0], H = x.shape[1], W = x.shape[2];
  const int Cout = gw.shape[0], kh = gw.shape[2], kw = gw.shape[3];
  const int Ho = gy.shape[1], Wo = gy.shape[2];
  std::vector<float> col(static_cast<size_t>(C) * kh * kw * Ho * Wo);
  im2col(x.data.data(), C, H, W, kh, kw, stride, pad, Ho, Wo, col.data());
  MatMap(gw.data.data(), Cout, C * kh * kw).noalias() +=
      ConstMatMap(gy.data.data(), Cout, Ho * Wo) *
      ConstMatMap(col.data(), C * kh * kw, Ho * Wo).transpose();
}

// ---------------------------------------------------------------------------
// Pooling, channels-first, no padding; exact output division enforced
// ---------------------------------------------------------------------------

/// Max pooling; argmax stores the flat input index per output cell
/// (first occurrence wins on ties, which makes the backward deterministic).
inline Tensor maxpool2d(const Tensor& x, int k, int stride, std::vector<int32_t>& argmax) {
  const int C = x.shape[0], H = x.shape[1], W = x.shape[2];
  const int Ho = conv_out_dim(H, k, stride, 0, "maxpool2d");
  const int Wo = conv_out_dim(W, k, stride, 0, "maxpool2d");
  Tensor y({C, Ho, Wo});
  argmax.assign(y.numel(), 0);
  for (int c = 0; c < C; ++c)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        float best = -std::numeric_limits<float>::infinity();
        int32_t best_idx = 0;
        for (int dy = 0; dy < k; ++dy)
          for (int dx = 0; dx < k; ++dx) {
            const int iy = oy * stride + dy, ix = ox * stride + dx;
            const int32_t idx = (c * H + iy) * W + ix;
            const float v = x.data[idx];
            if (v > best) {
              best = v;
              best_idx = idx;
            }
          }
        const size_t o = (static_cast<size_t>(c) * Ho + oy) * Wo + ox;
        y.data[o] = best;
        argmax[o] = best_idx;
      }
  return y;
}

inline Tensor maxpool2d_backward(const Tensor& gy, const std::vector<int32_t>& argmax,
                                 const std::vector<int>& in_shape) {
  Tensor gx(in_shape);
  for (size_t o = 0; o < gy.numel(); ++o) gx.data[argmax[o]] += gy.data[o];
  return gx;
}

inline Tensor avgpool2d(const Tensor& x, int k, int stride) {
  const int C = x.shape[0], H = x.shape[1], W = x.shape[2];
  const int Ho = conv_out_dim(H, k, stride, 0, "avgpool2d");
  const int Wo = conv_out_dim(W, k, stride, 0, "avgpool2d");
  Tensor y({C, Ho, Wo});
  const float inv = 1.0f / static_cast<float>(k * k);
  for (int c = 0; c < C; ++c)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        float s = 0;
        for (int dy = 0; dy < k; ++dy)
          for (int dx = 0; dx < k; ++dx)
            s += x.data[(static_cast<size_t>(c) * H + oy * stride + dy) * W + ox * stride + dx];
        y.data[(static_cast<size_t>(c) * Ho + oy) * Wo + ox] = s * inv;
      }
  return y;
}

inline Tensor avgpool2d_backward(const Tensor& gy, int k, int stride, const std::vector<int>& in_shape) {
  Tensor gx(in_shape);
  const int C = in_shape[0], H = in_shape[1], W = in_shape[2];
  const int Ho = gy.shape[1], Wo = gy.shape[2];
  const float inv = 1.0f / static_cast<float>(k * k);
  for (int c = 0; c < C; ++c)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        const float g = gy.data[(static_cast<size_t>(c) * Ho + oy) * Wo + ox] * inv;
        for (int dy = 0; dy < k; ++dy)
          for (int dx = 0; dx < k; ++dx)
            gx.data[(static_cast<size_t>(c) * H + oy * stride + dy) * W + ox * stride + dx] += g;
      }
  return gx;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient oracle
// ---------------------------------------------------------------------------

/// Central-difference gradient of a scalar function, one coordinate at a
/// time. The function value is carried in double; the model math underneath
/// stays single precision, hence the default h = 1e-3 and the 1e-3 relative /
/// 1e-4 absolute acceptance band used by the numerical tests.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& fn, const Tensor& x,
                               double h = 1e-3) {
  if (h <= 0) throw ConfigError("finite_diff_grad: h must be positive");
  Tensor g(x.shape);
  Tensor xp = x;
  for (size_t i = 0; i < x.numel(); ++i) {
    const float orig = xp.data[i];
    const float up = orig + static_cast<float>(h);
    const float down = orig - static_cast<float>(h);
    xp.data[i] = up;
    const double fp = fn(xp);
    xp.data[i] = down;
    const double fm = fn(xp);
    xp.data[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw EvalError("non-finite function value at coordinate " + std::to_string(i));
    // Divide by the step that was actually realized in single precision.
    g.data[i] = static_cast<float>((fp - fm) / (static_cast<double>(up) - down));
  }
  return g;
}

/// |a-b| <= abs_tol + rel_tol*max(|a|,|b|), the band used by gradient checks.
inline bool close(float a, float b, float rel_tol, float abs_tol) {
  return std::fabs(a - b) <= abs_tol + rel_tol * std::max(std::fabs(a), std::fabs(b));
}

inline bool all_close(const Tensor& a, const Tensor& b, float rel_tol, float abs_tol) {
  if (!a.same_shape(b)) return false;
  for (size_t i = 0; i < a.numel(); ++i)
    if (!close(a.data[i], b.data[i], rel_tol, abs_tol)) return false;
  return true;
}

}  // namespace linbp
