#pragma once

// Test-only double-precision reference evaluator. Deliberately naive (direct
// loops, no GEMM, no im2col) and independent of the library's forward path:
// it backs the finite-difference oracle, whose noise floor would otherwise be
// set by single-precision function values.

#include <vector>

#include "linbp/graph.hpp"

namespace linbp::testutil {

using DVec = std::vector<double>;

inline DVec layer_forward_double(const Layer& l, const DVec& x, const std::vector<int>& in_shape,
                                 std::vector<int>& out_shape) {
  switch (l.kind) {
    case LayerKind::Dense: {
      DVec y(l.out, 0.0);
      for (int o = 0; o < l.out; ++o) {
        double s = l.b.data[o];
        for (int i = 0; i < l.in; ++i) s += static_cast<double>(l.W.data[o * l.in + i]) * x[i];
        y[o] = s;
      }
      out_shape = {l.out};
      return y;
    }
    case LayerKind::Conv2d: {
      const int C = in_shape[0], H = in_shape[1], W = in_shape[2];
      const int Ho = (H + 2 * l.pad - l.ksize) / l.stride + 1;
      const int Wo = (W + 2 * l.pad - l.ksize) / l.stride + 1;
      DVec y(static_cast<size_t>(l.out_ch) * Ho * Wo, 0.0);
      for (int co = 0; co < l.out_ch; ++co)
        for (int oy = 0; oy < Ho; ++oy)
          for (int ox = 0; ox < Wo; ++ox) {
            double s = l.b.data[co];
            for (int ci = 0; ci < C; ++ci)
              for (int dy = 0; dy < l.ksize; ++dy)
                for (int dx = 0; dx < l.ksize; ++dx) {
                  const int iy = oy * l.stride + dy - l.pad;
                  const int ix = ox * l.stride + dx - l.pad;
                  if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                  s += static_cast<double>(
                           l.W.data[((static_cast<size_t>(co) * C + ci) * l.ksize + dy) * l.ksize +
                                    dx]) *
                       x[(static_cast<size_t>(ci) * H + iy) * W + ix];
                }
            y[(static_cast<size_t>(co) * Ho + oy) * Wo + ox] = s;
          }
      out_shape = {l.out_ch, Ho, Wo};
      return y;
    }
    case LayerKind::ReLU: {
      DVec y = x;
      for (auto& v : y) v = v > 0 ? v : 0.0;
      out_shape = in_shape;
      return y;
    }
    case LayerKind::BatchNorm: {
      // eval mode only
      const int C = l.channels;
      int spatial = 1;
      for (size_t i = 1; i < in_shape.size(); ++i) spatial *= in_shape[i];
      DVec y(x.size());
      for (int c = 0; c < C; ++c) {
        const double is = 1.0 / std::sqrt(static_cast<double>(l.run_var.data[c]) + 1e-5);
        for (int i = 0; i < spatial; ++i)
          y[static_cast<size_t>(c) * spatial + i] =
              static_cast<double>(l.gamma.data[c]) *
                  (x[static_cast<size_t>(c) * spatial + i] - l.run_mean.data[c]) * is +
              l.beta.data[c];
      }
      out_shape = in_shape;
      return y;
    }
    case LayerKind::MaxPool: {
      const int C = in_shape[0], H = in_shape[1], W = in_shape[2];
      const int Ho = (H - l.pool_k) / l.pool_stride + 1;
      const int Wo = (W - l.pool_k) / l.pool_stride + 1;
      DVec y(static_cast<size_t>(C) * Ho * Wo);
      for (int c = 0; c < C; ++c)
        for (int oy = 0; oy < Ho; ++oy)
          for (int ox = 0; ox < Wo; ++ox) {
            double m = -1e300;
            for (int dy = 0; dy < l.pool_k; ++dy)
              for (int dx = 0; dx < l.pool_k; ++dx)
                m = std::max(m, x[(static_cast<size_t>(c) * H + oy * l.pool_stride + dy) * W +
                                  ox * l.pool_stride + dx]);
            y[(static_cast<size_t>(c) * Ho + oy) * Wo + ox] = m;
          }
      out_shape = {C, Ho, Wo};
      return y;
    }
    case LayerKind::AvgPool: {
      const int C = in_shape[0], H = in_shape[1], W = in_shape[2];
      const int Ho = (H - l.pool_k) / l.pool_stride + 1;
      const int Wo = (W - l.pool_k) / l.pool_stride + 1;
      DVec y(static_cast<size_t>(C) * Ho * Wo);
      for (int c = 0; c < C; ++c)
        for (int oy = 0; oy < Ho; ++oy)
          for (int ox = 0; ox < Wo; ++ox) {
            double s = 0;
            for (int dy = 0; dy < l.pool_k; ++dy)
              for (int dx = 0; dx < l.pool_k; ++dx)
                s += x[(static_cast<size_t>(c) * H + oy * l.pool_stride + dy) * W +
                       ox * l.pool_stride + dx];
            y[(static_cast<size_t>(c) * Ho + oy) * Wo + ox] = s / (l.pool_k * l.pool_k);
          }
      out_shape = {C, Ho, Wo};
      return y;
    }
    case LayerKind::Flatten: {
      int n = 1;
      for (int d : in_shape) n *= d;
      out_shape = {n};
      return x;
    }
    case LayerKind::Residual: {
      DVec cur = x;
      std::vector<int> shape = in_shape;
      for (const auto& c : l.children) cur = layer_forward_double(c, cur, shape, shape);
      DVec y(x.size());
      for (size_t i = 0; i < x.size(); ++i) {
        y[i] = x[i] + cur[i];
        if (l.post_relu && y[i] < 0) y[i] = 0.0;
      }
      out_shape = in_shape;
      return y;
    }
  }
  throw ShapeError("double reference: unknown layer kind");
}

/// Double-precision network output (eval mode) for a single sample.
inline DVec forward_double(const Network& net, const Tensor& x) {
  DVec cur(x.data.begin(), x.data.end());
  std::vector<int> shape = x.shape;
  for (const auto& l : net.layers) cur = layer_forward_double(l, cur, shape, shape);
  return cur;
}

inline double ce_loss_double(const Network& net, const Tensor& x, int y) {
  const DVec logits = forward_double(net, x);
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double sum = 0;
  for (double v : logits) sum += std::exp(v - mx);
  return mx + std::log(sum) - logits[y];
}

}  // namespace linbp::testutil
