#pragma once

#include <vector>

#include "linbp/graph.hpp"

namespace linbp {

/// Backward treatment of one ReLU: Masked multiplies the incoming gradient
/// by 1[pre > 0]; Linear passes it through as if the ReLU were absent.
enum class ReluMode { Masked, Linear };

/// Per-layer backward-mode assignment. Layer ids at/after split_k run in
/// Linear mode; for residual blocks the mode applies to the post-addition
/// ReLU and selects the re-normalized linear treatment of the main branch.
struct BackpropPlan {
  std::vector<ReluMode> relu_modes;  // indexed by top-level layer id
  int split_k = 0;
  bool renormalize = false;
  float sgm_lambda = 1.0f;  // 1.0 = decay off

  static BackpropPlan standard(const Network& net) {
    BackpropPlan p;
    p.relu_modes.assign(net.layers.size(), ReluMode::Masked);
    p.split_k = net.num_layers();
    return p;
  }

  static BackpropPlan linear_from(const Network& net, int split_k, bool renormalize = true,
                                  float sgm_lambda = 1.0f) {
    if (split_k < 0 || split_k > net.num_layers())
      throw SplitError("plan split " + std::to_string(split_k) + " invalid; legal boundaries are 0.." +
                       std::to_string(net.num_layers()));
    check_lambda(sgm_lambda);
    BackpropPlan p;
    p.relu_modes.assign(net.layers.size(), ReluMode::Masked);
    for (int i = split_k; i < net.num_layers(); ++i) p.relu_modes[i] = ReluMode::Linear;
    p.split_k = split_k;
    p.renormalize = renormalize;
    p.sgm_lambda = sgm_lambda;
    return p;
  }

  /// Expert constructor: arbitrary per-layer assignment, no prefix invariant.
  static BackpropPlan custom(std::vector<ReluMode> modes, bool renormalize, float sgm_lambda) {
    check_lambda(sgm_lambda);
    BackpropPlan p;
    p.relu_modes = std::move(modes);
    p.split_k = 0;
    p.renormalize = renormalize;
    p.sgm_lambda = sgm_lambda;
    return p;
  }

  ReluMode mode(int layer_id) const {
    if (layer_id < 0 || layer_id >= static_cast<int>(relu_modes.size()))
      throw IndexError("plan has no entry for layer " + std::to_string(layer_id));
    return relu_modes[layer_id];
  }

 private:
  static void check_lambda(float v) {
    if (!(v > 0.0f && v <= 1.0f))
      throw ConfigError("sgm_lambda must lie in (0,1], got " + std::to_string(v));
  }
};

/// The spec'd single-ReLU backward: Masked -> g .* mask, Linear -> g.
inline Tensor relu_backward(const Tensor& g_in, const Tensor& mask, ReluMode mode) {
  if (mode == ReluMode::Linear) return g_in;
  if (!g_in.same_shape(mask))
    throw ShapeError("relu_backward " + shape_str(g_in.shape) + " vs mask " + shape_str(mask.shape));
  Tensor out(g_in.shape);
  for (size_t i = 0; i < g_in.numel(); ++i) out.data[i] = g_in.data[i] * mask.data[i];
  return out;
}

/// Gradient-norm ratio used to re-scale the linearized residual branch.
/// Returns 1 when the denominator vanishes (the scaled product is zero
/// regardless).
inline float compute_alpha(const Tensor& g_masked, const Tensor& g_linear) {
  if (!g_masked.same_shape(g_linear))
    throw ShapeError("compute_alpha " + shape_str(g_masked.shape) + " vs " + shape_str(g_linear.shape));
  const float denom = norm_l2(g_linear);
  if (denom < 1e-12f) return 1.0f;
  return norm_l2(g_masked) / denom;
}

// ---------------------------------------------------------------------------
// Weight-gradient storage (used by training; attacks pass nullptr)
// ---------------------------------------------------------------------------

struct LayerGrads {
  Tensor gW, gb;            // dense / conv
  Tensor ggamma, gbeta;     // batchnorm
  std::vector<LayerGrads> children;
};

struct GradStore {
  std::vector<LayerGrads> layers;
};

inline LayerGrads zero_grads_for(const Layer& l) {
  LayerGrads g;
  switch (l.kind) {
    case LayerKind::Dense:
    case LayerKind::Conv2d:
      g.gW = Tensor(l.W.shape);
      g.gb = Tensor(l.b.shape);
      break;
    case LayerKind::BatchNorm:
      g.ggamma = Tensor(l.gamma.shape);
      g.gbeta = Tensor(l.beta.shape);
      break;
    case LayerKind::Residual:
      for (const auto& c : l.children) g.children.push_back(zero_grads_for(c));
      break;
    default:
      break;
  }
  return g;
}

inline GradStore zero_grad_store(const Network& net) {
  GradStore gs;
  for (const auto& l : net.layers) gs.layers.push_back(zero_grads_for(l));
  return gs;
}

/// Per-residual-block diagnostics from one backward call, one value per
/// sample in the batch.
struct BlockBackwardRecord {
  int layer_id = -1;
  std::vector<float> alpha;
  std::vector<float> norm_masked;
  std::vector<float> norm_linear;
  std::vector<float> norm_contribution;  // l2 of lambda*alpha*g_linear per sample
};

struct BackwardStats {
  std::vector<BlockBackwardRecord> blocks;
};

namespace detail {

inline std::vector<float> per_sample_l2(const Tensor& t) {
  const int N = t.shape[0];
  const size_t stride = t.numel() / N;
  std::vector<float> out(N);
  for (int n = 0; n < N; ++n) {
    double s = 0;
    const float* p = t.data.data() + n * stride;
    for (size_t i = 0; i < stride; ++i) s += static_cast<double>(p[i]) * p[i];
    out[n] = static_cast<float>(std::sqrt(s));
  }
  return out;
}

inline Tensor dense_backward(const Layer& l, const TapeEntry& te, const Tensor& gy, LayerGrads* wg) {
  if (wg) {
    // gW[out,in] += gy^T * x
    MatMap(wg->gW.data.data(), l.out, l.in).noalias() +=
        ConstMatMap(gy.data.data(), gy.shape[0], l.out).transpose() *
        ConstMatMap(te.input.data.data(), gy.shape[0], l.in);
    for (int n = 0; n < gy.shape[0]; ++n)
      for (int o = 0; o < l.out; ++o) wg->gb.data[o] += gy.at2(n, o);
  }
  return matmul(gy, l.W);  // [N,out]x[out,in]
}

inline Tensor conv_backward(const Layer& l, const TapeEntry& te, const Tensor& gy, LayerGrads* wg) {
  const Tensor& x = te.input;
  const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  const int Ho = gy.shape[2], Wo = gy.shape[3];
  const int K = C * l.ksize * l.ksize;
  const int hw = Ho * Wo;
  Tensor gx({N, C, H, W});
  std::vector<float> col(static_cast<size_t>(K) * hw);
  const size_t gystride = static_cast<size_t>(l.out_ch) * hw;
  const size_t xstride = static_cast<size_t>(C) * H * W;
  std::vector<float> xcol;
  if (wg) xcol.resize(static_cast<size_t>(K) * hw);
  for (int n = 0; n < N; ++n) {
    ConstMatMap gy_n(gy.data.data() + n * gystride, l.out_ch, hw);
    MatMap(col.data(), K, hw).noalias() =
        ConstMatMap(l.W.data.data(), l.out_ch, K).transpose() * gy_n;
    col2im(col.data(), C, H, W, l.ksize, l.ksize, l.stride, l.pad, Ho, Wo,
           gx.data.data() + n * xstride);
    if (wg) {
      im2col(x.data.data() + n * xstride, C, H, W, l.ksize, l.ksize, l.stride, l.pad, Ho, Wo,
             xcol.data());
      MatMap(wg->gW.data.data(), l.out_ch, K).noalias() +=
          gy_n * ConstMatMap(xcol.data(), K, hw).transpose();
      for (int co = 0; co < l.out_ch; ++co) {
        double s = 0;
        const float* p = gy.data.data() + n * gystride + static_cast<size_t>(co) * hw;
        for (int i = 0; i < hw; ++i) s += p[i];
        wg->gb.data[co] += static_cast<float>(s);
      }
    }
  }
  return gx;
}

inline Tensor bn_backward(const Layer& l, const TapeEntry& te, const Tensor& gy, LayerGrads* wg) {
  int N, spatial;
  bn_geometry(gy, l.channels, N, spatial);
  const int C = l.channels;
  const bool train_stats = te.bn_xhat.numel() > 0;
  Tensor gx(gy.shape);
  if (!train_stats) {
    // Eval mode is a per-channel affine map.
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const float k = l.gamma.data[c] * te.bn_inv_std.data[c];
        const float* pg = gy.data.data() + (static_cast<size_t>(n) * C + c) * spatial;
        float* px = gx.data.data() + (static_cast<size_t>(n) * C + c) * spatial;
        for (int i = 0; i < spatial; ++i) px[i] = pg[i] * k;
      }
    if (wg) {
      for (int c = 0; c < C; ++c) {
        double dg = 0, db = 0;
        for (int n = 0; n < N; ++n) {
          const float* pg = gy.data.data() + (static_cast<size_t>(n) * C + c) * spatial;
          const float* pxin = te.input.data.data() + (static_cast<size_t>(n) * C + c) * spatial;
          for (int i = 0; i < spatial; ++i) {
            const float xhat = (pxin[i] - l.run_mean.data[c]) * te.bn_inv_std.data[c];
            dg += static_cast<double>(pg[i]) * xhat;
            db += pg[i];
          }
        }
        wg->ggamma.data[c] += static_cast<float>(dg);
        wg->gbeta.data[c] += static_cast<float>(db);
      }
    }
    return gx;
  }
  // Train mode: differentiate through the batch statistics.
  const double M = static_cast<double>(N) * spatial;
  for (int c = 0; c < C; ++c) {
    double sum_d = 0, sum_dx = 0;
    for (int n = 0; n < N; ++n) {
      const float* pg = gy.data.data() + (static_cast<size_t>(n) * C + c) * spatial;
      const float* ph = te.bn_xhat.data.data() + (static_cast<size_t>(n) * C + c) * spatial;
      for (int i = 0; i < spatial; ++i) {
        const double d = static_cast<double>(pg[i]) * l.gamma.data[c];
        sum_d += d;
        sum_dx += d * ph[i];
      }
    }
    if (wg) {
      double dg = 0, db = 0;
      for (int n = 0; n < N; ++n) {
        const float* pg = gy.data.data() + (static_cast<size_t>(n) * C + c) * spatial;
        const float* ph = te.bn_xhat.data.data() + (static_cast<size_t>(n) * C + c) * spatial;
        for (int i = 0; i < spatial; ++i) {
          dg += static_cast<double>(pg[i]) * ph[i];
          db += pg[i];
        }
      }
      wg->ggamma.data[c] += static_cast<float>(dg);
      wg->gbeta.data[c] += static_cast<float>(db);
    }
    const float is = te.bn_inv_std.data[c];
    for (int n = 0; n < N; ++n) {
      const float* pg = gy.data.data() + (static_cast<size_t>(n) * C + c) * spatial;
      const float* ph = te.bn_xhat.data.data() + (static_cast<size_t>(n) * C + c) * spatial;
      float* px = gx.data.data() + (static_cast<size_t>(n) * C + c) * spatial;
      for (int i = 0; i < spatial; ++i) {
        const double d = static_cast<double>(pg[i]) * l.gamma.data[c];
        px[i] = static_cast<float>(is * (d - sum_d / M - ph[i] * (sum_dx / M)));
      }
    }
  }
  return gx;
}

inline Tensor pool_backward(const Layer& l, const TapeEntry& te, const Tensor& gy) {
  const Tensor& x = te.input;
  if (l.kind == LayerKind::MaxPool) {
    Tensor gx(x.shape);
    for (size_t o = 0; o < gy.numel(); ++o) gx.data[te.argmax[o]] += gy.data[o];
    return gx;
  }
  const int N = x.shape[0];
  const std::vector<int> in_s = {x.shape[1], x.shape[2], x.shape[3]};
  Tensor gx(x.shape);
  const size_t out_stride = gy.numel() / N;
  const size_t in_stride = gx.numel() / N;
  Tensor slice({gy.shape[1], gy.shape[2], gy.shape[3]});
  for (int n = 0; n < N; ++n) {
    std::memcpy(slice.data.data(), gy.data.data() + n * out_stride, sizeof(float) * out_stride);
    Tensor gs = avgpool2d_backward(slice, l.pool_k, l.pool_stride, in_s);
    std::memcpy(gx.data.data() + n * in_stride, gs.data.data(), sizeof(float) * in_stride);
  }
  return gx;
}

/// Backward through the residual main branch with a fixed treatment of the
/// in-branch ReLUs.
inline Tensor branch_backward(const Layer& block, const TapeEntry& te, Tensor g, ReluMode relu_mode,
                              LayerGrads* wg) {
  for (int ci = static_cast<int>(block.children.size()) - 1; ci >= 0; --ci) {
    const Layer& c = block.children[ci];
    const TapeEntry& cte = te.children[ci];
    LayerGrads* cwg = wg ? &wg->children[ci] : nullptr;
    switch (c.kind) {
      case LayerKind::Dense:
        g = dense_backward(c, cte, g, cwg);
        break;
      case LayerKind::Conv2d:
        g = conv_backward(c, cte, g, cwg);
        break;
      case LayerKind::BatchNorm:
        g = bn_backward(c, cte, g, cwg);
        break;
      case LayerKind::ReLU:
        g = relu_backward(g, relu_mask_from_pre(cte.input), relu_mode);
        break;
      default:
        throw ShapeError("unsupported layer inside residual branch");
    }
  }
  return g;
}

/// Residual block backward under a plan. Standard treatment: mask the
/// post-addition ReLU, then skip + masked branch. Linear treatment: the
/// post-addition ReLU passes the gradient through, the branch is linearized
/// and re-scaled per sample by alpha = |g_masked| / |g_linear| (when
/// renormalize is on) and by the sgm decay lambda.
inline Tensor residual_backward(const Layer& block, const TapeEntry& te, const Tensor& g_in,
                                ReluMode block_mode, bool renormalize, float sgm_lambda,
                                LayerGrads* wg, BlockBackwardRecord* rec) {
  Tensor g_sum;
  if (block.post_relu && block_mode == ReluMode::Masked)
    g_sum = relu_backward(g_in, relu_mask_from_pre(te.pre), ReluMode::Masked);
  else
    g_sum = g_in;

  if (block_mode == ReluMode::Masked) {
    Tensor g_branch = branch_backward(block, te, g_sum, ReluMode::Masked, wg);
    return add(g_sum, g_branch);
  }

  Tensor g_linear = branch_backward(block, te, g_sum, ReluMode::Linear, wg);
  const int N = g_linear.shape[0];
  const size_t stride = g_linear.numel() / N;
  std::vector<float> alpha(N, 1.0f);
  std::vector<float> nm(N, 0.0f), nl = per_sample_l2(g_linear);
  if (renormalize) {
    Tensor g_masked = branch_backward(block, te, g_sum, ReluMode::Masked, nullptr);
    nm = per_sample_l2(g_masked);
    for (int n = 0; n < N; ++n) alpha[n] = nl[n] < 1e-12f ? 1.0f : nm[n] / nl[n];
  }
  Tensor g_out = g_sum;
  std::vector<float> ncontrib(N, 0.0f);
  for (int n = 0; n < N; ++n) {
    const float s = sgm_lambda * alpha[n];
    float* po = g_out.data.data() + n * stride;
    const float* pl = g_linear.data.data() + n * stride;
    double csq = 0;
    for (size_t i = 0; i < stride; ++i) {
      const float contrib = s * pl[i];
      po[i] += contrib;
      csq += static_cast<double>(contrib) * contrib;
    }
    ncontrib[n] = static_cast<float>(std::sqrt(csq));
  }
  if (rec) {
    rec->alpha = std::move(alpha);
    rec->norm_masked = std::move(nm);
    rec->norm_linear = std::move(nl);
    rec->norm_contribution = std::move(ncontrib);
  }
  return g_out;
}

}  // namespace detail

/// Reverse pass over the taped forward. `dout` seeds the gradient at the
/// network output ([c] / [N,c] for classifiers, or the final feature shape
/// for split views). Returns d(objective)/d(input) with the same batching as
/// the forward input. Weight gradients accumulate into `wgrads` when given.
inline Tensor backward(const Network& net, const ActivationTape& tape, const Tensor& dout,
                       const BackpropPlan& plan, GradStore* wgrads = nullptr,
                       BackwardStats* stats = nullptr) {
  if (tape.net_uid != net.uid)
    throw StaleTapeError("tape was produced by a different network (uid " +
                         std::to_string(tape.net_uid) + " vs " + std::to_string(net.uid) + ")");
  if (tape.entries.size() != net.layers.size())
    throw StaleTapeError("tape covers " + std::to_string(tape.entries.size()) + " layers, network has " +
                         std::to_string(net.layers.size()));
  if (static_cast<int>(plan.relu_modes.size()) != net.num_layers())
    throw ConfigError("plan covers " + std::to_string(plan.relu_modes.size()) + " layers, network has " +
                      std::to_string(net.num_layers()));

  Tensor g;
  if (dout.shape == tape.logits.shape) {
    g = dout;
  } else if (!tape.batched_input && dout.ndim() + 1 == tape.logits.ndim() &&
             detail::batched(1, dout.shape) == tape.logits.shape) {
    g = dout.reshaped(tape.logits.shape);
  } else {
    throw ShapeError("output gradient " + shape_str(dout.shape) + " does not match network output " +
                     shape_str(tape.logits.shape));
  }

  for (int i = net.num_layers() - 1; i >= 0; --i) {
    const Layer& l = net.layers[i];
    const TapeEntry& te = tape.entries[i];
    LayerGrads* wg = wgrads ? &wgrads->layers[i] : nullptr;
    switch (l.kind) {
      case LayerKind::Dense:
        g = detail::dense_backward(l, te, g, wg);
        break;
      case LayerKind::Conv2d:
        g = detail::conv_backward(l, te, g, wg);
        break;
      case LayerKind::BatchNorm:
        g = detail::bn_backward(l, te, g, wg);
        break;
      case LayerKind::ReLU:
        g = relu_backward(g, relu_mask_from_pre(te.input), plan.mode(i));
        break;
      case LayerKind::MaxPool:
      case LayerKind::AvgPool:
        g = detail::pool_backward(l, te, g);
        break;
      case LayerKind::Flatten:
        g = g.reshaped(te.input.shape);
        break;
      case LayerKind::Residual: {
        BlockBackwardRecord rec;
        rec.layer_id = i;
        g = detail::residual_backward(l, te, g, plan.mode(i), plan.renormalize, plan.sgm_lambda, wg,
                                      stats ? &rec : nullptr);
        if (stats && plan.mode(i) == ReluMode::Linear) stats->blocks.push_back(std::move(rec));
        break;
      }
    }
  }
  if (!tape.batched_input) return g.reshaped(detail::unbatched(g.shape));
  return g;
}

/// Input gradient of the cross-entropy loss at (x, y) under a plan; the
/// all-Masked plan yields the standard gradient.
inline Tensor loss_input_grad(const Network& net, const Tensor& x, int y, const BackpropPlan& plan,
                              BackwardStats* stats = nullptr) {
  ActivationTape tape = forward(net, x, false);
  if (tape.batched_input) throw ShapeError("loss_input_grad expects a single sample");
  Tensor logits = tape.logits.reshaped(detail::unbatched(tape.logits.shape));
  auto [loss, dlogits] = loss_ce(logits, y);
  (void)loss;
  return backward(net, tape, dlogits, plan, nullptr, stats);
}

}  // namespace linbp
