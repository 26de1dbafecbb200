#pragma once

#include <atomic>
#include <cassert>
#include <cstdint>
#include <string>
#include <vector>

#include "linbp/tensor.hpp"

namespace linbp {

enum class LayerKind { Dense, Conv2d, ReLU, BatchNorm, MaxPool, AvgPool, Flatten, Residual };

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::ReLU: return "relu";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::AvgPool: return "avgpool";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::Residual: return "residual";
  }
  return "?";
}

constexpr float kBatchNormEpsilon = 1e-5f;
constexpr float kBatchNormMomentum = 0.9f;  // running = 0.9*running + 0.1*batch

/// One node of the layer graph. A Residual layer owns its main-branch
/// children (conv, bn, relu, conv, bn); the skip branch is the identity and
/// `post_relu` marks the activation applied after the addition.
struct Layer {
  LayerKind kind;

  // Dense
  int in = 0, out = 0;
  // Conv2d
  int in_ch = 0, out_ch = 0, ksize = 0, stride = 1, pad = 0;
  // Pooling
  int pool_k = 0, pool_stride = 0;
  // BatchNorm
  int channels = 0;
  // Residual
  bool post_relu = true;
  std::vector<Layer> children;

  // Parameters
  Tensor W, b;                               // dense / conv
  Tensor gamma, beta, run_mean, run_var;     // batchnorm

  static Layer dense(int in, int out) {
    Layer l;
    l.kind = LayerKind::Dense;
    l.in = in;
    l.out = out;
    l.W = Tensor({out, in});
    l.b = Tensor({out});
    return l;
  }

  static Layer conv(int in_ch, int out_ch, int ksize, int stride = 1, int pad = 0) {
    Layer l;
    l.kind = LayerKind::Conv2d;
    l.in_ch = in_ch;
    l.out_ch = out_ch;
    l.ksize = ksize;
    l.stride = stride;
    l.pad = pad;
    l.W = Tensor({out_ch, in_ch, ksize, ksize});
    l.b = Tensor({out_ch});
    return l;
  }

  static Layer relu() {
    Layer l;
    l.kind = LayerKind::ReLU;
    return l;
  }

  static Layer batchnorm(int channels) {
    Layer l;
    l.kind = LayerKind::BatchNorm;
    l.channels = channels;
    l.gamma = Tensor::full({channels}, 1.0f);
    l.beta = Tensor({channels});
    l.run_mean = Tensor({channels});
    l.run_var = Tensor::full({channels}, 1.0f);
    return l;
  }

  static Layer maxpool(int k, int stride) {
    Layer l;
    l.kind = LayerKind::MaxPool;
    l.pool_k = k;
    l.pool_stride = stride;
    return l;
  }

  static Layer avgpool(int k, int stride) {
    Layer l;
    l.kind = LayerKind::AvgPool;
    l.pool_k = k;
    l.pool_stride = stride;
    return l;
  }

  static Layer flatten() {
    Layer l;
    l.kind = LayerKind::Flatten;
    return l;
  }

  /// Residual block: x + bn2(conv2(relu(bn1(conv1(x))))), 3x3 convs with
  /// stride 1 and pad 1 so the skip addition is shape-compatible. The
  /// post-addition ReLU can be absent (after surgery).
  static Layer residual(int channels, int mid_channels, bool with_post_relu = true) {
    Layer l;
    l.kind = LayerKind::Residual;
    l.channels = channels;
    l.post_relu = with_post_relu;
    l.children.push_back(Layer::conv(channels, mid_channels, 3, 1, 1));
    l.children.push_back(Layer::batchnorm(mid_channels));
    l.children.push_back(Layer::relu());
    l.children.push_back(Layer::conv(mid_channels, channels, 3, 1, 1));
    l.children.push_back(Layer::batchnorm(channels));
    return l;
  }

  bool has_params() const {
    return kind == LayerKind::Dense || kind == LayerKind::Conv2d ||
           kind == LayerKind::BatchNorm || kind == LayerKind::Residual;
  }
};

inline uint64_t next_network_uid() {
  static std::atomic<uint64_t> counter{1};
  return counter.fetch_add(1);
}

/// Ordered layer graph. Layer ids are the indices into `layers`; value
/// semantics (copies are deep), so a Network is immutable-by-convention once
/// built and safe to share across concurrent forwards.
struct Network {
  std::vector<Layer> layers;
  std::vector<int> input_shape;
  int num_classes = 0;
  uint64_t uid = next_network_uid();

  int num_layers() const { return static_cast<int>(layers.size()); }
};

/// Output shape of one layer for a single (unbatched) input shape.
inline std::vector<int> layer_output_shape(const Layer& l, const std::vector<int>& in) {
  switch (l.kind) {
    case LayerKind::Dense:
      if (in.size() != 1 || in[0] != l.in)
        throw ShapeError("dense expects [" + std::to_string(l.in) + "], got " + shape_str(in));
      return {l.out};
    case LayerKind::Conv2d: {
      if (in.size() != 3 || in[0] != l.in_ch)
        throw ShapeError("conv2d expects [" + std::to_string(l.in_ch) + ",H,W], got " + shape_str(in));
      const int Ho = conv_out_dim(in[1], l.ksize, l.stride, l.pad, "conv2d");
      const int Wo = conv_out_dim(in[2], l.ksize, l.stride, l.pad, "conv2d");
      return {l.out_ch, Ho, Wo};
    }
    case LayerKind::ReLU:
      return in;
    case LayerKind::BatchNorm:
      if (in.empty() || in[0] != l.channels)
        throw ShapeError("batchnorm expects leading channel dim " + std::to_string(l.channels) +
                         ", got " + shape_str(in));
      return in;
    case LayerKind::MaxPool:
    case LayerKind::AvgPool: {
      if (in.size() != 3) throw ShapeError("pool expects [C,H,W], got " + shape_str(in));
      const int Ho = conv_out_dim(in[1], l.pool_k, l.pool_stride, 0, "pool");
      const int Wo = conv_out_dim(in[2], l.pool_k, l.pool_stride, 0, "pool");
      return {in[0], Ho, Wo};
    }
    case LayerKind::Flatten: {
      int n = 1;
      for (int d : in) n *= d;
      return {n};
    }
    case LayerKind::Residual: {
      std::vector<int> cur = in;
      for (const Layer& c : l.children) cur = layer_output_shape(c, cur);
      if (cur != in)
        throw ShapeError("residual main branch maps " + shape_str(in) + " to " + shape_str(cur) +
                         "; skip addition needs matching shapes");
      return in;
    }
  }
  throw ShapeError("unknown layer kind");
}

/// Per-layer output shapes for the whole network; index i is the shape
/// after layer i. Also serves as construction-time validation.
inline std::vector<std::vector<int>> infer_shapes(const Network& net) {
  std::vector<std::vector<int>> shapes;
  std::vector<int> cur = net.input_shape;
  for (int i = 0; i < net.num_layers(); ++i) {
    try {
      cur = layer_output_shape(net.layers[i], cur);
    } catch (const ShapeError& e) {
      throw ShapeError("layer " + std::to_string(i) + " (" +
                       layer_kind_name(net.layers[i].kind) + "): " + e.what());
    }
    shapes.push_back(cur);
  }
  return shapes;
}

// He-normal initialization for conv/dense, identity-affine for batchnorm.
inline void init_layer_params(Layer& l, Rng& rng) {
  switch (l.kind) {
    case LayerKind::Dense: {
      const float std = std::sqrt(2.0f / static_cast<float>(l.in));
      for (auto& v : l.W.data) v = std * rng.normal();
      std::fill(l.b.data.begin(), l.b.data.end(), 0.0f);
      break;
    }
    case LayerKind::Conv2d: {
      const float std = std::sqrt(2.0f / static_cast<float>(l.in_ch * l.ksize * l.ksize));
      for (auto& v : l.W.data) v = std * rng.normal();
      std::fill(l.b.data.begin(), l.b.data.end(), 0.0f);
      break;
    }
    case LayerKind::Residual:
      for (auto& c : l.children) init_layer_params(c, rng);
      break;
    default:
      break;
  }
}

inline void init_params(Network& net, Rng& rng) {
  for (auto& l : net.layers) init_layer_params(l, rng);
}

// ---------------------------------------------------------------------------
// Forward pass with activation tape
// ---------------------------------------------------------------------------

/// Per-layer forward cache. `input` is the tensor fed to the layer (batched,
/// leading dim N). For ReLU layers the pre-activation is the input itself;
/// for Residual the `pre` field holds the skip+branch sum that feeds the
/// post-addition ReLU.
struct TapeEntry {
  Tensor input;
  Tensor pre;
  Tensor bn_xhat;                 // train-mode normalized values
  Tensor bn_inv_std;              // per-channel 1/sqrt(var+eps) used in forward
  std::vector<int32_t> argmax;    // maxpool routing, flat batched indices
  std::vector<TapeEntry> children;
};

/// Deferred batch-norm running-stat updates gathered during a train-mode
/// forward; the training loop owns the Network and applies them.
struct BnStatUpdate {
  int layer_id;
  int child_idx;  // -1 for a top-level batchnorm layer
  Tensor batch_mean;
  Tensor batch_var;
};

struct ActivationTape {
  uint64_t net_uid = 0;
  bool batched_input = false;
  std::vector<TapeEntry> entries;
  Tensor logits;  // [N, c] (or final feature map for non-classifier views)
};

inline Tensor relu_mask_from_pre(const Tensor& pre) {
  Tensor m(pre.shape);
  for (size_t i = 0; i < pre.numel(); ++i) m.data[i] = pre.data[i] > 0 ? 1.0f : 0.0f;
  return m;
}

namespace detail {

inline std::vector<int> unbatched(const std::vector<int>& s) {
  return std::vector<int>(s.begin() + 1, s.end());
}

inline std::vector<int> batched(int n, const std::vector<int>& s) {
  std::vector<int> out{n};
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

inline Tensor dense_forward(const Layer& l, const Tensor& x) {
  if (x.ndim() != 2 || x.shape[1] != l.in)
    throw ShapeError("dense expects [N," + std::to_string(l.in) + "], got " + shape_str(x.shape));
  Tensor y = matmul_nt(x, l.W);  // [N,out]
  for (int n = 0; n < y.shape[0]; ++n)
    for (int o = 0; o < y.shape[1]; ++o) y.at2(n, o) += l.b.data[o];
  return y;
}

inline Tensor conv_forward(const Layer& l, const Tensor& x) {
  if (x.ndim() != 4 || x.shape[1] != l.in_ch)
    throw ShapeError("conv2d expects [N," + std::to_string(l.in_ch) + ",H,W], got " +
                     shape_str(x.shape));
  const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  const int Ho = conv_out_dim(H, l.ksize, l.stride, l.pad, "conv2d");
  const int Wo = conv_out_dim(W, l.ksize, l.stride, l.pad, "conv2d");
  const int K = C * l.ksize * l.ksize;
  const int hw = Ho * Wo;
  // One GEMM over the whole batch: col layout [K x (N*hw)], sample-major cols.
  std::vector<float> col(static_cast<size_t>(K) * N * hw);
  std::vector<float> sample_col(static_cast<size_t>(K) * hw);
  const size_t xstride = static_cast<size_t>(C) * H * W;
  for (int n = 0; n < N; ++n) {
    im2col(x.data.data() + n * xstride, C, H, W, l.ksize, l.ksize, l.stride, l.pad, Ho, Wo,
           sample_col.data());
    for (int p = 0; p < K; ++p)
      std::memcpy(col.data() + (static_cast<size_t>(p) * N + n) * hw,
                  sample_col.data() + static_cast<size_t>(p) * hw, sizeof(float) * hw);
  }
  std::vector<float> out(static_cast<size_t>(l.out_ch) * N * hw);
  MatMap(out.data(), l.out_ch, N * hw).noalias() =
      ConstMatMap(l.W.data.data(), l.out_ch, K) * ConstMatMap(col.data(), K, N * hw);
  Tensor y({N, l.out_ch, Ho, Wo});
  for (int n = 0; n < N; ++n)
    for (int co = 0; co < l.out_ch; ++co) {
      const float bias = l.b.data[co];
      const float* src = out.data() + (static_cast<size_t>(co) * N + n) * hw;
      float* dst = y.data.data() + (static_cast<size_t>(n) * l.out_ch + co) * hw;
      for (int p = 0; p < hw; ++p) dst[p] = src[p] + bias;
    }
  return y;
}

// Channel geometry of a batched tensor for batchnorm: [N,C] or [N,C,H,W].
inline void bn_geometry(const Tensor& x, int channels, int& N, int& spatial) {
  if (x.ndim() == 2 && x.shape[1] == channels) {
    N = x.shape[0];
    spatial = 1;
  } else if (x.ndim() == 4 && x.shape[1] == channels) {
    N = x.shape[0];
    spatial = x.shape[2] * x.shape[3];
  } else {
    throw ShapeError("batchnorm(" + std::to_string(channels) + ") got " + shape_str(x.shape));
  }
}

inline Tensor bn_forward(const Layer& l, const Tensor& x, bool train_mode, TapeEntry& te,
                         std::vector<BnStatUpdate>* updates, int layer_id, int child_idx) {
  int N, spatial;
  bn_geometry(x, l.channels, N, spatial);
  const int C = l.channels;
  Tensor mean({C}), var({C});
  if (train_mode) {
    const double m_count = static_cast<double>(N) * spatial;
    for (int c = 0; c < C; ++c) {
      double s = 0;
      for (int n = 0; n < N; ++n) {
        const float* p = x.data.data() + (static_cast<size_t>(n) * C + c) * spatial;
        for (int i = 0; i < spatial; ++i) s += p[i];
      }
      mean.data[c] = static_cast<float>(s / m_count);
    }
    for (int c = 0; c < C; ++c) {
      double s = 0;
      for (int n = 0; n < N; ++n) {
        const float* p = x.data.data() + (static_cast<size_t>(n) * C + c) * spatial;
        for (int i = 0; i < spatial; ++i) {
          const double d = p[i] - mean.data[c];
          s += d * d;
        }
      }
      var.data[c] = static_cast<float>(s / m_count);  // biased variance
    }
    if (updates) updates->push_back({layer_id, child_idx, mean, var});
  } else {
    mean = l.run_mean;
    var = l.run_var;
  }
  Tensor inv_std({C});
  for (int c = 0; c < C; ++c) inv_std.data[c] = 1.0f / std::sqrt(var.data[c] + kBatchNormEpsilon);
  Tensor y(x.shape);
  Tensor xhat(x.shape);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const float* p = x.data.data() + (static_cast<size_t>(n) * C + c) * spatial;
      float* ph = xhat.data.data() + (static_cast<size_t>(n) * C + c) * spatial;
      float* py = y.data.data() + (static_cast<size_t>(n) * C + c) * spatial;
      const float mu = mean.data[c], is = inv_std.data[c];
      const float g = l.gamma.data[c], bb = l.beta.data[c];
      for (int i = 0; i < spatial; ++i) {
        ph[i] = (p[i] - mu) * is;
        py[i] = g * ph[i] + bb;
      }
    }
  if (train_mode) te.bn_xhat = std::move(xhat);
  te.bn_inv_std = std::move(inv_std);
  return y;
}

inline Tensor pool_forward(const Layer& l, const Tensor& x, TapeEntry& te) {
  if (x.ndim() != 4) throw ShapeError("pool expects [N,C,H,W], got " + shape_str(x.shape));
  const int N = x.shape[0];
  const std::vector<int> in_s = {x.shape[1], x.shape[2], x.shape[3]};
  Tensor sample({in_s});
  const size_t xstride = sample.numel();
  Tensor y;
  for (int n = 0; n < N; ++n) {
    std::memcpy(sample.data.data(), x.data.data() + n * xstride, sizeof(float) * xstride);
    if (l.kind == LayerKind::MaxPool) {
      std::vector<int32_t> am;
      Tensor ys = maxpool2d(sample, l.pool_k, l.pool_stride, am);
      if (n == 0) {
        y = Tensor(batched(N, ys.shape));
        te.argmax.assign(static_cast<size_t>(N) * ys.numel(), 0);
      }
      for (size_t i = 0; i < ys.numel(); ++i)
        te.argmax[n * ys.numel() + i] = static_cast<int32_t>(n * xstride) + am[i];
      std::memcpy(y.data.data() + n * ys.numel(), ys.data.data(), sizeof(float) * ys.numel());
    } else {
      Tensor ys = avgpool2d(sample, l.pool_k, l.pool_stride);
      if (n == 0) y = Tensor(batched(N, ys.shape));
      std::memcpy(y.data.data() + n * ys.numel(), ys.data.data(), sizeof(float) * ys.numel());
    }
  }
  return y;
}

inline Tensor layer_forward(const Layer& l, const Tensor& x, bool train_mode, TapeEntry& te,
                            std::vector<BnStatUpdate>* updates, int layer_id, int child_idx) {
  te.input = x;
  switch (l.kind) {
    case LayerKind::Dense:
      return dense_forward(l, x);
    case LayerKind::Conv2d:
      return conv_forward(l, x);
    case LayerKind::ReLU: {
      Tensor y(x.shape);
      for (size_t i = 0; i < x.numel(); ++i) y.data[i] = x.data[i] > 0 ? x.data[i] : 0.0f;
      return y;
    }
    case LayerKind::BatchNorm:
      return bn_forward(l, x, train_mode, te, updates, layer_id, child_idx);
    case LayerKind::MaxPool:
    case LayerKind::AvgPool:
      return pool_forward(l, x, te);
    case LayerKind::Flatten: {
      int n = 1;
      for (size_t i = 1; i < x.shape.size(); ++i) n *= x.shape[i];
      return x.reshaped({x.shape[0], n});
    }
    case LayerKind::Residual: {
      Tensor cur = x;
      te.children.resize(l.children.size());
      for (size_t ci = 0; ci < l.children.size(); ++ci)
        cur = layer_forward(l.children[ci], cur, train_mode, te.children[ci], updates, layer_id,
                            static_cast<int>(ci));
      if (!cur.same_shape(x))
        throw ShapeError("residual branch output " + shape_str(cur.shape) +
                         " vs block input " + shape_str(x.shape));
      Tensor sum = add(x, cur);
      te.pre = sum;
      if (!l.post_relu) return sum;
      Tensor y(sum.shape);
      for (size_t i = 0; i < sum.numel(); ++i) y.data[i] = sum.data[i] > 0 ? sum.data[i] : 0.0f;
      return y;
    }
  }
  throw ShapeError("unknown layer kind");
}

}  // namespace detail

/// Runs the network on x, recording every intermediate the backward pass may
/// need. Accepts a single input matching net.input_shape or a batch with one
/// extra leading dim. train_mode selects batch statistics for batchnorm (and
/// reports running-stat updates through `bn_updates`).
inline ActivationTape forward(const Network& net, const Tensor& x, bool train_mode = false,
                              std::vector<BnStatUpdate>* bn_updates = nullptr) {
  ActivationTape tape;
  tape.net_uid = net.uid;
  Tensor cur;
  if (x.shape == net.input_shape) {
    tape.batched_input = false;
    cur = x.reshaped(detail::batched(1, x.shape));
  } else if (x.ndim() == static_cast<int>(net.input_shape.size()) + 1 &&
             detail::unbatched(x.shape) == net.input_shape) {
    tape.batched_input = true;
    cur = x;
  } else {
    throw ShapeError("forward input " + shape_str(x.shape) + " does not match network input " +
                     shape_str(net.input_shape));
  }
  tape.entries.resize(net.layers.size());
  for (int i = 0; i < net.num_layers(); ++i) {
    try {
      cur = detail::layer_forward(net.layers[i], cur, train_mode, tape.entries[i], bn_updates, i, -1);
    } catch (const ShapeError& e) {
      throw ShapeError("layer " + std::to_string(i) + " (" +
                       layer_kind_name(net.layers[i].kind) + "): " + e.what());
    }
  }
  tape.logits = std::move(cur);
  return tape;
}

/// Logits for one input (squeezed back to rank matching the input).
inline Tensor forward_logits(const Network& net, const Tensor& x, bool train_mode = false) {
  ActivationTape tape = forward(net, x, train_mode);
  if (!tape.batched_input)
    return tape.logits.reshaped(detail::unbatched(tape.logits.shape));
  return tape.logits;
}

// ---------------------------------------------------------------------------
// Loss, prediction, accuracy
// ---------------------------------------------------------------------------

/// Numerically stabilized cross-entropy on one logit row. Returns the loss
/// and d(loss)/d(logits) = softmax - onehot(y). Internals run in double.
inline std::pair<float, Tensor> loss_ce(const Tensor& logits, int y) {
  if (logits.ndim() != 1)
    throw ShapeError("loss_ce expects rank-1 logits, got " + shape_str(logits.shape));
  const int c = logits.shape[0];
  if (y < 0 || y >= c)
    throw IndexError("label " + std::to_string(y) + " out of range [0," + std::to_string(c) + ")");
  double mx = logits.data[0];
  for (int i = 1; i < c; ++i) mx = std::max(mx, static_cast<double>(logits.data[i]));
  double sum = 0;
  for (int i = 0; i < c; ++i) sum += std::exp(static_cast<double>(logits.data[i]) - mx);
  const double log_z = mx + std::log(sum);
  const float loss = static_cast<float>(log_z - logits.data[y]);
  Tensor dlogits({c});
  for (int i = 0; i < c; ++i)
    dlogits.data[i] =
        static_cast<float>(std::exp(static_cast<double>(logits.data[i]) - log_z)) - (i == y ? 1.0f : 0.0f);
  return {loss, dlogits};
}

/// Mean cross-entropy over a batch of logit rows; dlogits carries the 1/N.
inline std::pair<float, Tensor> loss_ce_batch(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.ndim() != 2 || logits.shape[0] != static_cast<int>(labels.size()))
    throw ShapeError("loss_ce_batch logits " + shape_str(logits.shape) + " vs " +
                     std::to_string(labels.size()) + " labels");
  const int N = logits.shape[0], c = logits.shape[1];
  Tensor dlogits({N, c});
  double total = 0;
  for (int n = 0; n < N; ++n) {
    Tensor row({c});
    std::copy(logits.data.begin() + static_cast<size_t>(n) * c,
              logits.data.begin() + static_cast<size_t>(n + 1) * c, row.data.begin());
    auto [l, d] = loss_ce(row, labels[n]);
    total += l;
    for (int i = 0; i < c; ++i) dlogits.at2(n, i) = d.data[i] / static_cast<float>(N);
  }
  return {static_cast<float>(total / N), dlogits};
}

/// argmax with lowest-index tie-break.
inline int argmax_index(const float* v, int n) {
  int best = 0;
  for (int i = 1; i < n; ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

inline int predict(const Network& net, const Tensor& x) {
  Tensor logits = forward_logits(net, x);
  return argmax_index(logits.data.data(), static_cast<int>(logits.numel()));
}

/// Predicted classes for a batched image tensor, evaluated in chunks.
inline std::vector<int> predict_batch(const Network& net, const Tensor& images, int chunk = 256) {
  const int N = images.shape[0];
  const size_t stride = images.numel() / N;
  std::vector<int> preds(N);
  for (int start = 0; start < N; start += chunk) {
    const int n = std::min(chunk, N - start);
    Tensor batch(detail::batched(n, detail::unbatched(images.shape)));
    std::memcpy(batch.data.data(), images.data.data() + start * stride, sizeof(float) * n * stride);
    ActivationTape tape = forward(net, batch);
    const int c = tape.logits.shape[1];
    for (int i = 0; i < n; ++i)
      preds[start + i] = argmax_index(tape.logits.data.data() + static_cast<size_t>(i) * c, c);
  }
  return preds;
}

inline double accuracy(const Network& net, const Tensor& images, const std::vector<int>& labels) {
  if (labels.empty()) throw ConfigError("accuracy: empty dataset");
  if (images.shape[0] != static_cast<int>(labels.size()))
    throw ShapeError("accuracy: " + std::to_string(images.shape[0]) + " images vs " +
                     std::to_string(labels.size()) + " labels");
  const std::vector<int> preds = predict_batch(net, images);
  int correct = 0;
  for (size_t i = 0; i < labels.size(); ++i) correct += preds[i] == labels[i];
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

// ---------------------------------------------------------------------------
// Split f = g . h at a layer boundary
// ---------------------------------------------------------------------------

/// Cuts the network at boundary k (0..num_layers): h = layers [0,k),
/// g = layers [k,end). Both parts are standalone networks; running them in
/// sequence reproduces the original forward exactly.
inline std::pair<Network, Network> split(const Network& net, int k) {
  const int L = net.num_layers();
  if (k < 0 || k > L)
    throw SplitError("boundary " + std::to_string(k) + " invalid; legal boundaries are 0.." +
                     std::to_string(L));
  Network h, g;
  h.input_shape = net.input_shape;
  h.layers.assign(net.layers.begin(), net.layers.begin() + k);
  h.num_classes = 0;
  std::vector<int> mid = net.input_shape;
  {
    std::vector<int> cur = net.input_shape;
    for (int i = 0; i < k; ++i) cur = layer_output_shape(net.layers[i], cur);
    mid = cur;
  }
  g.input_shape = mid;
  g.layers.assign(net.layers.begin() + k, net.layers.end());
  g.num_classes = net.num_classes;
  return {std::move(h), std::move(g)};
}

}  // namespace linbp
