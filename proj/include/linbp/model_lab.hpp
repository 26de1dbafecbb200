#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "linbp/backprop.hpp"
#include "linbp/data.hpp"
#include "linbp/graph.hpp"

namespace linbp {

// ---------------------------------------------------------------------------
// Surgery: structural ReLU removal (forward and backward become linear there)
// ---------------------------------------------------------------------------

struct SurgeryResult {
  Network net;
  int removed = 0;  // 0 means the request was a no-op
};

/// Removes every ReLU at layer id >= from_layer: plain ReLU layers are
/// deleted from the graph; residual blocks lose their post-addition ReLU
/// (the in-branch ReLU stays, mirroring which activation the linear backward
/// treatment drops). Parameters carry over unchanged.
inline SurgeryResult lins_remove_relus(const Network& net, int from_layer) {
  if (from_layer < 0 || from_layer > net.num_layers())
    throw SplitError("surgery boundary " + std::to_string(from_layer) +
                     " invalid; legal boundaries are 0.." + std::to_string(net.num_layers()));
  SurgeryResult res;
  res.net.input_shape = net.input_shape;
  res.net.num_classes = net.num_classes;
  for (int i = 0; i < net.num_layers(); ++i) {
    const Layer& l = net.layers[i];
    if (i >= from_layer && l.kind == LayerKind::ReLU) {
      ++res.removed;
      continue;
    }
    if (i >= from_layer && l.kind == LayerKind::Residual && l.post_relu) {
      Layer copy = l;
      copy.post_relu = false;
      ++res.removed;
      res.net.layers.push_back(std::move(copy));
      continue;
    }
    res.net.layers.push_back(l);
  }
  return res;
}

// ---------------------------------------------------------------------------
// SGD training
// ---------------------------------------------------------------------------

struct TrainSpec {
  int epochs = 10;
  int batch_size = 50;
  float learning_rate = 0.05f;
  std::vector<int> decay_epochs;  // empty -> {epochs/2, 3*epochs/4}
  float decay_factor = 0.1f;
  float weight_decay = 5e-4f;
  float momentum = 0.9f;
  int freeze_prefix = 0;  // params at layer id < freeze_prefix stay untouched
  bool augment = false;   // horizontal flip + 2px random crop
  uint64_t rng_seed = 1;
};

struct EpochMetrics {
  int epoch;
  float train_loss;
  double train_acc;
  double test_acc;  // -1 when no test split given
  float lr;
};

struct TrainResult {
  Network net;
  std::vector<EpochMetrics> metrics;
};

namespace detail {

inline void sgd_update_layer(Layer& l, const LayerGrads& g, LayerGrads& vel, float lr, float wd,
                             float mu) {
  auto step = [&](Tensor& p, const Tensor& grad, Tensor& v) {
    if (v.numel() == 0) v = Tensor(p.shape);
    for (size_t i = 0; i < p.numel(); ++i) {
      const float gt = grad.data[i] + wd * p.data[i];
      v.data[i] = mu * v.data[i] + gt;
      p.data[i] -= lr * v.data[i];
    }
  };
  switch (l.kind) {
    case LayerKind::Dense:
    case LayerKind::Conv2d:
      step(l.W, g.gW, vel.gW);
      step(l.b, g.gb, vel.gb);
      break;
    case LayerKind::BatchNorm:
      step(l.gamma, g.ggamma, vel.ggamma);
      step(l.beta, g.gbeta, vel.gbeta);
      break;
    case LayerKind::Residual:
      for (size_t c = 0; c < l.children.size(); ++c)
        sgd_update_layer(l.children[c], g.children[c], vel.children[c], lr, wd, mu);
      break;
    default:
      break;
  }
}

inline void apply_bn_updates(Network& net, const std::vector<BnStatUpdate>& updates) {
  for (const auto& u : updates) {
    Layer& top = net.layers[u.layer_id];
    Layer& l = u.child_idx < 0 ? top : top.children[u.child_idx];
    for (int c = 0; c < l.channels; ++c) {
      l.run_mean.data[c] =
          kBatchNormMomentum * l.run_mean.data[c] + (1.0f - kBatchNormMomentum) * u.batch_mean.data[c];
      l.run_var.data[c] =
          kBatchNormMomentum * l.run_var.data[c] + (1.0f - kBatchNormMomentum) * u.batch_var.data[c];
    }
  }
}

// Horizontal flip + zero-padded random crop, applied into dst.
inline void augment_sample(const float* src, float* dst, int C, int H, int W, Rng& rng) {
  const bool flip = rng.uniform() < 0.5f;
  const int pad = 2;
  const int dy = static_cast<int>(rng.uniform_int(2 * pad + 1)) - pad;
  const int dx = static_cast<int>(rng.uniform_int(2 * pad + 1)) - pad;
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const int sx0 = flip ? W - 1 - x : x;
        const int sy = y + dy, sx = sx0 + dx;
        dst[(static_cast<size_t>(c) * H + y) * W + x] =
            (sy >= 0 && sy < H && sx >= 0 && sx < W)
                ? src[(static_cast<size_t>(c) * H + sy) * W + sx]
                : 0.0f;
      }
}

}  // namespace detail

/// SGD with momentum and weight decay on the mean cross-entropy, standard
/// (all-Masked) backward, fixed shuffle order per seed. Layers with id below
/// freeze_prefix keep their parameters bit-for-bit.
inline TrainResult train(const Network& start, const Dataset& train_ds, const Dataset* test_ds,
                         const TrainSpec& spec) {
  if (train_ds.size() == 0) throw ConfigError("train: empty dataset");
  for (int y : train_ds.labels)
    if (y < 0 || y >= start.num_classes)
      throw IndexError("train: label " + std::to_string(y) + " out of range for " +
                       std::to_string(start.num_classes) + " classes");
  if (!(spec.learning_rate > 0)) throw ConfigError("train: learning rate must be positive");
  if (!(spec.decay_factor > 0 && spec.decay_factor <= 1))
    throw ConfigError("train: decay factor must lie in (0,1]");
  if (spec.batch_size <= 0) throw ConfigError("train: batch size must be positive");

  TrainResult out;
  out.net = start;
  Network& net = out.net;
  std::vector<int> decay_at = spec.decay_epochs;
  if (decay_at.empty() && spec.epochs >= 2) decay_at = {spec.epochs / 2, spec.epochs * 3 / 4};

  Rng rng(spec.rng_seed);
  GradStore velocity = zero_grad_store(net);
  const BackpropPlan plan = BackpropPlan::standard(net);
  const std::vector<int> img_shape = train_ds.image_shape();
  const size_t stride = Tensor::checked_numel(img_shape);
  const int C = img_shape[0], H = img_shape[1], W = img_shape[2];
  float lr = spec.learning_rate;

  std::vector<int> order(train_ds.size());
  for (int i = 0; i < train_ds.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < spec.epochs; ++epoch) {
    for (int d : decay_at)
      if (epoch == d) lr *= spec.decay_factor;
    rng.shuffle(order);
    double loss_sum = 0;
    int correct = 0;
    for (int bstart = 0; bstart < train_ds.size(); bstart += spec.batch_size) {
      const int bs = std::min(spec.batch_size, train_ds.size() - bstart);
      Tensor batch({bs, C, H, W});
      std::vector<int> labels(bs);
      for (int i = 0; i < bs; ++i) {
        const int idx = order[bstart + i];
        const float* src = train_ds.images.data.data() + idx * stride;
        float* dst = batch.data.data() + i * stride;
        if (spec.augment)
          detail::augment_sample(src, dst, C, H, W, rng);
        else
          std::copy(src, src + stride, dst);
        labels[i] = train_ds.labels[idx];
      }
      std::vector<BnStatUpdate> bn_updates;
      ActivationTape tape = forward(net, batch, true, &bn_updates);
      auto [loss, dlogits] = loss_ce_batch(tape.logits, labels);
      if (!std::isfinite(loss))
        throw TrainingError("loss diverged (non-finite) at epoch " + std::to_string(epoch));
      loss_sum += static_cast<double>(loss) * bs;
      const int c = tape.logits.shape[1];
      for (int i = 0; i < bs; ++i)
        correct += argmax_index(tape.logits.data.data() + static_cast<size_t>(i) * c, c) == labels[i];
      GradStore grads = zero_grad_store(net);
      backward(net, tape, dlogits, plan, &grads);
      detail::apply_bn_updates(net, bn_updates);
      for (int li = spec.freeze_prefix; li < net.num_layers(); ++li)
        detail::sgd_update_layer(net.layers[li], grads.layers[li], velocity.layers[li], lr,
                                 spec.weight_decay, spec.momentum);
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = static_cast<float>(loss_sum / train_ds.size());
    m.train_acc = static_cast<double>(correct) / train_ds.size();
    m.test_acc = test_ds ? accuracy(net, test_ds->images, test_ds->labels) : -1.0;
    m.lr = lr;
    out.metrics.push_back(m);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint format
//
//   magic "LBPF" | u8 version (=1) | u32le descriptor length | descriptor
//   | per-layer blobs in layer-id order, each u32le element count + floats
//
// The descriptor is line-based text: "arch 1", "input <dims...>",
// "classes <c>", one "layer <kind> <hyperparams...>" per layer, optional
// "meta <key> <value>" lines, "end". Residual layers serialize as
// "layer residual <channels> <mid> <post_relu>". Blob order per layer:
// dense/conv W then b; batchnorm gamma, beta, run_mean, run_var; residual
// concatenates its children in order. All floats little-endian IEEE-754.
// ---------------------------------------------------------------------------

constexpr uint8_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32_le(std::string& out, uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline uint32_t get_u32_le(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

inline void append_floats_le(std::string& out, const Tensor& t) {
  for (float f : t.data) {
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32_le(out, bits);
  }
}

inline void collect_layer_params(const Layer& l, std::vector<const Tensor*>& out) {
  switch (l.kind) {
    case LayerKind::Dense:
    case LayerKind::Conv2d:
      out.push_back(&l.W);
      out.push_back(&l.b);
      break;
    case LayerKind::BatchNorm:
      out.push_back(&l.gamma);
      out.push_back(&l.beta);
      out.push_back(&l.run_mean);
      out.push_back(&l.run_var);
      break;
    case LayerKind::Residual:
      for (const auto& c : l.children) collect_layer_params(c, out);
      break;
    default:
      break;
  }
}

inline void collect_layer_params_mut(Layer& l, std::vector<Tensor*>& out) {
  switch (l.kind) {
    case LayerKind::Dense:
    case LayerKind::Conv2d:
      out.push_back(&l.W);
      out.push_back(&l.b);
      break;
    case LayerKind::BatchNorm:
      out.push_back(&l.gamma);
      out.push_back(&l.beta);
      out.push_back(&l.run_mean);
      out.push_back(&l.run_var);
      break;
    case LayerKind::Residual:
      for (auto& c : l.children) collect_layer_params_mut(c, out);
      break;
    default:
      break;
  }
}

inline std::string layer_descriptor_line(const Layer& l) {
  std::ostringstream os;
  os << "layer " << layer_kind_name(l.kind);
  switch (l.kind) {
    case LayerKind::Dense:
      os << " " << l.in << " " << l.out;
      break;
    case LayerKind::Conv2d:
      os << " " << l.in_ch << " " << l.out_ch << " " << l.ksize << " " << l.stride << " " << l.pad;
      break;
    case LayerKind::BatchNorm:
      os << " " << l.channels;
      break;
    case LayerKind::MaxPool:
    case LayerKind::AvgPool:
      os << " " << l.pool_k << " " << l.pool_stride;
      break;
    case LayerKind::Residual:
      os << " " << l.channels << " " << l.children[0].out_ch << " " << (l.post_relu ? 1 : 0);
      break;
    default:
      break;
  }
  return os.str();
}

}  // namespace detail

using CheckpointMeta = std::map<std::string, std::string>;

inline std::string checkpoint_descriptor(const Network& net, const CheckpointMeta& meta) {
  std::ostringstream os;
  os << "arch 1\n";
  os << "input";
  for (int d : net.input_shape) os << " " << d;
  os << "\nclasses " << net.num_classes << "\n";
  for (const auto& l : net.layers) os << detail::layer_descriptor_line(l) << "\n";
  for (const auto& [k, v] : meta) os << "meta " << k << " " << v << "\n";
  os << "end\n";
  return os.str();
}

inline void save_checkpoint(const Network& net, const std::string& path,
                            const CheckpointMeta& meta = {}) {
  std::string out = "LBPF";
  out.push_back(static_cast<char>(kCheckpointVersion));
  const std::string desc = checkpoint_descriptor(net, meta);
  detail::put_u32_le(out, static_cast<uint32_t>(desc.size()));
  out += desc;
  for (const auto& l : net.layers) {
    std::vector<const Tensor*> params;
    detail::collect_layer_params(l, params);
    size_t count = 0;
    for (auto* t : params) count += t->numel();
    detail::put_u32_le(out, static_cast<uint32_t>(count));
    for (auto* t : params) detail::append_floats_le(out, *t);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write failed for " + path);
}

struct LoadedCheckpoint {
  Network net;
  CheckpointMeta meta;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw IoError("cannot open " + path);
  const std::streamsize len = f.tellg();
  f.seekg(0);
  std::vector<uint8_t> buf(static_cast<size_t>(len));
  if (len > 0 && !f.read(reinterpret_cast<char*>(buf.data()), len))
    throw IoError("short read on " + path);

  if (buf.size() < 9 || std::memcmp(buf.data(), "LBPF", 4) != 0)
    throw FormatError(path + ": missing LBPF magic");
  const uint8_t version = buf[4];
  if (version != kCheckpointVersion)
    throw VersionError(path + ": checkpoint version " + std::to_string(version) +
                       ", this build reads version " + std::to_string(kCheckpointVersion));
  const uint32_t desc_len = detail::get_u32_le(buf.data() + 5);
  if (buf.size() < 9 + static_cast<size_t>(desc_len))
    throw IntegrityError(path + ": truncated descriptor");
  const std::string desc(reinterpret_cast<const char*>(buf.data() + 9), desc_len);

  LoadedCheckpoint out;
  Network& net = out.net;
  bool saw_end = false;
  {
    std::istringstream is(desc);
    std::string line;
    bool saw_arch = false;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      std::istringstream ls(line);
      std::string tok;
      ls >> tok;
      if (tok == "arch") {
        int v = 0;
        ls >> v;
        if (v != 1) throw VersionError(path + ": descriptor version " + std::to_string(v) +
                                       ", this build reads version 1");
        saw_arch = true;
      } else if (tok == "input") {
        int d;
        while (ls >> d) net.input_shape.push_back(d);
      } else if (tok == "classes") {
        ls >> net.num_classes;
      } else if (tok == "layer") {
        std::string kind;
        ls >> kind;
        if (kind == "dense") {
          int in, outd;
          ls >> in >> outd;
          net.layers.push_back(Layer::dense(in, outd));
        } else if (kind == "conv2d") {
          int ic, oc, k, s, p;
          ls >> ic >> oc >> k >> s >> p;
          net.layers.push_back(Layer::conv(ic, oc, k, s, p));
        } else if (kind == "relu") {
          net.layers.push_back(Layer::relu());
        } else if (kind == "batchnorm") {
          int c;
          ls >> c;
          net.layers.push_back(Layer::batchnorm(c));
        } else if (kind == "maxpool" || kind == "avgpool") {
          int k, s;
          ls >> k >> s;
          net.layers.push_back(kind == "maxpool" ? Layer::maxpool(k, s) : Layer::avgpool(k, s));
        } else if (kind == "flatten") {
          net.layers.push_back(Layer::flatten());
        } else if (kind == "residual") {
          int c, mid, pr;
          ls >> c >> mid >> pr;
          net.layers.push_back(Layer::residual(c, mid, pr != 0));
        } else {
          throw FormatError(path + ": unknown layer kind '" + kind + "'");
        }
        if (!ls && !ls.eof()) throw FormatError(path + ": malformed layer line '" + line + "'");
      } else if (tok == "meta") {
        std::string key;
        ls >> key;
        std::string value;
        std::getline(ls, value);
        if (!value.empty() && value[0] == ' ') value.erase(0, 1);
        out.meta[key] = value;
      } else if (tok == "end") {
        saw_end = true;
        break;
      } else {
        throw FormatError(path + ": unknown descriptor line '" + line + "'");
      }
    }
    if (!saw_arch || !saw_end) throw FormatError(path + ": descriptor missing arch/end markers");
  }
  if (net.input_shape.empty() || net.num_classes <= 0)
    throw FormatError(path + ": descriptor lacks input shape or class count");

  size_t pos = 9 + desc_len;
  for (int li = 0; li < net.num_layers(); ++li) {
    if (pos + 4 > buf.size())
      throw IntegrityError(path + ": truncated before blob of layer " + std::to_string(li));
    const uint32_t count = detail::get_u32_le(buf.data() + pos);
    pos += 4;
    std::vector<Tensor*> params;
    detail::collect_layer_params_mut(net.layers[li], params);
    size_t expect = 0;
    for (auto* t : params) expect += t->numel();
    if (count != expect)
      throw IntegrityError(path + ": layer " + std::to_string(li) + " blob holds " +
                           std::to_string(count) + " floats, architecture needs " +
                           std::to_string(expect));
    if (pos + 4ull * count > buf.size())
      throw IntegrityError(path + ": truncated blob at layer " + std::to_string(li));
    for (auto* t : params)
      for (size_t i = 0; i < t->numel(); ++i) {
        const uint32_t bits = detail::get_u32_le(buf.data() + pos);
        std::memcpy(&t->data[i], &bits, 4);
        pos += 4;
      }
  }
  if (pos != buf.size())
    throw IntegrityError(path + ": " + std::to_string(buf.size() - pos) + " trailing bytes");
  infer_shapes(net);  // validate the reconstructed graph
  return out;
}

// ---------------------------------------------------------------------------
// Desk-scale model zoo
// ---------------------------------------------------------------------------

/// Plain conv net, three conv groups + single linear head: the attack
/// source. The head carries no ReLU, so a tail split linearizes conv
/// activations only.
inline Network make_convnet(const std::vector<int>& input_shape, int num_classes) {
  const int C = input_shape[0], H = input_shape[1], W = input_shape[2];
  Network net;
  net.input_shape = input_shape;
  net.num_classes = num_classes;
  auto& L = net.layers;
  auto group = [&L](int cin, int cout) {
    L.push_back(Layer::conv(cin, cout, 3, 1, 1));
    L.push_back(Layer::batchnorm(cout));
    L.push_back(Layer::relu());
    L.push_back(Layer::conv(cout, cout, 3, 1, 1));
    L.push_back(Layer::batchnorm(cout));
    L.push_back(Layer::relu());
    L.push_back(Layer::maxpool(2, 2));
  };
  group(C, 16);
  group(16, 32);
  group(32, 48);
  L.push_back(Layer::flatten());
  L.push_back(Layer::dense(48 * (H / 8) * (W / 8), num_classes));
  return net;
}

/// Boundary in make_convnet where the last two conv groups begin; the usual
/// linear-backward split point.
inline int convnet_tail_split() { return 7; }

/// Boundary where only the final conv group is linearized.
inline int convnet_last_group_split() { return 14; }

/// Wider, shallower conv victim with 5x5 kernels and average pooling.
inline Network make_convnet_wide(const std::vector<int>& input_shape, int num_classes) {
  const int C = input_shape[0], H = input_shape[1], W = input_shape[2];
  Network net;
  net.input_shape = input_shape;
  net.num_classes = num_classes;
  auto& L = net.layers;
  L.push_back(Layer::conv(C, 24, 5, 1, 2));
  L.push_back(Layer::batchnorm(24));
  L.push_back(Layer::relu());
  L.push_back(Layer::avgpool(2, 2));
  L.push_back(Layer::conv(24, 48, 5, 1, 2));
  L.push_back(Layer::batchnorm(48));
  L.push_back(Layer::relu());
  L.push_back(Layer::avgpool(2, 2));
  L.push_back(Layer::flatten());
  L.push_back(Layer::dense(48 * (H / 4) * (W / 4), 96));
  L.push_back(Layer::relu());
  L.push_back(Layer::dense(96, num_classes));
  return net;
}

/// Small residual victim: stem + residual blocks at two widths.
inline Network make_resnet_small(const std::vector<int>& input_shape, int num_classes) {
  const int C = input_shape[0], H = input_shape[1], W = input_shape[2];
  Network net;
  net.input_shape = input_shape;
  net.num_classes = num_classes;
  auto& L = net.layers;
  L.push_back(Layer::conv(C, 16, 3, 1, 1));
  L.push_back(Layer::batchnorm(16));
  L.push_back(Layer::relu());
  L.push_back(Layer::residual(16, 16));
  L.push_back(Layer::residual(16, 16));
  L.push_back(Layer::maxpool(2, 2));
  L.push_back(Layer::conv(16, 32, 3, 1, 1));
  L.push_back(Layer::batchnorm(32));
  L.push_back(Layer::relu());
  L.push_back(Layer::residual(32, 32));
  L.push_back(Layer::maxpool(2, 2));
  L.push_back(Layer::flatten());
  L.push_back(Layer::dense(32 * (H / 4) * (W / 4), num_classes));
  return net;
}

/// Fully-connected victim.
inline Network make_mlp(const std::vector<int>& input_shape, int num_classes) {
  int n = 1;
  for (int d : input_shape) n *= d;
  Network net;
  net.input_shape = input_shape;
  net.num_classes = num_classes;
  auto& L = net.layers;
  L.push_back(Layer::flatten());
  L.push_back(Layer::dense(n, 512));
  L.push_back(Layer::relu());
  L.push_back(Layer::dense(512, 256));
  L.push_back(Layer::relu());
  L.push_back(Layer::dense(256, num_classes));
  return net;
}

inline Network make_zoo_model(const std::string& arch, const std::vector<int>& input_shape,
                              int num_classes) {
  if (arch == "convnet") return make_convnet(input_shape, num_classes);
  if (arch == "convnet_wide") return make_convnet_wide(input_shape, num_classes);
  if (arch == "resnet_small") return make_resnet_small(input_shape, num_classes);
  if (arch == "mlp") return make_mlp(input_shape, num_classes);
  throw ConfigError("unknown architecture '" + arch +
                    "'; expected convnet|convnet_wide|resnet_small|mlp");
}

}  // namespace linbp
