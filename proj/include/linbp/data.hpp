#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "linbp/tensor.hpp"

namespace linbp {

/// Labeled image pool, pixels in [0,1], channels-first.
struct Dataset {
  Tensor images;             // [N, C, H, W]
  std::vector<int> labels;   // N entries, < num_classes
  std::string split_tag;
  int num_classes = 0;

  int size() const { return static_cast<int>(labels.size()); }

  std::vector<int> image_shape() const {
    return {images.shape[1], images.shape[2], images.shape[3]};
  }

  Tensor image(int i) const {
    const size_t stride = images.numel() / images.shape[0];
    Tensor t(image_shape());
    std::copy(images.data.begin() + i * stride, images.data.begin() + (i + 1) * stride,
              t.data.begin());
    return t;
  }
};

inline Dataset subset(const Dataset& ds, const std::vector<int>& indices, std::string tag) {
  Dataset out;
  out.num_classes = ds.num_classes;
  out.split_tag = std::move(tag);
  const size_t stride = ds.images.numel() / ds.images.shape[0];
  std::vector<int> shape = ds.images.shape;
  shape[0] = static_cast<int>(indices.size());
  out.images = Tensor(shape);
  out.labels.reserve(indices.size());
  for (size_t i = 0; i < indices.size(); ++i) {
    std::copy(ds.images.data.begin() + indices[i] * stride,
              ds.images.data.begin() + (indices[i] + 1) * stride,
              out.images.data.begin() + i * stride);
    out.labels.push_back(ds.labels[indices[i]]);
  }
  return out;
}

/// First train_per_class samples of every class go to the train split, the
/// rest to test. Deterministic given the dataset order.
inline std::pair<Dataset, Dataset> split_train_test(const Dataset& ds, int train_per_class) {
  std::vector<int> seen(ds.num_classes, 0);
  std::vector<int> train_idx, test_idx;
  for (int i = 0; i < ds.size(); ++i) {
    if (seen[ds.labels[i]]++ < train_per_class)
      train_idx.push_back(i);
    else
      test_idx.push_back(i);
  }
  return {subset(ds, train_idx, "train"), subset(ds, test_idx, "test")};
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary format: 3073-byte records, 1 label byte + 3072 pixel bytes
// (1024 R, 1024 G, 1024 B, each a row-major 32x32 plane), pixels scaled 1/255.
// ---------------------------------------------------------------------------

inline Dataset load_cifar10_bin(const std::vector<std::string>& paths, std::string tag = "train") {
  constexpr int kRecord = 3073;
  constexpr int kPixels = 3072;
  std::vector<uint8_t> raw;
  for (const auto& path : paths) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw IoError("cannot open " + path);
    const std::streamsize len = f.tellg();
    if (len % kRecord != 0)
      throw FormatError(path + ": length " + std::to_string(len) + " is not a multiple of " +
                        std::to_string(kRecord));
    f.seekg(0);
    const size_t off = raw.size();
    raw.resize(off + static_cast<size_t>(len));
    if (!f.read(reinterpret_cast<char*>(raw.data() + off), len))
      throw IoError("short read on " + path);
  }
  const int n = static_cast<int>(raw.size()) / kRecord;
  Dataset ds;
  ds.split_tag = std::move(tag);
  ds.num_classes = 10;
  ds.images = Tensor({n, 3, 32, 32});
  ds.labels.resize(n);
  for (int r = 0; r < n; ++r) {
    const uint8_t* rec = raw.data() + static_cast<size_t>(r) * kRecord;
    if (rec[0] > 9)
      throw FormatError("record " + std::to_string(r) + ": label " + std::to_string(rec[0]) +
                        " out of range 0-9");
    ds.labels[r] = rec[0];
    float* dst = ds.images.data.data() + static_cast<size_t>(r) * kPixels;
    for (int i = 0; i < kPixels; ++i) dst[i] = static_cast<float>(rec[1 + i]) / 255.0f;
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic class-conditional blob data
// ---------------------------------------------------------------------------

struct SyntheticParams {
  float pattern_norm = 0.85f;  // l2 norm of each class's mean offset pattern
  float noise_std = 0.30f;     // per-pixel gaussian noise
  int bumps_per_channel = 5;
  // Optional harder variants (defaults reproduce the plain pattern+noise
  // pool): several prototype patterns per class, and a per-sample circular
  // shift of the prototype before noise.
  int modes_per_class = 1;
  int jitter = 0;  // max |shift| in pixels along each axis
  // Optional shared-dictionary construction: prototypes become weighted
  // combinations of `parts` common bump patterns, and each sample jitters
  // the combination weights by part_noise before pixel noise is added.
  int parts = 0;  // 0 = direct per-class bumps
  float part_noise = 0.0f;
};

namespace detail {

// One smooth random bump field with unit l2 norm.
inline std::vector<float> bump_field(Rng& rng, int C, int H, int W, int bumps) {
  std::vector<float> f(static_cast<size_t>(C) * H * W, 0.0f);
  for (int c = 0; c < C; ++c)
    for (int b = 0; b < bumps; ++b) {
      const float cy = rng.uniform(0.0f, static_cast<float>(H));
      const float cx = rng.uniform(0.0f, static_cast<float>(W));
      const float s = rng.uniform(0.15f, 0.40f) * static_cast<float>(std::min(H, W));
      const float a = (rng.uniform() < 0.5f ? -1.0f : 1.0f) * rng.uniform(0.5f, 1.0f);
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const float dy = (y - cy) / s, dx = (x - cx) / s;
          f[(static_cast<size_t>(c) * H + y) * W + x] += a * std::exp(-0.5f * (dy * dy + dx * dx));
        }
    }
  double sq = 0;
  for (float v : f) sq += static_cast<double>(v) * v;
  const float inv = 1.0f / static_cast<float>(std::sqrt(std::max(sq, 1e-12)));
  for (auto& v : f) v *= inv;
  return f;
}

// Shared dictionary used when params.parts > 0.
inline std::vector<std::vector<float>> part_dictionary(uint64_t pattern_seed,
                                                       const std::vector<int>& shape,
                                                       const SyntheticParams& p) {
  std::vector<std::vector<float>> parts;
  parts.reserve(p.parts);
  for (int j = 0; j < p.parts; ++j) {
    Rng rng = Rng::for_stream(pattern_seed, 555 + static_cast<uint64_t>(j));
    parts.push_back(bump_field(rng, shape[0], shape[1], shape[2], 2));
  }
  return parts;
}

// Per-(class,mode) dictionary weights, unit norm.
inline std::vector<float> class_part_weights(uint64_t pattern_seed, int class_mode_index,
                                             int parts) {
  Rng rng = Rng::for_stream(pattern_seed, 7777 + static_cast<uint64_t>(class_mode_index));
  std::vector<float> w(parts);
  double sq = 0;
  for (auto& v : w) {
    v = rng.normal();
    sq += static_cast<double>(v) * v;
  }
  const float inv = 1.0f / static_cast<float>(std::sqrt(std::max(sq, 1e-12)));
  for (auto& v : w) v *= inv;
  return w;
}

}  // namespace detail

/// Per-class (per-mode) mean patterns around mid-gray, normalized to a fixed
/// l2 contrast: either direct gaussian-bump fields, or (parts > 0) weighted
/// combinations over a shared bump dictionary. Patterns depend only on
/// (pattern_seed, classes, shape, params), so pools drawn with different
/// rng_seed values share the class structure.
inline Tensor synthetic_class_patterns(int num_classes, const std::vector<int>& shape,
                                       uint64_t pattern_seed, const SyntheticParams& p = {}) {
  const int C = shape[0], H = shape[1], W = shape[2];
  const int modes = std::max(1, p.modes_per_class);
  Tensor patterns({num_classes * modes, C, H, W});
  const size_t stride = static_cast<size_t>(C) * H * W;
  std::vector<std::vector<float>> dict;
  if (p.parts > 0) dict = detail::part_dictionary(pattern_seed, shape, p);
  for (int k = 0; k < num_classes * modes; ++k) {
    std::vector<float> offset(stride, 0.0f);
    if (p.parts > 0) {
      const std::vector<float> w = detail::class_part_weights(pattern_seed, k, p.parts);
      for (int j = 0; j < p.parts; ++j)
        for (size_t i = 0; i < stride; ++i) offset[i] += w[j] * dict[j][i];
    } else {
      Rng rng = Rng::for_stream(pattern_seed, 7777 + static_cast<uint64_t>(k));
      offset = detail::bump_field(rng, C, H, W, p.bumps_per_channel);
    }
    double sq = 0;
    for (float v : offset) sq += static_cast<double>(v) * v;
    const float scale = p.pattern_norm / static_cast<float>(std::sqrt(std::max(sq, 1e-12)));
    float* dst = patterns.data.data() + static_cast<size_t>(k) * stride;
    for (size_t i = 0; i < stride; ++i) dst[i] = 0.5f + offset[i] * scale;
  }
  return patterns;
}

inline Dataset make_synthetic(int num_classes, int samples_per_class, const std::vector<int>& shape,
                              uint64_t rng_seed, const SyntheticParams& p = {},
                              std::string tag = "synthetic") {
  if (num_classes <= 0 || shape.size() != 3)
    throw ConfigError("make_synthetic: need positive classes and a [C,H,W] shape");
  const int C = shape[0], H = shape[1], W = shape[2];
  const int n = num_classes * samples_per_class;
  const int modes = std::max(1, p.modes_per_class);
  Dataset ds;
  ds.num_classes = num_classes;
  ds.split_tag = std::move(tag);
  // Shapes must stay positive; an empty pool keeps a single zero placeholder
  // image and no labels, and size() reports 0.
  ds.images = Tensor({std::max(n, 1), C, H, W});
  ds.labels.reserve(n);
  const Tensor patterns = synthetic_class_patterns(num_classes, shape, rng_seed, p);
  const size_t stride = static_cast<size_t>(C) * H * W;
  std::vector<std::vector<float>> dict;
  const bool structured = p.parts > 0 && p.part_noise > 0.0f;
  if (structured) dict = detail::part_dictionary(rng_seed, shape, p);
  const float zeta_scale = structured ? p.part_noise / std::sqrt(static_cast<float>(p.parts)) : 0.0f;
  std::vector<float> structured_offset(stride);
  Rng noise_rng = Rng::for_stream(rng_seed, 1);
  int row = 0;
  for (int k = 0; k < num_classes; ++k) {
    for (int s = 0; s < samples_per_class; ++s, ++row) {
      const int mode = modes > 1 ? static_cast<int>(noise_rng.uniform_int(modes)) : 0;
      const float* pat = patterns.data.data() + (static_cast<size_t>(k) * modes + mode) * stride;
      int dy = 0, dx = 0;
      if (p.jitter > 0) {
        dy = static_cast<int>(noise_rng.uniform_int(2 * p.jitter + 1)) - p.jitter;
        dx = static_cast<int>(noise_rng.uniform_int(2 * p.jitter + 1)) - p.jitter;
      }
      if (structured) {
        std::fill(structured_offset.begin(), structured_offset.end(), 0.0f);
        for (int j = 0; j < p.parts; ++j) {
          const float zeta = zeta_scale * noise_rng.normal();
          const float* part = dict[j].data();
          for (size_t i = 0; i < stride; ++i) structured_offset[i] += zeta * part[i];
        }
      }
      float* dst = ds.images.data.data() + static_cast<size_t>(row) * stride;
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x) {
            const int sy = ((y - dy) % H + H) % H;
            const int sx = ((x - dx) % W + W) % W;
            const size_t at = (static_cast<size_t>(c) * H + y) * W + x;
            float v = pat[(static_cast<size_t>(c) * H + sy) * W + sx] +
                      p.noise_std * noise_rng.normal();
            if (structured) v += structured_offset[at];
            dst[at] = std::min(std::max(v, 0.0f), 1.0f);
          }
      ds.labels.push_back(k);
    }
  }
  return ds;
}

}  // namespace linbp
