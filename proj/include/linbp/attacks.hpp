#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "linbp/backprop.hpp"
#include "linbp/graph.hpp"

namespace linbp {

/// Knobs shared by every iterated attack. The plain single-step, iterated,
/// random-start, momentum and input-diversity back-ends are all one loop
/// driven by these flags.
struct AttackSpec {
  float epsilon = 0.03f;       // l-inf budget, pixel units
  float step_size = 1.0f / 255.0f;
  int iterations = 100;
  bool targeted = false;
  int target_class = -1;
  bool random_init = false;    // uniform start inside the eps ball, then box clip
  float momentum_mu = 0.0f;    // 0 = off; accumulation uses l1-normalized gradients
  float diversity_prob = 0.0f; // 0 = off
  int diversity_low = 0;       // 0 = default ceil(0.9 * native size)
  int diversity_high = 0;      // 0 = native size
  uint64_t rng_seed = 0;
};

struct AdvResult {
  Tensor x_adv;
  float achieved_linf = 0.0f;
  bool source_fooled = false;
  int iterations_run = 0;
};

inline void validate_attack_spec(const AttackSpec& spec, const std::vector<int>& input_shape) {
  if (spec.epsilon < 0.0f || spec.epsilon > 1.0f)
    throw ConfigError("epsilon must lie in [0,1], got " + std::to_string(spec.epsilon));
  if (spec.iterations < 0) throw ConfigError("iterations must be >= 0");
  // step 0 is tolerated only for the degenerate zero-budget case (a single
  // eps-sized step with eps = 0 is still a well-defined no-op)
  if (spec.iterations > 0 && !(spec.step_size > 0.0f) && spec.epsilon > 0.0f)
    throw ConfigError("step size must be positive for iterated attacks");
  if (spec.step_size < 0.0f) throw ConfigError("step size must be >= 0");
  if (spec.momentum_mu < 0.0f) throw ConfigError("momentum must be >= 0");
  if (spec.diversity_prob < 0.0f || spec.diversity_prob > 1.0f)
    throw ConfigError("diversity probability must lie in [0,1]");
  if (spec.diversity_prob > 0.0f) {
    if (input_shape.size() != 3 || input_shape[1] != input_shape[2])
      throw ConfigError("input diversity needs square [C,H,W] inputs, got " + shape_str(input_shape));
    const int native = input_shape[1];
    const int lo = spec.diversity_low > 0 ? spec.diversity_low : (9 * native + 9) / 10;
    const int hi = spec.diversity_high > 0 ? spec.diversity_high : native;
    if (hi > native)
      throw ConfigError("diversity resize bound " + std::to_string(hi) + " exceeds native size " +
                        std::to_string(native));
    if (lo < 1 || lo > hi)
      throw ConfigError("diversity bounds must satisfy 1 <= low <= high, got [" +
                        std::to_string(lo) + "," + std::to_string(hi) + "]");
  }
  if (spec.targeted && spec.target_class < 0)
    throw ConfigError("targeted attack needs a target class");
}

// ---------------------------------------------------------------------------
// Input diversity: random nearest-neighbor resize + zero-pad at a random
// offset, with the exact adjoint for the gradient path.
// ---------------------------------------------------------------------------

struct DiversityTransform {
  bool active = false;
  int channels = 0, native = 0;
  int resized = 0, off_y = 0, off_x = 0;

  Tensor apply(const Tensor& x) const {
    if (!active) return x;
    Tensor out({channels, native, native});
    for (int c = 0; c < channels; ++c)
      for (int i = 0; i < resized; ++i) {
        const int sy = i * native / resized;
        for (int j = 0; j < resized; ++j) {
          const int sx = j * native / resized;
          out.data[(static_cast<size_t>(c) * native + off_y + i) * native + off_x + j] =
              x.data[(static_cast<size_t>(c) * native + sy) * native + sx];
        }
      }
    return out;
  }

  Tensor adjoint(const Tensor& g) const {
    if (!active) return g;
    Tensor out({channels, native, native});
    for (int c = 0; c < channels; ++c)
      for (int i = 0; i < resized; ++i) {
        const int sy = i * native / resized;
        for (int j = 0; j < resized; ++j) {
          const int sx = j * native / resized;
          out.data[(static_cast<size_t>(c) * native + sy) * native + sx] +=
              g.data[(static_cast<size_t>(c) * native + off_y + i) * native + off_x + j];
        }
      }
    return out;
  }
};

inline std::pair<Tensor, DiversityTransform> input_diversity(const Tensor& x, float p, int r_low,
                                                             int r_high, Rng& rng) {
  if (p < 0.0f || p > 1.0f) throw ConfigError("diversity probability must lie in [0,1]");
  if (x.ndim() != 3 || x.shape[1] != x.shape[2])
    throw ConfigError("input diversity needs square [C,H,W] inputs, got " + shape_str(x.shape));
  const int native = x.shape[1];
  if (r_high > native)
    throw ConfigError("diversity resize bound " + std::to_string(r_high) + " exceeds native size " +
                      std::to_string(native));
  if (r_low < 1 || r_low > r_high) throw ConfigError("diversity bounds must satisfy 1 <= low <= high");
  DiversityTransform t;
  if (p <= 0.0f || rng.uniform() >= p) return {x, t};
  t.active = true;
  t.channels = x.shape[0];
  t.native = native;
  t.resized = r_low + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(r_high - r_low + 1)));
  t.off_y = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(native - t.resized + 1)));
  t.off_x = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(native - t.resized + 1)));
  return {t.apply(x), t};
}

// ---------------------------------------------------------------------------
// The shared iterated loop
// ---------------------------------------------------------------------------

namespace detail {

/// ascent_grad(x) returns d(objective)/dx for the objective being maximized
/// (the untargeted CE loss, the negated targeted CE loss, or the feature
/// projection). fooled(x_adv) implements the per-mode success test.
inline AdvResult iterate_attack(const std::function<Tensor(const Tensor&)>& ascent_grad,
                                const std::function<bool(const Tensor&)>& fooled, const Tensor& x0,
                                const AttackSpec& spec, const std::vector<int>& input_shape) {
  validate_attack_spec(spec, input_shape);
  for (float v : x0.data)
    if (v < 0.0f || v > 1.0f)
      throw ConfigError("attack input must lie in [0,1]");
  AdvResult res;
  if (spec.iterations == 0) {
    res.x_adv = x0;
    res.source_fooled = fooled(x0);
    return res;
  }
  Rng rng(spec.rng_seed);
  Tensor x = x0;
  if (spec.random_init) {
    Tensor noise = rand_uniform(rng, x0.shape, -spec.epsilon, spec.epsilon);
    x = linf_project(add(x0, noise), x0, spec.epsilon);
  }
  const int native = input_shape.size() == 3 ? input_shape[1] : 0;
  const int d_low = spec.diversity_low > 0 ? spec.diversity_low : (9 * native + 9) / 10;
  const int d_high = spec.diversity_high > 0 ? spec.diversity_high : native;
  Tensor g_acc;
  for (int it = 0; it < spec.iterations; ++it) {
    Tensor g;
    if (spec.diversity_prob > 0.0f) {
      auto [x_in, t] = input_diversity(x, spec.diversity_prob, d_low, d_high, rng);
      g = t.adjoint(ascent_grad(x_in));
    } else {
      g = ascent_grad(x);
    }
    const Tensor* step_from = &g;
    if (spec.momentum_mu > 0.0f) {
      const float n1 = std::max(norm_l1(g), 1e-12f);
      if (g_acc.numel() == 0) g_acc = Tensor(g.shape);
      for (size_t i = 0; i < g.numel(); ++i)
        g_acc.data[i] = spec.momentum_mu * g_acc.data[i] + g.data[i] / n1;
      step_from = &g_acc;
    }
    Tensor step = sign(*step_from);
    x = linf_project(add(x, scale(step, spec.step_size)), x0, spec.epsilon);
  }
  res.x_adv = std::move(x);
  res.achieved_linf = norm_linf(sub(res.x_adv, x0));
  res.source_fooled = fooled(res.x_adv);
  res.iterations_run = spec.iterations;
  return res;
}

inline std::function<bool(const Tensor&)> fooled_check(const Network& net, int y,
                                                       const AttackSpec& spec) {
  if (spec.targeted)
    return [&net, t = spec.target_class](const Tensor& x) { return predict(net, x) == t; };
  return [&net, y](const Tensor& x) { return predict(net, x) != y; };
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Attack back-ends
// ---------------------------------------------------------------------------

/// Iterated sign-gradient attack under a backward plan; random_init,
/// momentum and diversity flags select the PGD / momentum / diverse-input
/// variants. iterations = 0 is a documented no-op.
inline AdvResult ifgsm(const Network& net, const BackpropPlan& plan, const Tensor& x, int y,
                       const AttackSpec& spec) {
  if (y < 0 || y >= net.num_classes)
    throw IndexError("label " + std::to_string(y) + " out of range for " +
                     std::to_string(net.num_classes) + " classes");
  if (spec.targeted && spec.target_class >= net.num_classes)
    throw IndexError("target class " + std::to_string(spec.target_class) + " out of range");
  const int y_used = spec.targeted ? spec.target_class : y;
  const float sgn = spec.targeted ? -1.0f : 1.0f;
  auto grad = [&net, &plan, y_used, sgn](const Tensor& xin) {
    return scale(loss_input_grad(net, xin, y_used, plan), sgn);
  };
  return detail::iterate_attack(grad, detail::fooled_check(net, y, spec), x, spec,
                                net.input_shape);
}

/// Single-step attack: one iteration with step size epsilon.
inline AdvResult fgsm(const Network& net, const BackpropPlan& plan, const Tensor& x, int y,
                      float epsilon, bool targeted = false, int target_class = -1) {
  AttackSpec spec;
  spec.epsilon = epsilon;
  spec.step_size = epsilon;
  spec.iterations = 1;
  spec.targeted = targeted;
  spec.target_class = target_class;
  return ifgsm(net, plan, x, y, spec);
}

/// Mean of the per-model CE input gradients, each under its own plan.
inline Tensor ensemble_grad(const std::vector<std::pair<const Network*, const BackpropPlan*>>& models,
                            const Tensor& x, int y) {
  if (models.empty()) throw ConfigError("ensemble_grad: empty model list");
  Tensor acc;
  for (const auto& [net, plan] : models) {
    Tensor g = loss_input_grad(*net, x, y, *plan);
    if (acc.numel() == 0)
      acc = std::move(g);
    else
      add_inplace(acc, g);
  }
  return scale(acc, 1.0f / static_cast<float>(models.size()));
}

/// Iterated attack driven by the ensemble-mean gradient. Fooling is judged
/// on the first listed model.
inline AdvResult ifgsm_ensemble(const std::vector<std::pair<const Network*, const BackpropPlan*>>& models,
                                const Tensor& x, int y, const AttackSpec& spec) {
  if (models.empty()) throw ConfigError("ifgsm_ensemble: empty model list");
  const int y_used = spec.targeted ? spec.target_class : y;
  const float sgn = spec.targeted ? -1.0f : 1.0f;
  auto grad = [&models, y_used, sgn](const Tensor& xin) {
    return scale(ensemble_grad(models, xin, y_used), sgn);
  };
  return detail::iterate_attack(grad, detail::fooled_check(*models[0].first, y, spec), x, spec,
                                models[0].first->input_shape);
}

/// Intermediate-level attack: phase 2 of a two-phase scheme. Builds the
/// guide direction v = h(x + r0) - h(x) from a baseline result, then runs
/// the iterated loop on the projection objective J = v^T (h(x') - h(x)),
/// whose gradient is the standard (masked) backward of h seeded with v.
inline AdvResult ila(const Network& net, int split_k, const Tensor& x, int y,
                     const AdvResult& baseline, const AttackSpec& spec) {
  auto [h_part, g_part] = split(net, split_k);
  (void)g_part;
  const Tensor feat_clean = forward_logits(h_part, x);
  const Tensor feat_base = forward_logits(h_part, baseline.x_adv);
  const Tensor v = sub(feat_base, feat_clean);
  const BackpropPlan h_plan = BackpropPlan::standard(h_part);
  auto grad = [&h_part, &h_plan, &v](const Tensor& xin) {
    ActivationTape tape = forward(h_part, xin, false);
    return backward(h_part, tape, v, h_plan);
  };
  return detail::iterate_attack(grad, detail::fooled_check(net, y, spec), x, spec,
                                net.input_shape);
}

/// Projection objective value, exposed for gradient checking.
inline double ila_objective(const Network& h_part, const Tensor& v, const Tensor& x_clean,
                            const Tensor& x_cur) {
  const Tensor f = forward_logits(h_part, x_cur);
  const Tensor f0 = forward_logits(h_part, x_clean);
  double s = 0;
  for (size_t i = 0; i < v.numel(); ++i)
    s += static_cast<double>(v.data[i]) * (f.data[i] - f0.data[i]);
  return s;
}

}  // namespace linbp
