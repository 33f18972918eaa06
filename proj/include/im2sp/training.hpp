#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "model.hpp"

namespace im2sp {

struct train_hyper {
  double lr = 1e-3;
  std::size_t warmup_steps = 100;
  std::size_t steps = 2000;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 1.0;

  kv_config to_kv() const {
    kv_config kv;
    kv.set("lr", lr);
    kv.set("warmup_steps", warmup_steps);
    kv.set("steps", steps);
    kv.set("batch_size", batch_size);
    kv.set("train_seed", seed);
    kv.set("beta1", beta1);
    kv.set("beta2", beta2);
    kv.set("adam_eps", adam_eps);
    kv.set("clip_norm", clip_norm);
    return kv;
  }

  static train_hyper from_kv(const kv_config &kv) { return from_kv(kv, train_hyper{}); }
  static train_hyper from_kv(const kv_config &kv, train_hyper h) {
    h.lr = kv.get_double("lr", h.lr);
    h.warmup_steps = kv.get_uint("warmup_steps", h.warmup_steps);
    h.steps = kv.get_uint("steps", h.steps);
    h.batch_size = kv.get_uint("batch_size", h.batch_size);
    h.seed = kv.get_uint("train_seed", h.seed);
    h.beta1 = kv.get_double("beta1", h.beta1);
    h.beta2 = kv.get_double("beta2", h.beta2);
    h.adam_eps = kv.get_double("adam_eps", h.adam_eps);
    h.clip_norm = kv.get_double("clip_norm", h.clip_norm);
    return h;
  }
};

/// Linear warmup to the peak rate at step == warmup_steps, then constant.
/// Steps count from 1.
inline double learning_rate(const train_hyper &h, std::size_t step) {
  if (h.warmup_steps == 0 || step >= h.warmup_steps)
    return h.lr;
  return h.lr * static_cast<double>(step) / static_cast<double>(h.warmup_steps);
}

/// Adam moment estimates, shaped like the parameters.
class adam_state {
public:
  explicit adam_state(const model_params &p) : m_(zeros_like(p)), v_(zeros_like(p)) {}

  void step(model_params &p, const model_params &g, const train_hyper &h, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(t_));
    std::vector<tensor *> params, ms, vs;
    std::vector<const tensor *> grads;
    for_each_tensor(p, [&](const std::string &name, tensor &t) { params.push_back(p.is_frozen(name) ? nullptr : &t); });
    for_each_tensor(g, [&](const std::string &, const tensor &t) { grads.push_back(&t); });
    for_each_tensor(m_, [&](const std::string &, tensor &t) { ms.push_back(&t); });
    for_each_tensor(v_, [&](const std::string &, tensor &t) { vs.push_back(&t); });
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!params[i])
        continue;
      auto &m = *ms[i];
      auto &v = *vs[i];
      const auto &gr = *grads[i];
      m = h.beta1 * m + (1.0 - h.beta1) * gr;
      v.array() = h.beta2 * v.array() + (1.0 - h.beta2) * gr.array().square();
      params[i]->array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + h.adam_eps);
    }
  }

private:
  model_params m_, v_;
  std::size_t t_ = 0;
};

struct train_result {
  model_params params;
  /// Mean batch loss before each update.
  std::vector<double> loss_trace;
};

/// Called after every step with (step, batch loss); returning false stops training.
using step_callback = std::function<bool(std::size_t, double)>;

inline double gradient_norm(const model_params &g) {
  double s = 0.0;
  for_each_tensor(g, [&](const std::string &, const tensor &t) { s += t.squaredNorm(); });
  return std::sqrt(s);
}

/// Adam training under teacher forcing. Batches are drawn from a seeded
/// permutation of the corpus that is reshuffled every epoch. Throws
/// numeric_error if the loss or gradient becomes non-finite.
inline train_result train(model_params params, std::span<const sequence_example> corpus, const train_hyper &h,
                          const step_callback &on_step = {}) {
  detail::require(!corpus.empty(), "train: empty corpus");
  detail::require(h.batch_size >= 1, "train: batch_size must be >= 1");
  detail::require(h.lr >= 0.0, "train: learning rate must be nonnegative");
  for (const auto &ex : corpus)
    detail::check_example(params.config, ex.image_tokens, ex.target);

  rng order_rng(derive_seed(h.seed, 1));
  rng dropout_rng(derive_seed(h.seed, 2));
  std::vector<std::size_t> order(corpus.size());
  std::size_t cursor = order.size();
  adam_state adam(params);
  train_result out{std::move(params), {}};
  std::vector<sequence_example> batch;
  batch.reserve(h.batch_size);

  for (std::size_t step = 1; step <= h.steps; ++step) {
    batch.clear();
    while (batch.size() < h.batch_size) {
      if (cursor == order.size()) {
        for (std::size_t i = 0; i < order.size(); ++i)
          order[i] = i;
        order_rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(corpus[order[cursor++]]);
    }
    auto g = compute_gradients(out.params, batch, &dropout_rng);
    const double norm = gradient_norm(g.grads);
    if (!std::isfinite(g.loss) || !std::isfinite(norm))
      throw numeric_error("training diverged at step " + std::to_string(step) + ": loss " + std::to_string(g.loss) +
                          ", gradient norm " + std::to_string(norm));
    if (h.clip_norm > 0.0 && norm > h.clip_norm) {
      const double s = h.clip_norm / norm;
      for_each_tensor(g.grads, [&](const std::string &, tensor &t) { t *= s; });
    }
    out.loss_trace.push_back(g.loss);
    adam.step(out.params, g.grads, h, learning_rate(h, step));
    if (on_step && !on_step(step, g.loss))
      break;
  }
  if (!all_finite(out.params))
    throw numeric_error("training produced non-finite parameters");
  return out;
}

/// Image-to-text pretraining: identical machinery with text-token targets.
inline train_result pretrain_text(model_params params, std::span<const sequence_example> corpus,
                                  const train_hyper &h, const step_callback &on_step = {}) {
  detail::require(params.config.output == output_kind::text, "pretrain_text: model must emit text tokens");
  return train(std::move(params), corpus, h, on_step);
}

/// First step (1-based) at which the mean of the trailing `window` losses
/// drops below threshold.
inline std::optional<std::size_t> steps_to_threshold(std::span<const double> trace, double threshold,
                                                     std::size_t window = 10) {
  double sum = 0.0;
  for (std::size_t i = 0; i < trace.size(); ++i) {
    sum += trace[i];
    if (i >= window)
      sum -= trace[i - window];
    const std::size_t n = std::min(i + 1, window);
    if (i + 1 >= window && sum / static_cast<double>(n) < threshold)
      return i + 1;
  }
  return std::nullopt;
}

} // namespace im2sp
