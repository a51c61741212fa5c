// SPDX-License-Identifier: Apache-2.0
//
// Small deterministic feed-forward trainer with hand-written
// backpropagation. It exists to host the monitoring hooks and to reproduce
// faulty training configurations; it is not a general ML framework.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "nncheck/numstat.hpp"
#include "nncheck/rng.hpp"

namespace nncheck {

enum class Activation { sigmoid, tanh, relu, leaky_relu, elu, identity };

inline constexpr double kLeakySlope = 0.01;

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::sigmoid: return "sigmoid";
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
    case Activation::leaky_relu: return "leaky_relu";
    case Activation::elu: return "elu";
    case Activation::identity: return "identity";
  }
  return "?";
}

inline Activation activation_from_string(std::string_view s) {
  for (Activation a : {Activation::sigmoid, Activation::tanh, Activation::relu,
                       Activation::leaky_relu, Activation::elu, Activation::identity}) {
    if (to_string(a) == s) return a;
  }
  throw UsageError("unknown activation kind: " + std::string(s));
}

inline double activate(Activation a, double z) {
  switch (a) {
    case Activation::sigmoid: return 1.0 / (1.0 + std::exp(-z));
    case Activation::tanh: return std::tanh(z);
    case Activation::relu: return z > 0.0 ? z : 0.0;
    case Activation::leaky_relu: return z > 0.0 ? z : kLeakySlope * z;
    case Activation::elu: return z > 0.0 ? z : std::expm1(z);
    case Activation::identity: return z;
  }
  return z;
}

/// d activate / dz, given both the pre-activation z and the output a.
inline double activation_slope(Activation a, double z, double out) {
  switch (a) {
    case Activation::sigmoid: return out * (1.0 - out);
    case Activation::tanh: return 1.0 - out * out;
    case Activation::relu: return z > 0.0 ? 1.0 : 0.0;
    case Activation::leaky_relu: return z > 0.0 ? 1.0 : kLeakySlope;
    case Activation::elu: return z > 0.0 ? 1.0 : out + 1.0;
    case Activation::identity: return 1.0;
  }
  return 1.0;
}

/// True for activations with a derivative discontinuity at zero.
inline bool has_kink(Activation a) {
  return a == Activation::relu || a == Activation::leaky_relu || a == Activation::elu;
}

struct InitScheme {
  enum class Kind { gaussian, constant, gaussian_with_negative_bias_outliers };

  Kind kind = Kind::gaussian;
  double mean = 0.0;
  double stddev = 0.1;
  double value = 0.0;
  double outlier_prob = 0.0;
  double outlier_value = 0.0;

  static InitScheme gaussian(double mean, double stddev) {
    InitScheme s;
    s.kind = Kind::gaussian;
    s.mean = mean;
    s.stddev = stddev;
    return s;
  }
  static InitScheme constant(double value) {
    InitScheme s;
    s.kind = Kind::constant;
    s.value = value;
    return s;
  }
  /// Zero-mean gaussian where each element is replaced, with probability
  /// `prob`, by `outlier`.
  static InitScheme negative_outliers(double stddev, double prob, double outlier) {
    InitScheme s;
    s.kind = Kind::gaussian_with_negative_bias_outliers;
    s.stddev = stddev;
    s.outlier_prob = prob;
    s.outlier_value = outlier;
    return s;
  }

  void validate() const {
    if (!(stddev >= 0.0)) throw UsageError("init stddev must be >= 0");
    if (!(outlier_prob >= 0.0 && outlier_prob <= 1.0)) {
      throw UsageError("init outlier_prob must lie in [0, 1]");
    }
  }

  // Draw order: constant consumes nothing; gaussian consumes two draws;
  // the outlier variant consumes one bernoulli draw then two gaussian draws.
  double draw(SplitMix64& rng) const {
    switch (kind) {
      case Kind::constant: return value;
      case Kind::gaussian: return rng.gaussian(mean, stddev);
      case Kind::gaussian_with_negative_bias_outliers: {
        const bool outlier = rng.bernoulli(outlier_prob);
        const double base = rng.gaussian(0.0, stddev);
        return outlier ? outlier_value : base;
      }
    }
    return 0.0;
  }
};

struct LayerSpec {
  std::size_t fan_in = 1;
  std::size_t fan_out = 1;
  Activation activation = Activation::identity;
  InitScheme weight_init = InitScheme::gaussian(0.0, 0.1);
  InitScheme bias_init = InitScheme::constant(0.0);
  /// false excludes the layer's parameters from the optimizer update set.
  bool connected = true;
  /// Activation the monitor is told the layer uses. Differs from
  /// `activation` only when a fault is injected on purpose.
  std::optional<Activation> declared_activation;

  Activation declared() const { return declared_activation.value_or(activation); }
};

enum class LossKind { mse, cross_entropy, mutated_loss };

inline std::string_view to_string(LossKind k) {
  switch (k) {
    case LossKind::mse: return "mse";
    case LossKind::cross_entropy: return "cross_entropy";
    case LossKind::mutated_loss: return "mutated_loss";
  }
  return "?";
}

struct OptimizerSpec {
  enum class Kind { sgd, sgd_momentum };
  Kind kind = Kind::sgd;
  double momentum = 0.0;
};

/// Step-indexed learning-rate multiplier.
struct LrSchedule {
  enum class Kind { constant, geometric, custom };
  Kind kind = Kind::constant;
  /// geometric: multiplier(step) = rate^step.
  double rate = 1.0;
  std::function<double(std::int64_t)> custom;

  static LrSchedule geometric(double rate) {
    LrSchedule s;
    s.kind = Kind::geometric;
    s.rate = rate;
    return s;
  }
  static LrSchedule from(std::function<double(std::int64_t)> fn) {
    LrSchedule s;
    s.kind = Kind::custom;
    s.custom = std::move(fn);
    return s;
  }

  double multiplier(std::int64_t step) const {
    switch (kind) {
      case Kind::constant: return 1.0;
      case Kind::geometric: return std::pow(rate, static_cast<double>(step));
      case Kind::custom: return custom ? custom(step) : 1.0;
    }
    return 1.0;
  }
};

struct Regularization {
  /// anti_regularization is the sign-flipped l2 penalty: loss - lambda*|w|^2.
  enum class Kind { none, l1, l2, anti_regularization };
  Kind kind = Kind::none;
  double lambda = 0.0;
};

inline std::string_view to_string(Regularization::Kind k) {
  switch (k) {
    case Regularization::Kind::none: return "none";
    case Regularization::Kind::l1: return "l1";
    case Regularization::Kind::l2: return "l2";
    case Regularization::Kind::anti_regularization: return "anti_regularization";
  }
  return "?";
}

struct TrainConfig {
  LossKind loss = LossKind::mse;
  OptimizerSpec optimizer;
  double learning_rate = 0.01;
  LrSchedule lr_schedule;
  Regularization regularization;
  double dropout_prob = 0.0;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  /// Clamp logits into [-30, 30] before the softmax of cross_entropy.
  bool clamp_logits = true;

  void validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
      throw UsageError("learning_rate must be finite and > 0");
    }
    if (!(regularization.lambda >= 0.0)) throw UsageError("regularization lambda must be >= 0");
    if (!(dropout_prob >= 0.0 && dropout_prob < 1.0)) {
      throw UsageError("dropout_prob must lie in [0, 1)");
    }
    if (batch_size < 1) throw UsageError("batch_size must be >= 1");
  }
};

struct Layer {
  LayerSpec spec;
  Tensor weights;  // fan_out x fan_in
  Tensor biases;   // fan_out
  Tensor weight_velocity;
  Tensor bias_velocity;
};

/// A built network plus its training state. Confined to one training
/// context at a time.
struct Model {
  std::vector<Layer> layers;
  TrainConfig config;
  SplitMix64 rng;
  std::int64_t steps_done = 0;
  /// Splits gradient accumulation over worker threads; results then differ
  /// from the serial path in low-order bits.
  bool parallel = false;

  std::size_t input_width() const { return layers.front().spec.fan_in; }
  std::size_t output_width() const { return layers.back().spec.fan_out; }
};

/// Build and initialize a model. Parameters are drawn from a SplitMix64
/// seeded with cfg.seed, layer by layer: all weights row-major, then all
/// biases.
inline Model build_model(const std::vector<LayerSpec>& specs, const TrainConfig& cfg) {
  if (specs.empty()) throw UsageError("model needs at least one layer");
  cfg.validate();
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& s = specs[i];
    if (s.fan_in < 1 || s.fan_out < 1) throw UsageError("layer dimensions must be >= 1");
    if (i > 0 && specs[i - 1].fan_out != s.fan_in) {
      throw UsageError("layer " + std::to_string(i) + " fan_in does not match previous fan_out");
    }
    s.weight_init.validate();
    s.bias_init.validate();
  }
  Model m;
  m.config = cfg;
  m.rng = SplitMix64(cfg.seed);
  for (const auto& s : specs) {
    Layer layer;
    layer.spec = s;
    layer.weights = Tensor({s.fan_out, s.fan_in});
    layer.biases = Tensor({s.fan_out});
    for (double& w : layer.weights.values()) w = s.weight_init.draw(m.rng);
    for (double& b : layer.biases.values()) b = s.bias_init.draw(m.rng);
    layer.weight_velocity = Tensor({s.fan_out, s.fan_in});
    layer.bias_velocity = Tensor({s.fan_out});
    m.layers.push_back(std::move(layer));
  }
  return m;
}

struct ForwardPass {
  /// Input fed to each layer (post-dropout output of the previous one).
  std::vector<Tensor> inputs;
  std::vector<Tensor> pre_activations;
  /// Post-activation outputs, before dropout. batch x fan_out per layer.
  std::vector<Tensor> outputs;
  /// Inverted-dropout multipliers for hidden layers; empty when unused.
  std::vector<Tensor> masks;

  const Tensor& predictions() const { return outputs.back(); }
};

namespace detail {

inline ForwardPass run_forward(const Model& model, const Tensor& batch, SplitMix64* dropout_rng) {
  if (batch.rank() != 2 || batch.cols() != model.input_width()) {
    throw UsageError("batch feature width does not match the first layer fan_in");
  }
  const std::size_t n = batch.rows();
  const double p = model.config.dropout_prob;
  const bool dropout = dropout_rng != nullptr && p > 0.0;
  ForwardPass fp;
  Tensor current = batch;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const Layer& layer = model.layers[l];
    const std::size_t in = layer.spec.fan_in;
    const std::size_t out = layer.spec.fan_out;
    Tensor z({n, out});
    Tensor a({n, out});
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < out; ++j) {
        double acc = layer.biases[j];
        for (std::size_t i = 0; i < in; ++i) acc += current.at(r, i) * layer.weights.at(j, i);
        z.at(r, j) = acc;
        a.at(r, j) = activate(layer.spec.activation, acc);
      }
    }
    fp.inputs.push_back(std::move(current));
    const bool hidden = l + 1 < model.layers.size();
    Tensor next = a;
    if (dropout && hidden) {
      Tensor mask({n, out});
      for (std::size_t k = 0; k < mask.size(); ++k) {
        mask[k] = dropout_rng->bernoulli(p) ? 0.0 : 1.0 / (1.0 - p);
        next[k] *= mask[k];
      }
      fp.masks.push_back(std::move(mask));
    }
    fp.pre_activations.push_back(std::move(z));
    fp.outputs.push_back(std::move(a));
    current = std::move(next);
  }
  return fp;
}

struct LossEval {
  double value = 0.0;
  Tensor d_predictions;
};

inline LossEval evaluate_loss(const TrainConfig& cfg, const Tensor& pred, const Tensor& targets) {
  if (pred.shape() != targets.shape()) {
    throw UsageError("targets shape does not match prediction shape");
  }
  const std::size_t n = pred.rows();
  const std::size_t k = pred.cols();
  LossEval out{0.0, Tensor(pred.shape())};
  switch (cfg.loss) {
    case LossKind::mse: {
      const double scale = 1.0 / static_cast<double>(n * k);
      double sum = 0.0;
      for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - targets[i];
        sum += d * d;
        out.d_predictions[i] = 2.0 * d * scale;
      }
      out.value = sum * scale;
      break;
    }
    case LossKind::mutated_loss: {
      // Squared error replaced by the signed error.
      const double scale = 1.0 / static_cast<double>(n * k);
      double sum = 0.0;
      for (std::size_t i = 0; i < pred.size(); ++i) {
        sum += pred[i] - targets[i];
        out.d_predictions[i] = scale;
      }
      out.value = sum * scale;
      break;
    }
    case LossKind::cross_entropy: {
      constexpr double kClamp = 30.0;
      const double inv_n = 1.0 / static_cast<double>(n);
      double total = 0.0;
      std::vector<double> c(k);
      std::vector<double> e(k);
      for (std::size_t r = 0; r < n; ++r) {
        double denom = 0.0;
        double target_mass = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
          const double z = pred.at(r, j);
          c[j] = cfg.clamp_logits ? std::clamp(z, -kClamp, kClamp) : z;
          e[j] = std::exp(c[j]);
          denom += e[j];
          target_mass += targets.at(r, j);
        }
        const double log_denom = std::log(denom);
        for (std::size_t j = 0; j < k; ++j) {
          const double y = targets.at(r, j);
          if (y != 0.0) total -= y * (c[j] - log_denom);
          const double z = pred.at(r, j);
          const double pass = !cfg.clamp_logits || (z > -kClamp && z < kClamp) ? 1.0 : 0.0;
          out.d_predictions.at(r, j) = pass * inv_n * (e[j] / denom * target_mass - y);
        }
      }
      out.value = total * inv_n;
      break;
    }
  }
  return out;
}

inline double regularization_value(const Model& model) {
  const auto& reg = model.config.regularization;
  if (reg.kind == Regularization::Kind::none) return 0.0;
  double sum = 0.0;
  for (const Layer& layer : model.layers) {
    if (!layer.spec.connected) continue;
    for (double w : layer.weights.values()) {
      sum += reg.kind == Regularization::Kind::l1 ? std::fabs(w) : w * w;
    }
  }
  const double sign = reg.kind == Regularization::Kind::anti_regularization ? -1.0 : 1.0;
  return sign * reg.lambda * sum;
}

inline double regularization_slope(const Regularization& reg, double w) {
  switch (reg.kind) {
    case Regularization::Kind::none: return 0.0;
    case Regularization::Kind::l1: return reg.lambda * (w > 0.0 ? 1.0 : (w < 0.0 ? -1.0 : 0.0));
    case Regularization::Kind::l2: return 2.0 * reg.lambda * w;
    case Regularization::Kind::anti_regularization: return -2.0 * reg.lambda * w;
  }
  return 0.0;
}

// dW += delta^T * input over rows [begin, end).
inline void accumulate_rows(const Tensor& delta, const Tensor& input, std::size_t begin,
                            std::size_t end, Tensor& dw, Tensor& db) {
  const std::size_t out = delta.cols();
  const std::size_t in = input.cols();
  for (std::size_t r = begin; r < end; ++r) {
    for (std::size_t j = 0; j < out; ++j) {
      const double d = delta.at(r, j);
      db[j] += d;
      for (std::size_t i = 0; i < in; ++i) dw.at(j, i) += d * input.at(r, i);
    }
  }
}

inline void accumulate_parallel(const Tensor& delta, const Tensor& input, Tensor& dw, Tensor& db) {
  const std::size_t n = delta.rows();
  const std::size_t workers =
      std::clamp<std::size_t>(std::thread::hardware_concurrency(), 2, 8);
  const std::size_t chunks = std::min(workers, n);
  std::vector<Tensor> part_w(chunks, Tensor(dw.shape()));
  std::vector<Tensor> part_b(chunks, Tensor(db.shape()));
  {
    std::vector<std::jthread> pool;
    for (std::size_t c = 0; c < chunks; ++c) {
      pool.emplace_back([&, c] {
        accumulate_rows(delta, input, c * n / chunks, (c + 1) * n / chunks, part_w[c], part_b[c]);
      });
    }
  }
  for (std::size_t c = 0; c < chunks; ++c) {
    for (std::size_t i = 0; i < dw.size(); ++i) dw[i] += part_w[c][i];
    for (std::size_t i = 0; i < db.size(); ++i) db[i] += part_b[c][i];
  }
}

}  // namespace detail

/// Evaluation-mode forward pass (no dropout).
inline ForwardPass forward(const Model& model, const Tensor& batch) {
  return detail::run_forward(model, batch, nullptr);
}

/// Training-mode forward pass; dropout masks are drawn from the model PRNG.
inline ForwardPass forward_training(Model& model, const Tensor& batch) {
  return detail::run_forward(model, batch, &model.rng);
}

struct Gradients {
  std::vector<Tensor> weights;
  std::vector<Tensor> biases;
  /// Data loss plus regularization term.
  double loss_value = 0.0;
};

/// Gradients of (loss + regularization) for the recorded forward pass.
/// Disconnected layers get zero-filled gradients; backpropagation still
/// passes through them to earlier layers. A NaN loss is returned, not raised.
inline Gradients backward(const Model& model, const ForwardPass& fp, const Tensor& targets) {
  const auto loss = detail::evaluate_loss(model.config, fp.predictions(), targets);
  const std::size_t count = model.layers.size();
  Gradients g;
  g.loss_value = loss.value + detail::regularization_value(model);
  g.weights.resize(count);
  g.biases.resize(count);

  Tensor delta = loss.d_predictions;
  for (std::size_t idx = count; idx-- > 0;) {
    const Layer& layer = model.layers[idx];
    const Tensor& z = fp.pre_activations[idx];
    const Tensor& a = fp.outputs[idx];
    for (std::size_t k = 0; k < delta.size(); ++k) {
      delta[k] *= activation_slope(layer.spec.activation, z[k], a[k]);
    }
    Tensor dw(layer.weights.shape());
    Tensor db(layer.biases.shape());
    if (layer.spec.connected) {
      if (model.parallel && delta.rows() > 1) {
        detail::accumulate_parallel(delta, fp.inputs[idx], dw, db);
      } else {
        detail::accumulate_rows(delta, fp.inputs[idx], 0, delta.rows(), dw, db);
      }
      const auto& reg = model.config.regularization;
      if (reg.kind != Regularization::Kind::none) {
        for (std::size_t k = 0; k < dw.size(); ++k) {
          dw[k] += detail::regularization_slope(reg, layer.weights[k]);
        }
      }
    }
    g.weights[idx] = std::move(dw);
    g.biases[idx] = std::move(db);
    if (idx == 0) break;

    const std::size_t n = delta.rows();
    const std::size_t in = layer.spec.fan_in;
    Tensor prev({n, in});
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < layer.spec.fan_out; ++j) {
        const double d = delta.at(r, j);
        for (std::size_t i = 0; i < in; ++i) prev.at(r, i) += d * layer.weights.at(j, i);
      }
    }
    const std::size_t mask_idx = idx - 1;
    if (mask_idx < fp.masks.size()) {
      for (std::size_t k = 0; k < prev.size(); ++k) prev[k] *= fp.masks[mask_idx][k];
    }
    delta = std::move(prev);
  }
  return g;
}

/// Loss (plus regularization) of an evaluation-mode forward pass.
inline double objective(const Model& model, const Tensor& batch, const Tensor& targets) {
  const ForwardPass fp = forward(model, batch);
  return detail::evaluate_loss(model.config, fp.predictions(), targets).value +
         detail::regularization_value(model);
}

/// One optimizer update using lr * lr_schedule(step). Disconnected layers
/// are left untouched.
inline void apply_update(Model& model, const Gradients& g, std::int64_t step) {
  const auto& cfg = model.config;
  const double lr = cfg.learning_rate * cfg.lr_schedule.multiplier(step);
  const bool momentum = cfg.optimizer.kind == OptimizerSpec::Kind::sgd_momentum;
  const double mu = cfg.optimizer.momentum;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    Layer& layer = model.layers[l];
    if (!layer.spec.connected) continue;
    auto update = [&](Tensor& param, Tensor& velocity, const Tensor& grad) {
      for (std::size_t k = 0; k < param.size(); ++k) {
        if (momentum) {
          velocity[k] = mu * velocity[k] + grad[k];
          param[k] -= lr * velocity[k];
        } else {
          param[k] -= lr * grad[k];
        }
      }
    };
    update(layer.weights, layer.weight_velocity, g.weights[l]);
    update(layer.biases, layer.bias_velocity, g.biases[l]);
  }
}

struct LayerStep {
  Tensor weights;
  Tensor biases;
  Tensor weight_gradients;
  Tensor bias_gradients;
  Tensor pre_update_weights;
  Tensor pre_update_biases;
  /// Post-activation outputs, batch x fan_out.
  Tensor activations;
};

/// Everything observable about one completed training step.
struct StepResult {
  std::int64_t step = 0;
  double loss_value = 0.0;
  std::vector<LayerStep> layers;
};

/// forward, backward and update as one atomic step. Steps are numbered
/// from 1.
inline StepResult train_step(Model& model, const Tensor& batch, const Tensor& targets) {
  StepResult result;
  result.step = model.steps_done + 1;
  result.layers.resize(model.layers.size());
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    result.layers[l].pre_update_weights = model.layers[l].weights;
    result.layers[l].pre_update_biases = model.layers[l].biases;
  }
  ForwardPass fp = forward_training(model, batch);
  Gradients g = backward(model, fp, targets);
  apply_update(model, g, result.step);
  model.steps_done = result.step;

  result.loss_value = g.loss_value;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    LayerStep& ls = result.layers[l];
    ls.weights = model.layers[l].weights;
    ls.biases = model.layers[l].biases;
    ls.weight_gradients = std::move(g.weights[l]);
    ls.bias_gradients = std::move(g.biases[l]);
    ls.activations = std::move(fp.outputs[l]);
  }
  return result;
}

}  // namespace nncheck
