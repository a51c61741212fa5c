// SPDX-License-Identifier: Apache-2.0
//
// Synthetic datasets and the mini-batch stream that feeds the trainer.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "nncheck/numstat.hpp"
#include "nncheck/rng.hpp"

namespace nncheck {

struct Dataset {
  Tensor inputs;   // n x features
  Tensor targets;  // n x outputs
  /// 0 for regression data.
  std::size_t num_classes = 0;

  std::size_t size() const { return inputs.rows(); }

  /// Class of row r (argmax of the one-hot target), 0 for regression.
  std::size_t label(std::size_t r) const {
    if (num_classes == 0) return 0;
    std::size_t best = 0;
    for (std::size_t j = 1; j < targets.cols(); ++j) {
      if (targets.at(r, j) > targets.at(r, best)) best = j;
    }
    return best;
  }

  Dataset subset(const std::vector<std::size_t>& rows) const {
    Dataset d;
    d.num_classes = num_classes;
    d.inputs = Tensor({rows.size(), inputs.cols()});
    d.targets = Tensor({rows.size(), targets.cols()});
    for (std::size_t k = 0; k < rows.size(); ++k) {
      for (std::size_t j = 0; j < inputs.cols(); ++j) d.inputs.at(k, j) = inputs.at(rows[k], j);
      for (std::size_t j = 0; j < targets.cols(); ++j) d.targets.at(k, j) = targets.at(rows[k], j);
    }
    return d;
  }
};

/// Gaussian blobs: class centres drawn on a sphere of radius `separation`,
/// points scattered around them with per-coordinate stddev `noise`. Rows are
/// interleaved by class.
inline Dataset make_blobs(std::size_t classes, std::size_t per_class, std::size_t features,
                          double separation, double noise, std::uint64_t seed) {
  if (classes < 2 || per_class < 1 || features < 1) throw UsageError("make_blobs: bad sizes");
  SplitMix64 rng(seed);
  std::vector<std::vector<double>> centres(classes, std::vector<double>(features));
  for (auto& c : centres) {
    double norm = 0.0;
    for (double& x : c) {
      x = rng.gaussian();
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (double& x : c) x *= separation / norm;
  }
  const std::size_t n = classes * per_class;
  Dataset d;
  d.num_classes = classes;
  d.inputs = Tensor({n, features});
  d.targets = Tensor({n, classes});
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t cls = r % classes;
    for (std::size_t j = 0; j < features; ++j) {
      d.inputs.at(r, j) = centres[cls][j] + rng.gaussian(0.0, noise);
    }
    d.targets.at(r, cls) = 1.0;
  }
  return d;
}

/// Digit-like vectors: each class has a random binary prototype of
/// side*side pixels; examples flip pixels with probability `flip` and add
/// small noise, clipped to [0, 1].
inline Dataset make_digits(std::size_t classes, std::size_t per_class, std::size_t side,
                           double flip, std::uint64_t seed) {
  if (classes < 2 || per_class < 1 || side < 1) throw UsageError("make_digits: bad sizes");
  SplitMix64 rng(seed);
  const std::size_t pixels = side * side;
  std::vector<std::vector<double>> protos(classes, std::vector<double>(pixels));
  for (auto& p : protos) {
    for (double& x : p) x = rng.bernoulli(0.3) ? 1.0 : 0.0;
  }
  const std::size_t n = classes * per_class;
  Dataset d;
  d.num_classes = classes;
  d.inputs = Tensor({n, pixels});
  d.targets = Tensor({n, classes});
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t cls = r % classes;
    for (std::size_t j = 0; j < pixels; ++j) {
      double x = protos[cls][j];
      if (rng.bernoulli(flip)) x = 1.0 - x;
      x += 0.05 * rng.gaussian();
      d.inputs.at(r, j) = std::clamp(x, 0.0, 1.0);
    }
    d.targets.at(r, cls) = 1.0;
  }
  return d;
}

/// Linear regression: y = offset + scale * (x . w) + noise, x ~ N(0, 1).
inline Dataset make_regression(std::size_t n, std::size_t features, std::size_t outputs,
                               double scale, double offset, double noise, std::uint64_t seed) {
  if (n < 1 || features < 1 || outputs < 1) throw UsageError("make_regression: bad sizes");
  SplitMix64 rng(seed);
  std::vector<double> w(features * outputs);
  for (double& x : w) x = rng.gaussian() / std::sqrt(static_cast<double>(features));
  Dataset d;
  d.inputs = Tensor({n, features});
  d.targets = Tensor({n, outputs});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < features; ++j) d.inputs.at(r, j) = rng.gaussian();
    for (std::size_t k = 0; k < outputs; ++k) {
      double acc = 0.0;
      for (std::size_t j = 0; j < features; ++j) acc += d.inputs.at(r, j) * w[k * features + j];
      d.targets.at(r, k) = offset + scale * acc + noise * rng.gaussian();
    }
  }
  return d;
}

struct Batch {
  Tensor inputs;
  Tensor targets;
};

/// Mini-batch iterator over a dataset. Each epoch starts with a
/// Fisher-Yates shuffle drawn from the caller's generator, unless one batch
/// covers the whole dataset (then rows keep their natural order and no
/// draws are consumed).
class BatchStream {
 public:
  /// max_epochs == 0 means unbounded.
  BatchStream(const Dataset& data, std::size_t batch_size, std::size_t max_epochs = 0)
      : data_(&data), batch_(std::min(batch_size, data.size())), max_epochs_(max_epochs) {
    if (batch_ < 1) throw UsageError("batch size must be >= 1");
    order_.resize(data.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  }

  std::optional<Batch> next(SplitMix64& rng) {
    const bool full = batch_ == data_->size();
    if (cursor_ == 0 || cursor_ + batch_ > order_.size()) {
      if (max_epochs_ != 0 && epoch_ == max_epochs_) return std::nullopt;
      ++epoch_;
      cursor_ = 0;
      if (!full) rng.shuffle(order_);
    }
    std::vector<std::size_t> rows(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                  order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + batch_));
    cursor_ += batch_;
    Dataset part = data_->subset(rows);
    if (cursor_ + batch_ > order_.size()) cursor_ = 0;
    return Batch{std::move(part.inputs), std::move(part.targets)};
  }

  std::size_t epoch() const { return epoch_; }

 private:
  const Dataset* data_;
  std::size_t batch_;
  std::size_t max_epochs_;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<std::size_t> order_;
};

}  // namespace nncheck
