// SPDX-License-Identifier: Apache-2.0
//
// Dense tensor container and the descriptive statistics consumed by the
// verification routines.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nncheck {

/// Raised when an API is called with arguments that violate its contract.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Row-major dense array of doubles. The shape is fixed at construction;
/// element values may change.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0)
      : shape_(validated(std::move(shape))), data_(element_count(shape_), fill) {}

  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(validated(std::move(shape))), data_(std::move(data)) {
    if (data_.size() != element_count(shape_)) {
      throw UsageError("tensor data length does not match shape");
    }
  }

  /// One-dimensional tensor holding `values`.
  static Tensor vector(std::vector<double> values) {
    std::vector<std::size_t> shape{values.size()};
    return Tensor(std::move(shape), std::move(values));
  }

  static Tensor vector(std::initializer_list<double> values) {
    return vector(std::vector<double>(values));
  }

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const double> values() const noexcept { return data_; }
  std::span<double> values() noexcept { return data_; }
  const std::vector<double>& raw() const noexcept { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  /// Two-dimensional access; rows x cols layout.
  double at(std::size_t row, std::size_t col) const { return data_[row * shape_[1] + col]; }
  double& at(std::size_t row, std::size_t col) { return data_[row * shape_[1] + col]; }

  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const { return shape_.size() < 2 ? 1 : shape_[1]; }

  /// Bitwise equality of shape and every element (NaN payloads included).
  bool bit_equal(const Tensor& other) const noexcept {
    return shape_ == other.shape_ && data_.size() == other.data_.size() &&
           (data_.empty() ||
            std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0);
  }

 private:
  static std::size_t element_count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

  static std::vector<std::size_t> validated(std::vector<std::size_t> shape) {
    if (shape.empty()) throw UsageError("tensor shape must have at least one dimension");
    for (std::size_t d : shape) {
      if (d == 0) throw UsageError("tensor dimensions must be positive");
    }
    return shape;
  }

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

/// Descriptive statistics of one tensor. `min`, `max`, `abs_p25` and
/// `abs_p75` extend the basic quartiles so that summary-only telemetry can
/// still drive the range, divergence and gradient checks.
struct TensorSummary {
  double mean_abs = 0.0;
  double variance = 0.0;
  double p25 = 0.0;
  double p75 = 0.0;
  double min = 0.0;
  double max = 0.0;
  double abs_p25 = 0.0;
  double abs_p75 = 0.0;
  bool has_nan = false;
  bool has_inf = false;
  std::size_t count = 0;

  friend bool operator==(const TensorSummary& a, const TensorSummary& b) {
    auto same = [](double x, double y) {
      return std::memcmp(&x, &y, sizeof(double)) == 0 || (std::isnan(x) && std::isnan(y));
    };
    return same(a.mean_abs, b.mean_abs) && same(a.variance, b.variance) && same(a.p25, b.p25) &&
           same(a.p75, b.p75) && same(a.min, b.min) && same(a.max, b.max) &&
           same(a.abs_p25, b.abs_p25) && same(a.abs_p75, b.abs_p75) && a.has_nan == b.has_nan &&
           a.has_inf == b.has_inf && a.count == b.count;
  }
};

namespace detail {

inline void require_nonempty(std::span<const double> v, const char* op) {
  if (v.empty()) throw UsageError(std::string(op) + ": empty tensor");
}

inline bool any_nan(std::span<const double> v) {
  return std::any_of(v.begin(), v.end(), [](double x) { return std::isnan(x); });
}

inline bool any_inf(std::span<const double> v) {
  return std::any_of(v.begin(), v.end(), [](double x) { return std::isinf(x); });
}

inline double mean_abs(std::span<const double> v) {
  double sum = 0.0;
  for (double x : v) sum += std::fabs(x);
  return sum / static_cast<double>(v.size());
}

// Two-pass population variance. Infinite elements without NaN give +Inf.
inline double variance(std::span<const double> v) {
  if (any_nan(v)) return std::numeric_limits<double>::quiet_NaN();
  if (any_inf(v)) return std::numeric_limits<double>::infinity();
  double sum = 0.0;
  for (double x : v) sum += x;
  const double mean = sum / static_cast<double>(v.size());
  double sq = 0.0;
  for (double x : v) {
    const double d = x - mean;
    sq += d * d;
  }
  return sq / static_cast<double>(v.size());
}

// Linear interpolation over (n-1) ranks of an ascending, NaN-free sequence.
inline double percentile_sorted(std::span<const double> sorted, double q) {
  const double rank = (q / 100.0) * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const double frac = rank - static_cast<double>(lo);
  if (frac == 0.0 || lo + 1 >= sorted.size()) return sorted[lo];
  const double a = sorted[lo];
  const double b = sorted[lo + 1];
  if (a == b) return a;
  if (std::isinf(a) || std::isinf(b)) {
    // Straddling -Inf and +Inf picks the nearest rank.
    if (std::isinf(a) && std::isinf(b)) return frac < 0.5 ? a : b;
    return std::isinf(a) ? a : b;
  }
  return a + frac * (b - a);
}

inline void require_q(double q) {
  if (!std::isfinite(q) || q < 0.0 || q > 100.0) {
    throw UsageError("percentile: q must lie in [0, 100]");
  }
}

inline double percentile(std::span<const double> v, double q) {
  require_q(q);
  if (any_nan(v)) return std::numeric_limits<double>::quiet_NaN();
  std::vector<double> sorted(v.begin(), v.end());
  std::sort(sorted.begin(), sorted.end());
  return percentile_sorted(sorted, q);
}

}  // namespace detail

/// Arithmetic mean of |x| in flat-index order. NaN propagates.
inline double mean_abs(std::span<const double> v) {
  detail::require_nonempty(v, "mean_abs");
  return detail::mean_abs(v);
}
inline double mean_abs(const Tensor& t) { return mean_abs(t.values()); }

/// Population variance (divisor n).
inline double variance(std::span<const double> v) {
  detail::require_nonempty(v, "variance");
  return detail::variance(v);
}
inline double variance(const Tensor& t) { return variance(t.values()); }

/// Linear-interpolation percentile, q in [0, 100]. NaN present gives NaN.
inline double percentile(std::span<const double> v, double q) {
  detail::require_nonempty(v, "percentile");
  return detail::percentile(v, q);
}
inline double percentile(const Tensor& t, double q) { return percentile(t.values(), q); }

/// Element-wise absolute values.
inline std::vector<double> abs_values(std::span<const double> v) {
  std::vector<double> out(v.size());
  std::transform(v.begin(), v.end(), out.begin(), [](double x) { return std::fabs(x); });
  return out;
}

inline TensorSummary summarize(std::span<const double> v) {
  detail::require_nonempty(v, "summarize");
  TensorSummary s;
  s.count = v.size();
  s.has_nan = detail::any_nan(v);
  s.has_inf = detail::any_inf(v);
  s.mean_abs = detail::mean_abs(v);
  s.variance = detail::variance(v);
  if (s.has_nan) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    s.p25 = s.p75 = s.min = s.max = s.abs_p25 = s.abs_p75 = nan;
    return s;
  }
  std::vector<double> sorted(v.begin(), v.end());
  std::sort(sorted.begin(), sorted.end());
  s.p25 = detail::percentile_sorted(sorted, 25.0);
  s.p75 = detail::percentile_sorted(sorted, 75.0);
  s.min = sorted.front();
  s.max = sorted.back();
  std::vector<double> mags = abs_values(v);
  std::sort(mags.begin(), mags.end());
  s.abs_p25 = detail::percentile_sorted(mags, 25.0);
  s.abs_p75 = detail::percentile_sorted(mags, 75.0);
  return s;
}
inline TensorSummary summarize(const Tensor& t) { return summarize(t.values()); }

/// FNV-1a over the shape and the raw element bytes; equal digests are the
/// bit-identity test used for parameter snapshots.
inline std::uint64_t content_digest(const Tensor& t) noexcept {
  std::uint64_t h = 1469598103934665603ULL;
  auto feed = [&h](const void* p, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  for (std::size_t d : t.shape()) {
    const auto d64 = static_cast<std::uint64_t>(d);
    feed(&d64, sizeof d64);
  }
  if (!t.empty()) feed(t.raw().data(), t.size() * sizeof(double));
  return h;
}

}  // namespace nncheck
