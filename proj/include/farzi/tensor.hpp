#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "farzi/errors.hpp"

namespace farzi {

// ----------------------------------------------------------------------------
// Tensor memory accounting
// ----------------------------------------------------------------------------

/// Per-thread byte counters for tensor payloads. Every BasicTensor allocates
/// through TrackingAllocator, so `peak()` bounds resident tensor memory.
class MemoryTracker {
 public:
  static std::size_t current() noexcept { return state().current; }
  static std::size_t peak() noexcept { return state().peak; }
  static void reset_peak() noexcept { state().peak = state().current; }

  static void on_alloc(std::size_t bytes) noexcept {
    auto& s = state();
    s.current += bytes;
    s.peak = std::max(s.peak, s.current);
  }
  static void on_free(std::size_t bytes) noexcept { state().current -= bytes; }

 private:
  struct Counters {
    std::size_t current = 0;
    std::size_t peak = 0;
  };
  static Counters& state() noexcept {
    thread_local Counters counters;
    return counters;
  }
};

/// Measures the peak tensor bytes allocated above the baseline at construction.
class PeakMemoryScope {
 public:
  PeakMemoryScope() : baseline_(MemoryTracker::current()) { MemoryTracker::reset_peak(); }
  std::size_t peak_bytes() const noexcept { return MemoryTracker::peak() - baseline_; }

 private:
  std::size_t baseline_;
};

template <class T>
struct TrackingAllocator {
  using value_type = T;

  TrackingAllocator() noexcept = default;
  template <class U>
  TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    MemoryTracker::on_alloc(n * sizeof(T));
    return std::allocator<T>{}.allocate(n);
  }
  void deallocate(T* p, std::size_t n) noexcept {
    MemoryTracker::on_free(n * sizeof(T));
    std::allocator<T>{}.deallocate(p, n);
  }

  template <class U>
  bool operator==(const TrackingAllocator<U>&) const noexcept {
    return true;
  }
};

// ----------------------------------------------------------------------------
// Tensor
// ----------------------------------------------------------------------------

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

/// Dense row-major n-dimensional array. The scalar type is `double` for
/// ordinary values and `Dual` when carrying forward-mode tangents.
template <class S>
class BasicTensor {
 public:
  using value_type = S;
  using Storage = std::vector<S, TrackingAllocator<S>>;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, S fill = S{}) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  BasicTensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_str(shape_));
    }
  }
  BasicTensor(Shape shape, std::initializer_list<S> values) : BasicTensor(std::move(shape), Storage(values)) {}

  static BasicTensor vector(std::span<const S> values) {
    return BasicTensor({values.size()}, Storage(values.begin(), values.end()));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  S* data() noexcept { return data_.data(); }
  const S* data() const noexcept { return data_.data(); }
  std::span<S> flat() noexcept { return data_; }
  std::span<const S> flat() const noexcept { return data_; }

  S& operator[](std::size_t i) noexcept { return data_[i]; }
  const S& operator[](std::size_t i) const noexcept { return data_[i]; }

  S& at(std::size_t r, std::size_t c) { return data_[r * shape_.at(1) + c]; }
  const S& at(std::size_t r, std::size_t c) const { return data_[r * shape_.at(1) + c]; }

  /// Same payload, new extents.
  BasicTensor reshaped(Shape shape) const {
    if (shape_numel(shape) != size()) {
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return BasicTensor(std::move(shape), data_);
  }

  bool operator==(const BasicTensor& other) const = default;

 private:
  Shape shape_;
  Storage data_;
};

using Tensor = BasicTensor<double>;

inline bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double x) { return std::isfinite(x); });
}

inline double max_abs(std::span<const double> values) {
  double m = 0.0;
  for (double x : values) m = std::max(m, std::abs(x));
  return m;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

// ----------------------------------------------------------------------------
// ParamVector
// ----------------------------------------------------------------------------

struct Segment {
  std::string name;
  Shape shape;
  std::size_t offset = 0;
  std::size_t size = 0;

  bool operator==(const Segment&) const = default;
};

/// Named parameter segments stored contiguously. The flat payload is the
/// concatenation of the segments in declaration order.
class ParamVector {
 public:
  ParamVector() = default;

  ParamVector(const std::vector<std::pair<std::string, Tensor>>& segments) {
    std::size_t total = 0;
    for (const auto& [name, t] : segments) {
      for (const auto& s : layout_) {
        if (s.name == name) throw ConfigError("duplicate parameter segment '" + name + "'");
      }
      layout_.push_back({name, t.shape(), total, t.size()});
      total += t.size();
    }
    values_ = Tensor({total});
    for (std::size_t i = 0; i < segments.size(); ++i) {
      const auto& src = segments[i].second.flat();
      std::copy(src.begin(), src.end(), values_.data() + layout_[i].offset);
    }
  }

  /// A vector with the same layout as `like` and the given flat payload.
  static ParamVector unflatten(const ParamVector& like, Tensor flat) {
    if (flat.size() != like.total_len()) {
      throw ShapeError("flat vector of length " + std::to_string(flat.size()) + " does not match " +
                       std::to_string(like.total_len()) + " parameters");
    }
    ParamVector out;
    out.layout_ = like.layout_;
    out.values_ = flat.reshaped({flat.size()});
    return out;
  }

  static ParamVector zeros_like(const ParamVector& like) { return unflatten(like, Tensor({like.total_len()})); }

  const Tensor& flatten() const noexcept { return values_; }
  std::span<double> flat() noexcept { return values_.flat(); }
  std::span<const double> flat() const noexcept { return values_.flat(); }

  std::size_t total_len() const noexcept { return values_.size(); }
  std::size_t num_segments() const noexcept { return layout_.size(); }
  const std::vector<Segment>& layout() const noexcept { return layout_; }
  const Segment& segment(std::size_t i) const { return layout_.at(i); }

  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < layout_.size(); ++i) {
      if (layout_[i].name == name) return i;
    }
    throw ConfigError("no parameter segment named '" + name + "'");
  }

  std::span<const double> segment_values(std::size_t i) const {
    const auto& s = layout_.at(i);
    return flat().subspan(s.offset, s.size);
  }
  std::span<double> segment_values(std::size_t i) {
    const auto& s = layout_.at(i);
    return flat().subspan(s.offset, s.size);
  }
  Tensor segment_tensor(std::size_t i) const {
    auto v = segment_values(i);
    return Tensor(layout_.at(i).shape, Tensor::Storage(v.begin(), v.end()));
  }
  Tensor segment_tensor(const std::string& name) const { return segment_tensor(index_of(name)); }

  bool conformal(const ParamVector& other) const noexcept { return layout_ == other.layout_; }
  void require_conformal(const ParamVector& other, const char* what) const {
    if (!conformal(other)) throw ShapeError(std::string(what) + ": parameter layouts differ");
  }

  /// Throws NumericError naming the first segment holding NaN/Inf.
  void require_finite(const std::string& context) const {
    for (std::size_t i = 0; i < layout_.size(); ++i) {
      if (!all_finite(segment_values(i))) {
        throw NumericError(layout_[i].name, context + ": non-finite value in segment");
      }
    }
  }

  bool operator==(const ParamVector& other) const = default;

 private:
  std::vector<Segment> layout_;
  Tensor values_;
};

}  // namespace farzi
