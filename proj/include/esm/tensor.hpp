#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <new>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "esm/errors.hpp"

namespace esm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

/// Storage is over-aligned so vectorized kernels take the same path no
/// matter where the allocator placed the buffer; otherwise reductions can
/// round differently from one run to the next.
inline constexpr std::size_t kTensorAlign = 64;

template <typename T>
struct AlignedAllocator {
  using value_type = T;
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(kTensorAlign)));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t(kTensorAlign)); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

/// Dense row-major array of floating values.
template <typename T>
class Tensor {
  static_assert(std::is_floating_point_v<T>);

 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  Tensor(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    check_length();
  }

  /// Like the data constructor but also rejects NaN/Inf entries.
  static Tensor checked(Shape shape, const std::vector<T>& data) {
    Tensor out(std::move(shape), data);
    if (!out.all_finite()) throw NumericError("non-finite value in tensor " + shape_str(out.shape_));
    return out;
  }

 private:
  using Storage = std::vector<T, AlignedAllocator<T>>;
  template <typename U>
  friend class Tensor;

  Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) { check_length(); }

  void check_length() const {
    if (shape_numel(shape_) != data_.size())
      throw ContractViolation("tensor data length " + std::to_string(data_.size()) +
                              " does not match shape " + shape_str(shape_));
  }

 public:
  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* raw() noexcept { return data_.data(); }
  const T* raw() const noexcept { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size())
      throw ContractViolation("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    typename Tensor<U>::Storage out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  Storage data_;
};

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* where) {
  if (a.shape() != b.shape())
    throw ContractViolation(std::string(where) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
}

/// a*x + b*y, elementwise. Coefficients are applied in the tensor's precision.
template <typename T>
Tensor<T> lincomb(T a, const Tensor<T>& x, T b, const Tensor<T>& y) {
  require_same_shape(x, y, "lincomb");
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = a * x[i] + b * y[i];
  return out;
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& x, const Tensor<T>& y) {
  return lincomb(T(1), x, T(1), y);
}

template <typename T>
Tensor<T> operator-(const Tensor<T>& x, const Tensor<T>& y) {
  return lincomb(T(1), x, T(-1), y);
}

template <typename T>
Tensor<T> operator*(T a, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = a * x[i];
  return out;
}

template <typename T>
double dot(const Tensor<T>& x, const Tensor<T>& y) {
  require_same_shape(x, y, "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += double(x[i]) * double(y[i]);
  return acc;
}

template <typename T>
double squared_norm(const Tensor<T>& x) {
  return dot(x, x);
}

template <typename T>
double norm(const Tensor<T>& x) {
  return std::sqrt(squared_norm(x));
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

template <typename T>
double mean_squared_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mean_squared_diff");
  if (a.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a[i]) - double(b[i]);
    acc += d * d;
  }
  return acc / double(a.size());
}

/// ||a - b|| / ||b||; falls back to the absolute error when b is zero.
template <typename T>
double rel_err(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "rel_err");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a[i]) - double(b[i]);
    num += d * d;
    den += double(b[i]) * double(b[i]);
  }
  return den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
}

/// Named (value, grad) pairs in insertion order.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
  };

  void add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw ContractViolation("duplicate parameter name '" + name + "'");
    index_.emplace(name, entries_.size());
    Tensor<T> grad(value.shape());
    entries_.push_back(Entry{name, std::move(value), std::move(grad)});
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Entry& entry(const std::string& name) { return entries_[lookup(name)]; }
  const Entry& entry(const std::string& name) const { return entries_[lookup(name)]; }

  Tensor<T>& value(const std::string& name) { return entry(name).value; }
  const Tensor<T>& value(const std::string& name) const { return entry(name).value; }
  Tensor<T>& grad(const std::string& name) { return entry(name).grad; }
  const Tensor<T>& grad(const std::string& name) const { return entry(name).grad; }

  std::vector<Entry>& entries() noexcept { return entries_; }
  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  void zero_grad() {
    for (auto& e : entries_) e.grad.fill(T(0));
  }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  double grad_norm() const {
    double acc = 0.0;
    for (const auto& e : entries_) acc += squared_norm(e.grad);
    return std::sqrt(acc);
  }

  /// FNV-1a over names and value bytes; used to certify that a store was not touched.
  std::uint64_t value_hash() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const unsigned char* p, std::size_t n) {
      for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
      }
    };
    for (const auto& e : entries_) {
      mix(reinterpret_cast<const unsigned char*>(e.name.data()), e.name.size());
      mix(reinterpret_cast<const unsigned char*>(e.value.raw()), e.value.size() * sizeof(T));
    }
    return h;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>());
    return out;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractViolation("unknown parameter '" + name + "'");
    return it->second;
  }

  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Seeded generator threaded explicitly through every stochastic operation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }

  double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }

  /// Uniform integer on the closed range [lo, hi].
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }

  template <typename T>
  Tensor<T> normal_tensor(const Shape& shape) {
    Tensor<T> out(shape);
    for (auto& v : out.data()) v = static_cast<T>(normal());
    return out;
  }

  template <typename T>
  Tensor<T> uniform_tensor(const Shape& shape, double lo, double hi) {
    Tensor<T> out(shape);
    for (auto& v : out.data()) v = static_cast<T>(uniform(lo, hi));
    return out;
  }

  /// Independent child stream; the same (seed, stream) always yields the same child.
  static Rng derive(std::uint64_t seed, std::uint64_t stream) {
    return Rng(splitmix(splitmix(seed) ^ (stream * 0x9E3779B97F4A7C15ull + 0x632BE59BD9B4E019ull)));
  }

  Rng split(std::uint64_t stream) const { return derive(seed_, stream); }

 private:
  static std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
  }

  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace esm
