#pragma once

// Toy training data. Images are kept as diffusion latents in [-1, 1]
// (latent = 2 * pixel - 1); pixel-space views are produced on demand.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "esm/tensor.hpp"

namespace esm {

template <typename T>
struct Dataset {
  int side = 0;
  int num_classes = 0;
  std::vector<std::string> class_names;
  std::vector<Tensor<T>> images;  // latents, shape [side, side]
  std::vector<int> labels;

  std::size_t size() const noexcept { return images.size(); }

  int class_index(const std::string& name) const {
    for (std::size_t i = 0; i < class_names.size(); ++i)
      if (class_names[i] == name) return int(i);
    throw ContractViolation("unknown class '" + name + "'");
  }
};

template <typename T>
Tensor<T> to_latent(const Tensor<T>& pixels) {
  Tensor<T> out(pixels.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(2) * pixels[i] - T(1);
  return out;
}

template <typename T>
Tensor<T> from_latent(const Tensor<T>& latent) {
  Tensor<T> out(latent.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (latent[i] + T(1)) / T(2);
  return out;
}

inline const std::array<const char*, 4> kShapeClasses = {"disk", "ring", "cross", "square"};

/// Pixel centre of (row, col) in normalized [-1, 1] canvas coordinates.
inline std::array<double, 2> pixel_center(int row, int col, int side) {
  return {-1.0 + (2.0 * col + 1.0) / side, -1.0 + (2.0 * row + 1.0) / side};
}

namespace detail {

inline bool shape_covers(int cls, double x, double y, double radius) {
  const double r = std::hypot(x, y);
  switch (cls) {
    case 0:
      return r <= radius;
    case 1:
      return r <= radius && r >= 0.6 * radius;
    case 2: {
      const double arm = 0.3 * radius;
      return (std::abs(x) <= arm && std::abs(y) <= radius) || (std::abs(y) <= arm && std::abs(x) <= radius);
    }
    default:
      return std::abs(x) <= 0.85 * radius && std::abs(y) <= 0.85 * radius;
  }
}

}  // namespace detail

/// One anti-aliased shape in pixel space [0, 1], shape [side, side].
template <typename T>
Tensor<T> render_shape(int cls, int side, double cx, double cy, double radius) {
  constexpr int kSuper = 4;
  Tensor<T> img({std::size_t(side), std::size_t(side)});
  const double px = 2.0 / side;
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) {
      const auto [x0, y0] = pixel_center(r, c, side);
      int hits = 0;
      for (int i = 0; i < kSuper; ++i)
        for (int j = 0; j < kSuper; ++j) {
          const double x = x0 + ((j + 0.5) / kSuper - 0.5) * px - cx;
          const double y = y0 + ((i + 0.5) / kSuper - 0.5) * px - cy;
          hits += detail::shape_covers(cls, x, y, radius) ? 1 : 0;
        }
      img[std::size_t(r * side + c)] = T(double(hits) / (kSuper * kSuper));
    }
  return img;
}

/// Procedural shape classes (disk, ring, cross, square) with small position/size jitter.
template <typename T>
Dataset<T> make_shape_dataset(int side, int per_class, Rng& rng) {
  require(side >= 8, "make_shape_dataset: side must be >= 8");
  require(per_class >= 1, "make_shape_dataset: per_class must be >= 1");
  Dataset<T> ds;
  ds.side = side;
  ds.num_classes = int(kShapeClasses.size());
  for (const char* name : kShapeClasses) ds.class_names.emplace_back(name);
  for (int k = 0; k < per_class; ++k)
    for (int cls = 0; cls < ds.num_classes; ++cls) {
      const double cx = rng.uniform(-0.08, 0.08);
      const double cy = rng.uniform(-0.08, 0.08);
      const double radius = rng.uniform(0.5, 0.62);
      ds.images.push_back(to_latent(render_shape<T>(cls, side, cx, cy, radius)));
      ds.labels.push_back(cls);
    }
  return ds;
}

/// Samples from N(mu, var_d * I), single class.
template <typename T>
Dataset<T> make_gaussian_dataset(const Tensor<T>& mu, double var_d, int count, Rng& rng) {
  require(var_d > 0.0, "make_gaussian_dataset: var_d must be positive");
  require(mu.shape().size() == 2 && mu.shape()[0] == mu.shape()[1], "make_gaussian_dataset: mu must be square");
  Dataset<T> ds;
  ds.side = int(mu.shape()[0]);
  ds.num_classes = 1;
  ds.class_names = {"gaussian"};
  const double sd = std::sqrt(var_d);
  for (int k = 0; k < count; ++k) {
    Tensor<T> x(mu.shape());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = T(double(mu[i]) + sd * rng.normal());
    ds.images.push_back(std::move(x));
    ds.labels.push_back(0);
  }
  return ds;
}

/// A smooth deterministic mean pattern for Gaussian data.
template <typename T>
Tensor<T> gaussian_mean_pattern(int side, double amplitude = 0.5) {
  Tensor<T> mu({std::size_t(side), std::size_t(side)});
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) {
      const auto [x, y] = pixel_center(r, c, side);
      mu[std::size_t(r * side + c)] = T(amplitude * std::sin(2.0 * x) * std::cos(1.5 * y));
    }
  return mu;
}

/// Mean image of one class in pixel space.
template <typename T>
Tensor<T> class_mean_pixels(const Dataset<T>& ds, int label) {
  require(label >= 0 && label < ds.num_classes, "class_mean_pixels: label out of range");
  Tensor<double> acc({std::size_t(ds.side), std::size_t(ds.side)});
  int n = 0;
  for (std::size_t k = 0; k < ds.size(); ++k) {
    if (ds.labels[k] != label) continue;
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += (double(ds.images[k][i]) + 1.0) / 2.0;
    ++n;
  }
  require(n > 0, "class_mean_pixels: class has no samples");
  Tensor<T> out(acc.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(acc[i] / n);
  return out;
}

}  // namespace esm
