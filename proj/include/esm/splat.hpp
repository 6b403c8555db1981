#pragma once

// 2D Gaussian-splat scene and its differentiable rasterizer.
//
// Splats are composited back-to-front in index order (index 0 is furthest
// back) over a black background. The kernel is truncated at Mahalanobis
// radius 4 and shifted so it reaches zero continuously at the cutoff.

#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "esm/dataset.hpp"
#include "esm/ops.hpp"
#include "esm/tensor.hpp"

namespace esm {

struct CameraPose {
  double rotation = 0.0;
  double tx = 0.0;
  double ty = 0.0;
  double zoom = 1.0;
};

/// Random similarity transforms about the canvas centre.
struct PoseSampler {
  double max_rotation = std::numbers::pi;
  double max_shift = 0.05;
  double zoom_lo = 0.95;
  double zoom_hi = 1.05;

  CameraPose sample(Rng& rng) const {
    CameraPose p;
    p.rotation = max_rotation > 0 ? rng.uniform(-max_rotation, max_rotation) : 0.0;
    p.tx = max_shift > 0 ? rng.uniform(-max_shift, max_shift) : 0.0;
    p.ty = max_shift > 0 ? rng.uniform(-max_shift, max_shift) : 0.0;
    p.zoom = zoom_hi > zoom_lo ? rng.uniform(zoom_lo, zoom_hi) : zoom_lo;
    return p;
  }
};

inline constexpr double kKernelCutoffSq = 16.0;  // Mahalanobis radius 4

template <typename T>
struct SplatScene {
  static constexpr const char* kCenter = "center";          // [N, 2]
  static constexpr const char* kLogScale = "log_scale";     // [N, 2]
  static constexpr const char* kAngle = "angle";            // [N]
  static constexpr const char* kColor = "color";            // [N, C]
  static constexpr const char* kOpacity = "opacity_logit";  // [N]

  ParamStore<T> params;

  static SplatScene blank(std::size_t n, std::size_t channels = 1) {
    if (n == 0) throw ContractViolation("SplatScene: need at least one splat");
    require(channels == 1 || channels == 3, "SplatScene: channels must be 1 or 3");
    SplatScene s;
    s.params.add(kCenter, Tensor<T>({n, 2}));
    s.params.add(kLogScale, Tensor<T>({n, 2}));
    s.params.add(kAngle, Tensor<T>({n}));
    s.params.add(kColor, Tensor<T>({n, channels}));
    s.params.add(kOpacity, Tensor<T>({n}));
    return s;
  }

  std::size_t count() const { return params.value(kAngle).size(); }
  std::size_t channels() const { return params.value(kColor).shape()[1]; }

  Tensor<T>& center() { return params.value(kCenter); }
  Tensor<T>& log_scale() { return params.value(kLogScale); }
  Tensor<T>& angle() { return params.value(kAngle); }
  Tensor<T>& color() { return params.value(kColor); }
  Tensor<T>& opacity_logit() { return params.value(kOpacity); }
  const Tensor<T>& center() const { return params.value(kCenter); }
  const Tensor<T>& log_scale() const { return params.value(kLogScale); }
  const Tensor<T>& angle() const { return params.value(kAngle); }
  const Tensor<T>& color() const { return params.value(kColor); }
  const Tensor<T>& opacity_logit() const { return params.value(kOpacity); }

  template <typename U>
  SplatScene<U> cast() const {
    return SplatScene<U>{params.template cast<U>()};
  }
};

/// Image shape for a render: [side, side] for grayscale, [C, side, side] otherwise.
inline Shape image_shape(std::size_t channels, int side) {
  if (channels == 1) return {std::size_t(side), std::size_t(side)};
  return {channels, std::size_t(side), std::size_t(side)};
}

namespace detail {

struct SplatGeometry {
  double mx, my;      // transformed centre
  double sx, sy;      // transformed scales
  double cos_a, sin_a;  // of the transformed angle
  bool valid;
};

template <typename T>
SplatGeometry transform_splat(const SplatScene<T>& scene, std::size_t i, const CameraPose& pose) {
  const double cx = scene.center()[2 * i], cy = scene.center()[2 * i + 1];
  const double cr = std::cos(pose.rotation), sr = std::sin(pose.rotation);
  SplatGeometry g{};
  g.mx = pose.zoom * (cr * cx - sr * cy) + pose.tx;
  g.my = pose.zoom * (sr * cx + cr * cy) + pose.ty;
  g.sx = pose.zoom * std::exp(double(scene.log_scale()[2 * i]));
  g.sy = pose.zoom * std::exp(double(scene.log_scale()[2 * i + 1]));
  const double a = double(scene.angle()[i]) + pose.rotation;
  g.cos_a = std::cos(a);
  g.sin_a = std::sin(a);
  g.valid = std::isfinite(g.sx) && std::isfinite(g.sy) && g.sx > 1e-8 && g.sy > 1e-8 && std::isfinite(g.mx) &&
            std::isfinite(g.my);
  return g;
}

inline double kernel_floor() { return std::exp(-0.5 * kKernelCutoffSq); }

}  // namespace detail

template <typename T>
struct RenderCache {
  struct Fragment {
    std::uint32_t pixel;
    double ux, uy, q;
    std::array<double, 3> before;  // composite under this splat, per channel
  };
  std::vector<std::vector<Fragment>> fragments;  // per splat
  std::vector<double> composite;                 // unclamped, [C, side*side]
  int side = 0;
  std::size_t channels = 1;
  CameraPose pose;
};

template <typename T>
struct RenderResult {
  Tensor<T> image;
  RenderCache<T> cache;
  int skipped = 0;  // splats dropped for degenerate covariance
};

template <typename T>
RenderResult<T> render(const SplatScene<T>& scene, const CameraPose& pose, int side) {
  if (side < 8) throw ContractViolation("render: side must be >= 8");
  if (!(pose.zoom > 0.0)) throw ContractViolation("render: zoom must be positive");
  const std::size_t n = scene.count(), nc = scene.channels();
  const std::size_t npix = std::size_t(side) * std::size_t(side);
  RenderResult<T> out;
  auto& cache = out.cache;
  cache.side = side;
  cache.channels = nc;
  cache.pose = pose;
  cache.fragments.assign(n, {});
  cache.composite.assign(nc * npix, 0.0);
  const double floor_k = detail::kernel_floor();
  const double norm_k = 1.0 / (1.0 - floor_k);
  for (std::size_t i = 0; i < n; ++i) {
    const auto g = detail::transform_splat(scene, i, pose);
    if (!g.valid) {
      ++out.skipped;
      continue;
    }
    const double opacity = sigmoid(double(scene.opacity_logit()[i]));
    const double reach = 4.0 * std::max(g.sx, g.sy);
    // pixel centre x = -1 + (2c + 1)/side  =>  c = ((x + 1) side - 1) / 2
    auto to_index = [side](double v) {
      return int(std::clamp(((v + 1.0) * side - 1.0) / 2.0, -1.0, double(side)));
    };
    const int c0 = std::max(0, to_index(g.mx - reach));
    const int c1 = std::min(side - 1, to_index(g.mx + reach) + 1);
    const int r0 = std::max(0, to_index(g.my - reach));
    const int r1 = std::min(side - 1, to_index(g.my + reach) + 1);
    auto& frags = cache.fragments[i];
    for (int r = r0; r <= r1; ++r)
      for (int c = c0; c <= c1; ++c) {
        const auto [px, py] = pixel_center(r, c, side);
        const double dx = px - g.mx, dy = py - g.my;
        const double ux = g.cos_a * dx + g.sin_a * dy;
        const double uy = -g.sin_a * dx + g.cos_a * dy;
        const double q = ux * ux / (g.sx * g.sx) + uy * uy / (g.sy * g.sy);
        if (q >= kKernelCutoffSq) continue;
        const double alpha = opacity * (std::exp(-0.5 * q) - floor_k) * norm_k;
        typename RenderCache<T>::Fragment f{};
        f.pixel = std::uint32_t(r * side + c);
        f.ux = ux;
        f.uy = uy;
        f.q = q;
        for (std::size_t ch = 0; ch < nc; ++ch) {
          double& dst = cache.composite[ch * npix + f.pixel];
          f.before[ch] = dst;
          dst = alpha * double(scene.color()[i * nc + ch]) + (1.0 - alpha) * dst;
        }
        frags.push_back(f);
      }
  }
  out.image = Tensor<T>(image_shape(nc, side));
  for (std::size_t k = 0; k < out.image.size(); ++k) out.image[k] = T(std::clamp(cache.composite[k], 0.0, 1.0));
  return out;
}

/// Gradients of a scalar through the render, one tensor per splat field.
template <typename T>
struct SplatGrad {
  Tensor<T> center, log_scale, angle, color, opacity_logit;

  double squared_norm() const {
    return esm::squared_norm(center) + esm::squared_norm(log_scale) + esm::squared_norm(angle) +
           esm::squared_norm(color) + esm::squared_norm(opacity_logit);
  }
  double norm() const { return std::sqrt(squared_norm()); }

  bool all_finite() const {
    return center.all_finite() && log_scale.all_finite() && angle.all_finite() && color.all_finite() &&
           opacity_logit.all_finite();
  }

  /// Adds these gradients into the scene store's grad slots.
  void accumulate_into(SplatScene<T>& scene) const {
    auto add = [](Tensor<T>& dst, const Tensor<T>& src) {
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    };
    add(scene.params.grad(SplatScene<T>::kCenter), center);
    add(scene.params.grad(SplatScene<T>::kLogScale), log_scale);
    add(scene.params.grad(SplatScene<T>::kAngle), angle);
    add(scene.params.grad(SplatScene<T>::kColor), color);
    add(scene.params.grad(SplatScene<T>::kOpacity), opacity_logit);
  }

  /// Flattened in field order center, log_scale, angle, color, opacity_logit.
  std::vector<double> flat() const {
    std::vector<double> out;
    for (const auto* t : {&center, &log_scale, &angle, &color, &opacity_logit})
      for (auto v : t->data()) out.push_back(double(v));
    return out;
  }
};

template <typename T>
SplatGrad<T> render_vjp(const SplatScene<T>& scene, const RenderCache<T>& cache, const Tensor<T>& cotangent) {
  const std::size_t n = scene.count(), nc = scene.channels();
  const int side = cache.side;
  const std::size_t npix = std::size_t(side) * std::size_t(side);
  if (cotangent.shape() != image_shape(nc, side))
    throw ContractViolation("render_vjp: cotangent shape " + shape_str(cotangent.shape()) + " does not match image " +
                            shape_str(image_shape(nc, side)));
  require(cache.fragments.size() == n, "render_vjp: cache does not belong to this scene");
  const CameraPose& pose = cache.pose;

  // Clamp passes gradient only strictly inside (0, 1).
  std::vector<double> g(nc * npix);
  for (std::size_t k = 0; k < g.size(); ++k) {
    const double v = cache.composite[k];
    g[k] = (v >= 0.0 && v <= 1.0) ? double(cotangent[k]) : 0.0;
  }

  std::vector<double> d_center(2 * n), d_lscale(2 * n), d_angle(n), d_color(n * nc), d_logit(n);
  const double floor_k = detail::kernel_floor();
  const double norm_k = 1.0 / (1.0 - floor_k);
  for (std::size_t i = n; i-- > 0;) {
    const auto& frags = cache.fragments[i];
    if (frags.empty()) continue;
    const auto geo = detail::transform_splat(scene, i, pose);
    const double opacity = sigmoid(double(scene.opacity_logit()[i]));
    const double isx2 = 1.0 / (geo.sx * geo.sx), isy2 = 1.0 / (geo.sy * geo.sy);
    double d_opacity = 0.0, dq_ux = 0.0, dq_uy = 0.0, d_ls_x = 0.0, d_ls_y = 0.0, d_ang = 0.0;
    for (const auto& f : frags) {
      const double e = std::exp(-0.5 * f.q);
      const double kernel = (e - floor_k) * norm_k;
      const double alpha = opacity * kernel;
      double d_alpha = 0.0;
      for (std::size_t ch = 0; ch < nc; ++ch) {
        double& gp = g[ch * npix + f.pixel];
        const double col = double(scene.color()[i * nc + ch]);
        d_alpha += gp * (col - f.before[ch]);
        d_color[i * nc + ch] += gp * alpha;
        gp *= (1.0 - alpha);
      }
      d_opacity += d_alpha * kernel;
      const double dq = d_alpha * opacity * (-0.5 * e * norm_k);
      dq_ux += dq * 2.0 * f.ux * isx2;
      dq_uy += dq * 2.0 * f.uy * isy2;
      d_ls_x += dq * (-2.0 * f.ux * f.ux * isx2);
      d_ls_y += dq * (-2.0 * f.uy * f.uy * isy2);
      d_ang += dq * 2.0 * f.ux * f.uy * (isx2 - isy2);
    }
    // d q / d centre = -zoom * R(angle) * grad_u q
    const double ca = std::cos(double(scene.angle()[i])), sa = std::sin(double(scene.angle()[i]));
    d_center[2 * i] += -pose.zoom * (ca * dq_ux - sa * dq_uy);
    d_center[2 * i + 1] += -pose.zoom * (sa * dq_ux + ca * dq_uy);
    d_lscale[2 * i] += d_ls_x;
    d_lscale[2 * i + 1] += d_ls_y;
    d_angle[i] += d_ang;
    d_logit[i] += d_opacity * opacity * (1.0 - opacity);
  }
  auto to_tensor = [](const std::vector<double>& v, Shape shape) {
    Tensor<T> t(std::move(shape));
    for (std::size_t k = 0; k < v.size(); ++k) t[k] = T(v[k]);
    return t;
  };
  return SplatGrad<T>{to_tensor(d_center, {n, 2}), to_tensor(d_lscale, {n, 2}), to_tensor(d_angle, {n}),
                      to_tensor(d_color, {n, nc}), to_tensor(d_logit, {n})};
}

/// Convenience overload that re-renders to build the cache.
template <typename T>
SplatGrad<T> render_vjp(const SplatScene<T>& scene, const CameraPose& pose, const Tensor<T>& cotangent) {
  const auto side = cotangent.shape().back();
  const auto r = render(scene, pose, int(side));
  return render_vjp(scene, r.cache, cotangent);
}

enum class InitMode { random, data_fitted };

/// random: uniform centres, moderate scales, low opacity.
/// data_fitted: splats on bright pixels of `target_pixels` (a class mean image)
/// with matching intensity.
template <typename T>
SplatScene<T> init_scene(InitMode mode, std::size_t n, Rng& rng, const Tensor<T>* target_pixels = nullptr) {
  if (n == 0) throw ContractViolation("init_scene: N must be >= 1");
  auto scene = SplatScene<T>::blank(n, 1);
  if (mode == InitMode::random) {
    for (std::size_t i = 0; i < n; ++i) {
      scene.center()[2 * i] = T(rng.uniform(-0.9, 0.9));
      scene.center()[2 * i + 1] = T(rng.uniform(-0.9, 0.9));
      scene.log_scale()[2 * i] = T(std::log(rng.uniform(0.06, 0.14)));
      scene.log_scale()[2 * i + 1] = T(std::log(rng.uniform(0.06, 0.14)));
      scene.angle()[i] = T(rng.uniform(0.0, std::numbers::pi));
      scene.color()[i] = T(rng.uniform(0.3, 0.7));
      scene.opacity_logit()[i] = T(std::log(0.1 / 0.9));
    }
    return scene;
  }
  if (!target_pixels) throw ContractViolation("init_scene: data_fitted init requires a dataset class mean");
  const auto& m = *target_pixels;
  require(m.shape().size() == 2 && m.shape()[0] == m.shape()[1], "init_scene: class mean must be square");
  const int side = int(m.shape()[0]);
  double peak = 0.0;
  for (auto v : m.data()) peak = std::max(peak, double(v));
  require(peak > 0.0, "init_scene: class mean image is empty");
  std::vector<std::size_t> candidates;
  std::vector<double> cumulative;
  double total = 0.0;
  for (std::size_t k = 0; k < m.size(); ++k)
    if (double(m[k]) >= 0.5 * peak) {
      candidates.push_back(k);
      total += double(m[k]);
      cumulative.push_back(total);
    }
  const double px = 2.0 / side;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = rng.uniform(0.0, total);
    const auto pos = std::size_t(std::lower_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin());
    const std::size_t k = candidates[std::min(pos, candidates.size() - 1)];
    const auto [x, y] = pixel_center(int(k) / side, int(k) % side, side);
    scene.center()[2 * i] = T(x + rng.uniform(-0.25, 0.25) * px);
    scene.center()[2 * i + 1] = T(y + rng.uniform(-0.25, 0.25) * px);
    scene.log_scale()[2 * i] = T(std::log(px));
    scene.log_scale()[2 * i + 1] = T(std::log(px));
    scene.angle()[i] = T(rng.uniform(0.0, std::numbers::pi));
    scene.color()[i] = m[k];
    scene.opacity_logit()[i] = T(0);
  }
  return scene;
}

/// Mean magnitude of first-order pixel differences (an over-smoothing proxy).
template <typename T>
double sharpness(const Tensor<T>& img) {
  const auto& sh = img.shape();
  require(sh.size() >= 2, "sharpness: need an image");
  const std::size_t h = sh[sh.size() - 2], w = sh[sh.size() - 1];
  const std::size_t planes = img.size() / (h * w);
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) {
        const double v = img[p * h * w + r * w + c];
        if (c + 1 < w) {
          acc += std::abs(double(img[p * h * w + r * w + c + 1]) - v);
          ++count;
        }
        if (r + 1 < h) {
          acc += std::abs(double(img[p * h * w + (r + 1) * w + c]) - v);
          ++count;
        }
      }
  return count ? acc / double(count) : 0.0;
}

}  // namespace esm
