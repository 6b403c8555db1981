#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "esm/adam.hpp"
#include "esm/dataset.hpp"
#include "esm/ops.hpp"
#include "esm/schedule.hpp"
#include "esm/tensor.hpp"

namespace esm {

/// Class label or the unconditional (null) token.
struct Condition {
  enum class Kind { null, label };
  Kind kind = Kind::null;
  int label_id = -1;

  static Condition none() { return {}; }
  static Condition label(int id) { return {Kind::label, id}; }
  bool is_null() const noexcept { return kind == Kind::null; }
};

struct DenoiserSpec {
  int side = 32;
  int num_classes = 4;
  int hidden = 256;
  int depth = 3;
  int temb_dim = 32;
};

/// MLP noise predictor over [flattened latent, sinusoidal timestep embedding,
/// class one-hot]. The one-hot block feeds the first affine layer, so its
/// weight columns are the learned class embedding (last column = null token).
/// eps = head + g(t, c) * x, where head is the MLP output and the scalar gate g
/// is affine in the timestep embedding and one-hot only. Without the skip every
/// pixel of the noise has to squeeze through the hidden width, which caps the fit
/// well above what a per-pixel linear denoiser reaches. Keeping x out of the gate
/// keeps eps affine in x at large |x|; an x-dependent gate grows quadratically
/// and blew up inversion chains started from renders far off the data.
template <typename T>
class DenoiserModel {
 public:
  DenoiserModel() = default;

  DenoiserModel(const DenoiserSpec& spec, Rng& rng, bool zero_output = true) : spec_(spec) {
    require(spec.side >= 2, "DenoiserModel: side too small");
    require(spec.num_classes >= 1, "DenoiserModel: need at least one class");
    require(spec.depth >= 1 && spec.hidden >= 1, "DenoiserModel: bad hidden layout");
    require(spec.temb_dim >= 2 && spec.temb_dim % 2 == 0, "DenoiserModel: temb_dim must be even");
    std::vector<Op> ops;
    int in = input_dim();
    for (int layer = 0; layer <= spec.depth; ++layer) {
      const bool last = layer == spec.depth;
      const int out = last ? output_dim() : spec.hidden;
      const std::string w = "layer" + std::to_string(layer) + ".weight";
      const std::string b = "layer" + std::to_string(layer) + ".bias";
      Tensor<T> weight({std::size_t(out), std::size_t(in)});
      if (!(last && zero_output)) {
        const double sd = 1.0 / std::sqrt(double(in));
        for (auto& v : weight.data()) v = T(sd * rng.normal());
      }
      params_.add(w, std::move(weight));
      params_.add(b, Tensor<T>({std::size_t(out)}));
      ops.push_back(AffineOp{w, b});
      if (!last) ops.push_back(SiluOp{});
      in = out;
    }
    params_.add("gate.weight", Tensor<T>({1, std::size_t(embed_dim())}));
    params_.add("gate.bias", Tensor<T>({1}));
    graph_ = OpGraph<T>(std::move(ops));
  }

  /// Rebuild around an existing parameter set (e.g. loaded from a checkpoint).
  DenoiserModel(const DenoiserSpec& spec, ParamStore<T> params) : DenoiserModel(spec, dummy_rng(), true) {
    for (const auto& e : params_.entries()) {
      if (!params.contains(e.name)) throw ContractViolation("DenoiserModel: missing parameter '" + e.name + "'");
      if (params.value(e.name).shape() != e.value.shape())
        throw ContractViolation("DenoiserModel: shape mismatch for '" + e.name + "'");
    }
    for (auto& e : params_.entries()) e.value = params.value(e.name);
  }

  const DenoiserSpec& spec() const noexcept { return spec_; }
  ParamStore<T>& params() noexcept { return params_; }
  const ParamStore<T>& params() const noexcept { return params_; }
  const OpGraph<T>& graph() const noexcept { return graph_; }

  int image_dim() const noexcept { return spec_.side * spec_.side; }
  int input_dim() const noexcept { return image_dim() + spec_.temb_dim + spec_.num_classes + 1; }
  int output_dim() const noexcept { return image_dim(); }
  /// Timestep embedding plus one-hot: the gate's inputs.
  int embed_dim() const noexcept { return spec_.temb_dim + spec_.num_classes + 1; }
  Shape image_shape() const { return {std::size_t(spec_.side), std::size_t(spec_.side)}; }

  /// Indices of affine ops in the graph, in order.
  std::vector<std::size_t> affine_ops() const {
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < graph_.ops().size(); ++k)
      if (std::holds_alternative<AffineOp>(graph_.ops()[k])) out.push_back(k);
    return out;
  }

  void check_condition(const Condition& c) const {
    if (!c.is_null() && (c.label_id < 0 || c.label_id >= spec_.num_classes))
      throw ContractViolation("condition label " + std::to_string(c.label_id) + " outside [0, " +
                              std::to_string(spec_.num_classes) + ")");
  }

  void write_input_column(Eigen::Ref<Mat<T>> in, Eigen::Index col, const Tensor<T>& x, int t,
                          const Condition& c) const {
    if (x.size() != std::size_t(image_dim()))
      throw ContractViolation("denoiser input has " + std::to_string(x.size()) + " values, expected " +
                              std::to_string(image_dim()));
    check_condition(c);
    const int d = image_dim();
    for (int i = 0; i < d; ++i) in(i, col) = x[std::size_t(i)];
    const int half = spec_.temb_dim / 2;
    for (int k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * double(k) / double(half));
      in(d + k, col) = T(std::sin(double(t) * freq));
      in(d + half + k, col) = T(std::cos(double(t) * freq));
    }
    const int base = d + spec_.temb_dim;
    for (int k = 0; k <= spec_.num_classes; ++k) in(base + k, col) = T(0);
    in(base + (c.is_null() ? spec_.num_classes : c.label_id), col) = T(1);
  }

  /// Raw network output for one latent (no guidance).
  Tensor<T> forward(const Tensor<T>& x, int t, const Condition& c, const LowRankSet<T>* adapter = nullptr) const {
    Mat<T> in(input_dim(), 1);
    write_input_column(in, 0, x, t, c);
    return tensor_from_columns<T>(predict_columns(in, adapter), x.shape());
  }

  /// Gate value per input column.
  Eigen::Matrix<T, 1, Eigen::Dynamic> gate(const Mat<T>& in) const {
    const auto w = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(params_.value("gate.weight").data().data(),
                                                                          embed_dim());
    Eigen::Matrix<T, 1, Eigen::Dynamic> g = w * in.bottomRows(embed_dim());
    g.array() += params_.value("gate.bias")[0];
    return g;
  }

  /// eps for each input column: head plus gate times the latent rows.
  Mat<T> predict_columns(const Mat<T>& in, const LowRankSet<T>* adapter = nullptr,
                         typename OpGraph<T>::Tape* tape = nullptr) const {
    Mat<T> eps = graph_.forward(params_, in, adapter, tape);
    const auto g = gate(in);
    const Eigen::Index d = image_dim();
    for (Eigen::Index k = 0; k < eps.cols(); ++k) eps.col(k) += g(k) * in.col(k).head(d);
    return eps;
  }

  /// Pulls a cotangent on predict_columns' output back into parameter grads.
  void backward_columns(const Mat<T>& in, const typename OpGraph<T>::Tape& tape, const Mat<T>& cot,
                        ParamStore<T>* param_grads, const LowRankSet<T>* adapter = nullptr,
                        ParamStore<T>* adapter_grads = nullptr) const {
    const Eigen::Index d = image_dim();
    if (param_grads) {
      T* gw = param_grads->grad("gate.weight").data().data();
      T& gb = param_grads->grad("gate.bias")[0];
      for (Eigen::Index k = 0; k < cot.cols(); ++k) {
        const T dg = cot.col(k).dot(in.col(k).head(d));
        gb += dg;
        for (Eigen::Index j = 0; j < embed_dim(); ++j) gw[j] += dg * in(d + j, k);
      }
    }
    graph_.backward(params_, param_grads, adapter, adapter_grads, tape, cot);
  }

 private:
  static Rng& dummy_rng() {
    thread_local Rng rng(0);
    return rng;
  }

  DenoiserSpec spec_;
  ParamStore<T> params_;
  OpGraph<T> graph_;
};

/// Noise prediction with optional classifier-free guidance.
/// g == 1 or a null condition is a single plain forward pass.
template <typename T>
Tensor<T> predict_eps(const DenoiserModel<T>& model, const Tensor<T>& x, int t, const Condition& c,
                      double guidance = 1.0, const LowRankSet<T>* adapter = nullptr) {
  if (t < 1) throw ContractViolation("predict_eps: timestep must be >= 1, got " + std::to_string(t));
  if (c.is_null() || guidance == 1.0) return model.forward(x, t, c, adapter);
  Mat<T> in(model.input_dim(), 2);
  model.write_input_column(in, 0, x, t, Condition::none());
  model.write_input_column(in, 1, x, t, c);
  const Mat<T> out = model.predict_columns(in, adapter);
  Tensor<T> eps(x.shape());
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const double uncond = out(Eigen::Index(i), 0);
    eps[i] = T(uncond + guidance * (double(out(Eigen::Index(i), 1)) - uncond));
  }
  return eps;
}

/// Analytic denoiser for data ~ N(mu, var_d * I).
template <typename T>
struct GaussianOracle {
  Tensor<T> mu;
  double var_d = 1.0;
};

template <typename T>
Tensor<T> oracle_eps(const GaussianOracle<T>& oracle, const Tensor<T>& x, int t, const NoiseSchedule& sched) {
  require(oracle.var_d > 0.0, "oracle_eps: var_d must be positive");
  if (t < 1) throw ContractViolation("oracle_eps: timestep must be >= 1");
  require_same_shape(x, oracle.mu, "oracle_eps");
  const double ab = sched.alpha_bar(t);
  const double gain = std::sqrt(1.0 - ab) / (ab * oracle.var_d + 1.0 - ab);
  const double shift = std::sqrt(ab);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = T(gain * (double(x[i]) - shift * double(oracle.mu[i])));
  return out;
}

/// Unconditioned noise predictor eps(x, t) as consumed by the inversion routines.
template <typename T>
using NoisePredictor = std::function<Tensor<T>(const Tensor<T>&, int)>;

template <typename T>
NoisePredictor<T> unconditional(const DenoiserModel<T>& model, const LowRankSet<T>* adapter = nullptr) {
  return [&model, adapter](const Tensor<T>& x, int t) { return predict_eps(model, x, t, Condition::none(), 1.0, adapter); };
}

template <typename T>
NoisePredictor<T> oracle_predictor(const GaussianOracle<T>& oracle, const NoiseSchedule& sched) {
  return [&oracle, &sched](const Tensor<T>& x, int t) { return oracle_eps(oracle, x, t, sched); };
}

/// One denoising-score-matching minibatch: x_t = q_sample(x0, t, noise).
template <typename T>
struct DenoiserBatch {
  std::vector<Tensor<T>> x0;
  std::vector<Tensor<T>> noise;
  std::vector<int> t;
  std::vector<Condition> cond;
};

/// Mean squared noise-prediction error over the batch. Gradients are
/// accumulated into `param_grads` and `adapter_grads` when non-null.
template <typename T>
double denoiser_loss_and_grad(const DenoiserModel<T>& model, const DenoiserBatch<T>& batch,
                              const NoiseSchedule& sched, ParamStore<T>* param_grads,
                              const LowRankSet<T>* adapter = nullptr, ParamStore<T>* adapter_grads = nullptr) {
  const auto bsz = Eigen::Index(batch.x0.size());
  require(bsz > 0, "denoiser_loss_and_grad: empty batch");
  const Eigen::Index d = model.image_dim();
  Mat<T> in(model.input_dim(), bsz);
  Mat<T> target(d, bsz);
  for (Eigen::Index k = 0; k < bsz; ++k) {
    const auto ku = std::size_t(k);
    require(batch.t[ku] >= 1, "denoiser_loss_and_grad: timestep must be >= 1");
    const Tensor<T> xt = q_sample(batch.x0[ku], batch.t[ku], batch.noise[ku], sched);
    model.write_input_column(in, k, xt, batch.t[ku], batch.cond[ku]);
    for (Eigen::Index i = 0; i < d; ++i) target(i, k) = batch.noise[ku][std::size_t(i)];
  }
  typename OpGraph<T>::Tape tape;
  const Mat<T> pred = model.predict_columns(in, adapter, &tape);
  const Mat<T> diff = pred - target;
  const double denom = double(bsz) * double(d);
  const double loss = double(diff.squaredNorm()) / denom;
  const Mat<T> cot = (T(2.0 / denom) * diff).eval();
  if (param_grads || adapter_grads) model.backward_columns(in, tape, cot, param_grads, adapter, adapter_grads);
  return loss;
}

struct TrainConfig {
  int steps = 3000;
  double lr = 1e-3;
  int batch = 64;
  double cond_drop_prob = 0.1;
};

struct TrainResult {
  std::vector<double> losses;
};

/// Trailing moving average.
inline std::vector<double> smoothed(const std::vector<double>& xs, std::size_t window) {
  std::vector<double> out(xs.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    acc += xs[i];
    if (i >= window) acc -= xs[i - window];
    out[i] = acc / double(std::min(i + 1, window));
  }
  return out;
}

template <typename T>
TrainResult train_denoiser(DenoiserModel<T>& model, const Dataset<T>& data, const NoiseSchedule& sched,
                           const TrainConfig& cfg, Rng& rng) {
  require(data.size() > 0, "train_denoiser: dataset is empty");
  require(cfg.cond_drop_prob >= 0.0 && cfg.cond_drop_prob <= 1.0, "train_denoiser: cond_drop_prob outside [0,1]");
  require(cfg.batch >= 1 && cfg.steps >= 0, "train_denoiser: bad batch/steps");
  require(data.side == model.spec().side, "train_denoiser: dataset side does not match model");
  TrainResult result;
  AdamState<T> opt;
  const AdamConfig acfg{cfg.lr};
  model.params().zero_grad();
  for (int step = 0; step < cfg.steps; ++step) {
    DenoiserBatch<T> batch;
    for (int k = 0; k < cfg.batch; ++k) {
      const auto idx = std::size_t(rng.uniform_int(0, int(data.size()) - 1));
      batch.x0.push_back(data.images[idx]);
      batch.noise.push_back(rng.normal_tensor<T>(data.images[idx].shape()));
      batch.t.push_back(rng.uniform_int(1, sched.steps()));
      const bool drop = rng.uniform() < cfg.cond_drop_prob;
      batch.cond.push_back(drop ? Condition::none() : Condition::label(data.labels[idx]));
    }
    const double loss = denoiser_loss_and_grad(model, batch, sched, &model.params());
    if (!std::isfinite(loss))
      throw NumericError("train_denoiser diverged: loss " + std::to_string(loss) + " at step " +
                         std::to_string(step) + " (seed " + std::to_string(rng.seed()) + ")");
    adam_step(model.params(), opt, acfg);
    result.losses.push_back(loss);
  }
  return result;
}

}  // namespace esm
