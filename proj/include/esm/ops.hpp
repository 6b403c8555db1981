#pragma once

// Fixed operation set with hand-derived vector-Jacobian products.
//
// A graph is a chain of ops applied to a (features x batch) matrix. Affine ops
// read their weights from a ParamStore by name and may carry a low-rank
// additive perturbation W + scale * B * A.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "esm/tensor.hpp"

namespace esm {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// View a row-major [rows, cols] tensor as a matrix.
template <typename T>
Eigen::Map<const RowMat<T>> as_row_matrix(const Tensor<T>& t) {
  require(t.shape().size() == 2, "as_row_matrix: expected rank-2 tensor, got " + shape_str(t.shape()));
  return Eigen::Map<const RowMat<T>>(t.raw(), Eigen::Index(t.shape()[0]), Eigen::Index(t.shape()[1]));
}

template <typename T>
Eigen::Map<RowMat<T>> as_row_matrix(Tensor<T>& t) {
  require(t.shape().size() == 2, "as_row_matrix: expected rank-2 tensor, got " + shape_str(t.shape()));
  return Eigen::Map<RowMat<T>>(t.raw(), Eigen::Index(t.shape()[0]), Eigen::Index(t.shape()[1]));
}

/// Batch of samples as columns: a row-major [batch, features] tensor.
template <typename T>
Mat<T> columns_from(const Tensor<T>& batch_major) {
  require(batch_major.shape().size() >= 1, "columns_from: empty shape");
  const auto batch = Eigen::Index(batch_major.shape()[0]);
  const auto features = Eigen::Index(batch ? batch_major.size() / std::size_t(batch) : 0);
  return Eigen::Map<const Mat<T>>(batch_major.raw(), features, batch);
}

template <typename T>
Tensor<T> tensor_from_columns(const Mat<T>& m, Shape shape) {
  require(shape_numel(shape) == std::size_t(m.size()), "tensor_from_columns: size mismatch");
  return Tensor<T>(std::move(shape), std::vector<T>(m.data(), m.data() + m.size()));
}

struct AffineOp {
  std::string weight;  // [out, in]
  std::string bias;    // [out]
};
struct SiluOp {};
/// Per-column reduction to sum of squares; output is 1 x batch.
struct SumSquaresOp {};

using Op = std::variant<AffineOp, SiluOp, SumSquaresOp>;

/// Low-rank factors attached to selected affine ops of a graph.
template <typename T>
struct LowRankSet {
  ParamStore<T> params;
  std::vector<std::size_t> op_indices;
  int rank = 0;
  T scale = T(1);

  static std::string a_name(std::size_t op) { return "lora/" + std::to_string(op) + "/A"; }
  static std::string b_name(std::size_t op) { return "lora/" + std::to_string(op) + "/B"; }

  bool adapts(std::size_t op) const {
    return std::find(op_indices.begin(), op_indices.end(), op) != op_indices.end();
  }
};

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
class OpGraph {
 public:
  struct Tape {
    std::vector<Mat<T>> inputs;
    std::vector<Mat<T>> low_rank_hidden;  // A x for adapted affine ops
  };

  OpGraph() = default;
  explicit OpGraph(std::vector<Op> ops) : ops_(std::move(ops)) {}

  const std::vector<Op>& ops() const noexcept { return ops_; }

  Mat<T> forward(const ParamStore<T>& params, const Mat<T>& input, const LowRankSet<T>* adapter = nullptr,
                 Tape* tape = nullptr) const {
    if (tape) {
      tape->inputs.assign(ops_.size(), Mat<T>());
      tape->low_rank_hidden.assign(ops_.size(), Mat<T>());
    }
    Mat<T> x = input;
    for (std::size_t k = 0; k < ops_.size(); ++k) {
      if (tape) tape->inputs[k] = x;
      if (const auto* aff = std::get_if<AffineOp>(&ops_[k])) {
        const auto W = as_row_matrix(params.value(aff->weight));
        const auto& b = params.value(aff->bias);
        if (W.cols() != x.rows())
          throw ContractViolation("affine op " + std::to_string(k) + ": input has " + std::to_string(x.rows()) +
                                  " features, weight expects " + std::to_string(W.cols()));
        Mat<T> y = W * x;
        y.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(b.raw(), Eigen::Index(b.size()));
        if (adapter && adapter->adapts(k)) {
          const auto A = as_row_matrix(adapter->params.value(LowRankSet<T>::a_name(k)));
          const auto B = as_row_matrix(adapter->params.value(LowRankSet<T>::b_name(k)));
          Mat<T> h = A * x;
          y.noalias() += adapter->scale * (B * h);
          if (tape) tape->low_rank_hidden[k] = std::move(h);
        }
        x = std::move(y);
      } else if (std::holds_alternative<SiluOp>(ops_[k])) {
        x = x.unaryExpr([](T v) { return v * sigmoid(v); }).eval();
      } else {
        x = x.colwise().squaredNorm().eval();
      }
    }
    return x;
  }

  /// Accumulates parameter gradients into `param_grads` / `adapter_grads`
  /// (grad slots keyed by the same names; null skips them) and returns the
  /// cotangent of the graph input.
  Mat<T> backward(const ParamStore<T>& params, ParamStore<T>* param_grads, const LowRankSet<T>* adapter,
                  ParamStore<T>* adapter_grads, const Tape& tape, const Mat<T>& cotangent) const {
    require(tape.inputs.size() == ops_.size(), "backward: tape does not match graph");
    Mat<T> g = cotangent;
    for (std::size_t kk = ops_.size(); kk-- > 0;) {
      const Mat<T>& x = tape.inputs[kk];
      if (const auto* aff = std::get_if<AffineOp>(&ops_[kk])) {
        const auto W = as_row_matrix(params.value(aff->weight));
        require(g.rows() == W.rows() && g.cols() == x.cols(), "backward: cotangent shape mismatch");
        if (param_grads) {
          as_row_matrix(param_grads->grad(aff->weight)).noalias() += g * x.transpose();
          auto& gb = param_grads->grad(aff->bias);
          Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(gb.raw(), Eigen::Index(gb.size())) += g.rowwise().sum();
        }
        Mat<T> gx = W.transpose() * g;
        if (adapter && adapter->adapts(kk)) {
          const auto A = as_row_matrix(adapter->params.value(LowRankSet<T>::a_name(kk)));
          const auto B = as_row_matrix(adapter->params.value(LowRankSet<T>::b_name(kk)));
          Mat<T> gh = adapter->scale * (B.transpose() * g);
          if (adapter_grads) {
            as_row_matrix(adapter_grads->grad(LowRankSet<T>::a_name(kk))).noalias() += gh * x.transpose();
            as_row_matrix(adapter_grads->grad(LowRankSet<T>::b_name(kk))).noalias() +=
                adapter->scale * (g * tape.low_rank_hidden[kk].transpose());
          }
          gx.noalias() += A.transpose() * gh;
        }
        g = std::move(gx);
      } else if (std::holds_alternative<SiluOp>(ops_[kk])) {
        g = g.cwiseProduct(x.unaryExpr([](T v) {
          const T s = sigmoid(v);
          return s * (T(1) + v * (T(1) - s));
        }))
                .eval();
      } else {
        require(g.rows() == 1 && g.cols() == x.cols(), "backward: sum-of-squares cotangent must be 1 x batch");
        Mat<T> gx = T(2) * x;
        for (Eigen::Index c = 0; c < gx.cols(); ++c) gx.col(c) *= g(0, c);
        g = std::move(gx);
      }
    }
    return g;
  }

 private:
  std::vector<Op> ops_;
};

template <typename T>
struct VjpResult {
  ParamStore<T> grads;  // same names/shapes as the inputs; values copied, grads populated
  Mat<T> input_grad;
};

/// Pure vector-Jacobian product of `graph` at (params, input) against `cotangent`.
template <typename T>
VjpResult<T> vjp(const OpGraph<T>& graph, const ParamStore<T>& params, const Mat<T>& input, const Mat<T>& cotangent) {
  typename OpGraph<T>::Tape tape;
  const Mat<T> out = graph.forward(params, input, nullptr, &tape);
  if (out.rows() != cotangent.rows() || out.cols() != cotangent.cols())
    throw ContractViolation("vjp: cotangent is " + std::to_string(cotangent.rows()) + "x" +
                            std::to_string(cotangent.cols()) + ", output is " + std::to_string(out.rows()) + "x" +
                            std::to_string(out.cols()));
  VjpResult<T> result{params, Mat<T>()};
  result.grads.zero_grad();
  result.input_grad = graph.backward(params, &result.grads, nullptr, nullptr, tape, cotangent);
  return result;
}

}  // namespace esm
