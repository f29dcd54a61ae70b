#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "radnet/errors.hpp"
#include "radnet/tensor.hpp"

namespace radnet {

/// bce: sigmoid probabilities (batch, 1) against {0,1} targets.
/// cce: softmax rows (batch, k) against one-hot rows.
enum class LossKind { bce, cce };

inline constexpr double kProbClamp = 1e-7;

namespace detail {

template <typename T>
void check_loss_args(const Tensor<T>& pred, const Tensor<T>& target, LossKind kind) {
  if (pred.shape() != target.shape())
    throw ShapeError("loss: prediction " + shape_string(pred.shape()) + " vs target " +
                     shape_string(target.shape()));
  if (kind == LossKind::bce) {
    for (auto y : target.data())
      if (y != T(0) && y != T(1)) throw ArgumentError("bce target must be 0 or 1");
  } else {
    if (pred.rank() != 2) throw ShapeError("cce expects (batch, classes) rows");
    for (std::size_t n = 0; n < target.dim(0); ++n) {
      std::size_t ones = 0;
      for (std::size_t j = 0; j < target.dim(1); ++j) {
        T y = target(n, j);
        if (y != T(0) && y != T(1)) throw ArgumentError("cce target must be one-hot");
        ones += y == T(1);
      }
      if (ones != 1) throw ArgumentError("cce target row " + std::to_string(n) + " is not one-hot");
    }
  }
}

template <typename T>
double clamp_prob(T p) {
  return std::clamp(static_cast<double>(p), kProbClamp, 1.0 - kProbClamp);
}

}  // namespace detail

/// Mean over the batch of the per-sample cross entropy. Probabilities are clamped to
/// [1e-7, 1 - 1e-7] before the log.
template <typename T>
T loss_value(const Tensor<T>& pred, const Tensor<T>& target, LossKind kind) {
  detail::check_loss_args(pred, target, kind);
  std::size_t batch = pred.dim(0);
  double total = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    double p = detail::clamp_prob(pred[i]);
    double y = target[i];
    if (kind == LossKind::bce)
      total -= y * std::log(p) + (1 - y) * std::log(1 - p);
    else if (y != 0)
      total -= y * std::log(p);
  }
  return static_cast<T>(total / batch);
}

/// Scalar loss as a rank-1 tensor of one element.
template <typename T>
Tensor<T> loss(const Tensor<T>& pred, const Tensor<T>& target, LossKind kind) {
  return Tensor<T>({1}, {loss_value(pred, target, kind)});
}

/// dL/dp with respect to the probabilities (clamped values inside the logs).
template <typename T>
Tensor<T> loss_grad_probs(const Tensor<T>& pred, const Tensor<T>& target, LossKind kind) {
  detail::check_loss_args(pred, target, kind);
  double batch = static_cast<double>(pred.dim(0));
  Tensor<T> g(pred.shape());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    double p = detail::clamp_prob(pred[i]);
    double y = target[i];
    double d = kind == LossKind::bce ? (-y / p + (1 - y) / (1 - p)) : -y / p;
    g[i] = static_cast<T>(d / batch);
  }
  return g;
}

/// dL/dz with respect to the pre-activation logits when the probabilities came from
/// sigmoid (bce) or softmax (cce): (p - y) / batch for both. Skips the clamp, so it is
/// exact wherever the probabilities are inside the clamp bounds.
template <typename T>
Tensor<T> loss_grad_logits(const Tensor<T>& probs, const Tensor<T>& target, LossKind kind) {
  detail::check_loss_args(probs, target, kind);
  T batch = static_cast<T>(probs.dim(0));
  return zip(probs, target, [batch](T p, T y) { return (p - y) / batch; });
}

}  // namespace radnet
