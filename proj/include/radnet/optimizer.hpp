#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>

#include "radnet/errors.hpp"
#include "radnet/layers.hpp"
#include "radnet/tensor.hpp"

namespace radnet {

/// Adam moments per parameter name, step count and current learning rate.
template <typename T>
struct AdamState {
  struct Moments {
    Tensor<T> m;
    Tensor<T> v;
  };
  std::map<std::string, Moments> moments;
  std::uint64_t step = 0;
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-7;
};

/// One Adam update of every parameter from its `grad`.
///   m <- b1 m + (1 - b1) g;  v <- b2 v + (1 - b2) g^2
///   theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)
/// If any gradient is non-finite or mis-shaped nothing is modified.
template <typename T>
void adam_step(std::span<Parameter<T>* const> params, AdamState<T>& state) {
  for (const auto* p : params) {
    if (p->grad.shape() != p->value.shape())
      throw ShapeError("adam: gradient of " + p->name + " has shape " +
                       shape_string(p->grad.shape()) + ", parameter is " +
                       shape_string(p->value.shape()));
    if (!p->grad.all_finite()) throw NumericError("adam: non-finite gradient for " + p->name);
  }
  if (state.step == std::numeric_limits<std::uint64_t>::max() / 2)
    throw ArgumentError("adam: step counter exhausted");

  std::uint64_t t = ++state.step;
  double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(t));
  double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(t));
  T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
  for (auto* p : params) {
    auto& mom = state.moments[p->name];
    if (mom.m.shape() != p->value.shape()) {
      mom.m = Tensor<T>(p->value.shape());
      mom.v = Tensor<T>(p->value.shape());
    }
    auto theta = p->value.data();
    auto g = p->grad.data();
    auto m = mom.m.data();
    auto v = mom.v.data();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * g[i];
      v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
      double mhat = m[i] / c1;
      double vhat = v[i] / c2;
      theta[i] -= static_cast<T>(state.lr * mhat / (std::sqrt(vhat) + state.eps));
    }
  }
}

/// Reduce-on-plateau bookkeeping on the validation loss.
struct PlateauState {
  double best_loss = std::numeric_limits<double>::infinity();
  int wait = 0;
  int patience = 2;
  double factor = 0.3;
  double min_lr = 1e-8;
  double min_delta = 0.0;
};

/// End-of-epoch update. A loss counts as an improvement only if it is strictly below
/// best_loss - min_delta. After `patience` consecutive non-improving epochs the learning
/// rate becomes max(lr * factor, min_lr) and the counter restarts. Returns true when the
/// rate was reduced.
inline bool plateau_update(PlateauState& s, double val_loss, double& lr) {
  if (std::isnan(val_loss)) throw NumericError("plateau: validation loss is NaN");
  if (val_loss < s.best_loss - s.min_delta) {
    s.best_loss = val_loss;
    s.wait = 0;
    return false;
  }
  if (++s.wait < s.patience) return false;
  s.wait = 0;
  double next = std::max(lr * s.factor, s.min_lr);
  bool reduced = next < lr;
  lr = std::min(lr, next);
  return reduced;
}

/// Best validation accuracy seen so far and the epoch it came from.
struct BestTracker {
  double best_val_accuracy = 0.0;
  int best_epoch = 0;
  bool has_best = false;
};

enum class SaveDecision { saved, skipped };

/// Calls save() and records the epoch when val_accuracy strictly beats the best so far
/// (the first epoch always saves). If save() throws, the tracker is left unchanged.
template <typename SaveFn>
SaveDecision best_tracker_update(BestTracker& tracker, int epoch, double val_accuracy,
                                 SaveFn&& save) {
  if (!(val_accuracy >= 0.0 && val_accuracy <= 1.0))
    throw ArgumentError("validation accuracy must be in [0, 1]");
  if (tracker.has_best && !(val_accuracy > tracker.best_val_accuracy)) return SaveDecision::skipped;
  save();
  tracker.best_val_accuracy = val_accuracy;
  tracker.best_epoch = epoch;
  tracker.has_best = true;
  return SaveDecision::saved;
}

}  // namespace radnet
