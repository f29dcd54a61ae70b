#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <type_traits>

#include "radnet/errors.hpp"
#include "radnet/layers.hpp"
#include "radnet/loss.hpp"
#include "radnet/model.hpp"
#include "radnet/random.hpp"
#include "radnet/tensor.hpp"

namespace radnet {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst;  // "<tensor>[<flat index>]" of the largest error
  std::size_t checked = 0;
  // Per checked tensor: largest relative error and largest |analytic - numeric|.
  std::map<std::string, double> tensor_rel_error;
  std::map<std::string, double> tensor_abs_error;
};

/// |a - n| / max(|a|, |n|, 1e-8).
inline double relative_error(double analytic, double numeric) {
  double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

namespace detail {

// Central differences of f with respect to every element of x (perturbed in place and
// restored), compared against the analytic gradient.
template <typename T, typename F>
void check_against_numeric(F&& f, Tensor<T>& x, const Tensor<T>& analytic,
                           const std::string& label, double eps, GradCheckReport& report) {
  if (analytic.shape() != x.shape())
    throw ShapeError("gradient for " + label + " has shape " + shape_string(analytic.shape()) +
                     ", expected " + shape_string(x.shape()));
  for (std::size_t i = 0; i < x.size(); ++i) {
    T saved = x[i];
    x[i] = saved + static_cast<T>(eps);
    double fp = f();
    x[i] = saved - static_cast<T>(eps);
    double fm = f();
    x[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm) || !std::isfinite(static_cast<double>(analytic[i])))
      throw NumericError("non-finite value while checking " + label);
    double numeric = (fp - fm) / (2.0 * eps);
    double err = relative_error(analytic[i], numeric);
    ++report.checked;
    auto& rel = report.tensor_rel_error[label];
    auto& abs = report.tensor_abs_error[label];
    rel = std::max(rel, err);
    abs = std::max(abs, std::abs(analytic[i] - numeric));
    if (err > report.max_rel_error || report.worst.empty()) {
      report.max_rel_error = err;
      report.worst = label + "[" + std::to_string(i) + "]";
    }
  }
}

}  // namespace detail

/// Checks a single layer against central differences of f(x) = sum(u * layer(x)) for a
/// fixed random projection u. Covers every parameter element and every input element.
/// Dropout layers keep their mask because the noise key does not change between calls.
template <typename T>
GradCheckReport gradient_check(Layer<T>& layer, const Tensor<T>& input, Mode mode = Mode::train,
                               double epsilon = 1e-5, std::uint64_t seed = 1) {
  static_assert(std::is_same_v<T, double>, "gradient checks run in 64-bit mode");
  Tensor<T> x = input;
  Tensor<T> y = layer.forward(x, mode);
  if (!y.all_finite()) throw NumericError(layer.name() + ": non-finite forward output");
  Tensor<T> u(y.shape());
  Rng rng(mix64(seed, 0x9e3779b97f4a7c15ULL));
  for (auto& v : u.data()) v = rng.uniform(-1.0, 1.0);

  GradBundle<T> analytic = layer.backward(u);
  auto objective = [&] {
    Tensor<T> out = layer.forward(x, mode);
    long double s = 0;
    for (std::size_t i = 0; i < out.size(); ++i) s += static_cast<long double>(out[i]) * u[i];
    return static_cast<double>(s);
  };

  GradCheckReport report;
  for (auto& p : layer.parameters())
    detail::check_against_numeric(objective, p.value, analytic.grads.at(p.name), p.name, epsilon,
                                  report);
  detail::check_against_numeric(objective, x, analytic.input_grad, layer.name() + ".input",
                                epsilon, report);
  return report;
}

/// Whole-model check of the training loss (forward in `mode`, loss on the output
/// probabilities) against central differences, for every parameter and input element.
/// The dropout noise key is pinned so every evaluation sees the same masks.
template <typename T>
GradCheckReport gradient_check(Model<T>& model, const Tensor<T>& batch, const Tensor<T>& targets,
                               double epsilon = 1e-5, Mode mode = Mode::train) {
  static_assert(std::is_same_v<T, double>, "gradient checks run in 64-bit mode");
  model.set_noise_key(0);
  Tensor<T> x = batch;
  Tensor<T> probs = model.forward(x, mode);
  if (!probs.all_finite()) throw NumericError("non-finite model output");
  Tensor<T> input_grad = model.backward_logits(loss_grad_logits(probs, targets, model.loss_kind()));

  std::vector<Tensor<T>> grads;
  for (auto* p : model.parameters()) grads.push_back(p->grad);

  auto objective = [&] {
    return static_cast<double>(loss_value(model.forward(x, mode), targets, model.loss_kind()));
  };
  GradCheckReport report;
  auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i)
    detail::check_against_numeric(objective, params[i]->value, grads[i], params[i]->name, epsilon,
                                  report);
  detail::check_against_numeric(objective, x, input_grad, "input", epsilon, report);
  return report;
}

}  // namespace radnet
