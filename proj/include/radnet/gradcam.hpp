#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "json.hpp"
#include "radnet/errors.hpp"
#include "radnet/layers.hpp"
#include "radnet/model.hpp"
#include "radnet/tensor.hpp"

namespace radnet {

template <typename T>
struct Heatmap {
  Tensor<T> values;    // input resolution, max-normalized to [0, 1]
  Tensor<T> coarse;    // ReLU(sum_k alpha_k A^k) at feature-map resolution, unnormalized
  double raw_max = 0;  // max of `coarse`
  int target_class = 0;
};

/// Grad-CAM on the final convolutional feature map.
///
/// The class score is the pre-activation logit (negated for class 0 of a binary model).
/// alpha_k is the spatial mean of d score / d A^k; the map ReLU(sum_k alpha_k A^k) is
/// resized bilinearly to the input size and divided by its maximum. A map that is zero
/// everywhere stays zero.
template <typename T>
Heatmap<T> gradcam(Model<T>& model, const Tensor<T>& image, int target_class) {
  auto feature = model.feature_layer();
  if (!feature) throw SpecError("Grad-CAM needs a model with a convolutional layer");
  std::size_t classes = num_classes(model.spec().task);
  if (target_class < 0 || static_cast<std::size_t>(target_class) >= classes)
    throw ArgumentError("target class " + std::to_string(target_class) + " out of range");

  Tensor<T> x = image.rank() == 3 ? image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)})
                                  : image;
  model.check_input(x);
  if (x.dim(0) != 1) throw ShapeError("Grad-CAM takes a single image");

  std::size_t split = *feature + 1;
  Tensor<T> acts = model.forward_range(x, 0, split, Mode::infer);
  Tensor<T> logits = model.forward_range(acts, split, model.logits_end(), Mode::infer);
  Tensor<T> seed(logits.shape());
  if (model.spec().task == Task::binary)
    seed[0] = target_class == 1 ? T(1) : T(-1);
  else
    seed[static_cast<std::size_t>(target_class)] = T(1);
  Tensor<T> grads = model.backward_range(seed, split, model.logits_end());

  std::size_t k = acts.dim(1), h = acts.dim(2), w = acts.dim(3), hw = h * w;
  Heatmap<T> out;
  out.target_class = target_class;
  out.coarse = Tensor<T>({h, w});
  for (std::size_t c = 0; c < k; ++c) {
    double alpha = 0;
    for (std::size_t i = 0; i < hw; ++i) alpha += grads[c * hw + i];
    alpha /= static_cast<double>(hw);
    for (std::size_t i = 0; i < hw; ++i) out.coarse[i] += static_cast<T>(alpha * acts[c * hw + i]);
  }
  for (auto& v : out.coarse.data()) v = std::max(v, T(0));
  out.raw_max = reduce_all(out.coarse, ReduceKind::max);

  Shape2d size{x.dim(2), x.dim(3)};
  out.values = bilinear_resize(out.coarse, size);
  T peak = reduce_all(out.values, ReduceKind::max);
  if (out.raw_max > 0 && peak > T(0))
    for (auto& v : out.values.data()) v = std::min(T(1), v / peak);
  else
    out.values = Tensor<T>({size.height, size.width});
  return out;
}

/// Jet colormap: 0 -> dark blue (0, 0, 0.5), 0.5 -> green, 1 -> dark red (0.5, 0, 0).
inline std::array<double, 3> jet(double v) {
  v = std::clamp(v, 0.0, 1.0);
  auto ch = [v](double center) { return std::clamp(1.5 - std::abs(4.0 * v - center), 0.0, 1.0); };
  return {ch(3.0), ch(2.0), ch(1.0)};
}

/// Heatmap (h x w) as a 3 x h x w jet-colored image.
template <typename T>
Tensor<T> colorize(const Tensor<T>& heat) {
  if (heat.rank() != 2) throw ShapeError("colorize expects h x w");
  std::size_t h = heat.dim(0), w = heat.dim(1);
  Tensor<T> rgb({3, h, w});
  for (std::size_t i = 0; i < h * w; ++i) {
    auto c = jet(heat[i]);
    for (std::size_t ch = 0; ch < 3; ++ch) rgb[ch * h * w + i] = static_cast<T>(c[ch]);
  }
  return rgb;
}

/// (1 - alpha) * gray(image) + alpha * jet(heat), per channel. image is c x h x w.
template <typename T>
Tensor<T> overlay(const Tensor<T>& image, const Tensor<T>& heat, double alpha = 0.4) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ArgumentError("overlay alpha must be in [0, 1]");
  if (image.rank() != 3 || heat.rank() != 2 || image.dim(1) != heat.dim(0) ||
      image.dim(2) != heat.dim(1))
    throw ArgumentError("overlay: image " + shape_string(image.shape()) + " and heatmap " +
                        shape_string(heat.shape()) + " differ in size");
  std::size_t c = image.dim(0), hw = heat.size();
  Tensor<T> color = colorize(heat);
  Tensor<T> out({3, heat.dim(0), heat.dim(1)});
  for (std::size_t i = 0; i < hw; ++i) {
    double gray = 0;
    for (std::size_t ch = 0; ch < c; ++ch) gray += image[ch * hw + i];
    gray = std::clamp(gray / static_cast<double>(c), 0.0, 1.0);
    for (std::size_t ch = 0; ch < 3; ++ch)
      out[ch * hw + i] = static_cast<T>((1.0 - alpha) * gray + alpha * color[ch * hw + i]);
  }
  return out;
}

enum class Severity { none, mild, moderate, severe };

inline const char* to_string(Severity s) {
  switch (s) {
    case Severity::none: return "none";
    case Severity::mild: return "mild";
    case Severity::moderate: return "moderate";
    case Severity::severe: return "severe";
  }
  return "?";
}

/// 0 zones: none, 1-2: mild, 3-4: moderate, 5-6: severe.
inline Severity severity_for(std::size_t zones) {
  if (zones == 0) return Severity::none;
  if (zones <= 2) return Severity::mild;
  if (zones <= 4) return Severity::moderate;
  return Severity::severe;
}

/// Zone order is row-major over a 3 (rows) x 2 (columns) grid of the image frame.
/// "left"/"right" refer to the image, not the patient.
inline constexpr std::array<const char*, 6> kZoneNames = {
    "upper_left", "upper_right", "middle_left", "middle_right", "lower_left", "lower_right"};

struct ZoneGrade {
  std::array<bool, 6> zone_flags{};
  Severity severity = Severity::none;
  double activation_threshold = 0.5;
  double area_fraction = 0.05;

  std::size_t hot_zones() const {
    return static_cast<std::size_t>(std::count(zone_flags.begin(), zone_flags.end(), true));
  }
};

/// Flags a zone when at least `area_fraction` of its pixels (and at least one) exceed
/// `activation_threshold`, then grades severity from the number of flagged zones.
template <typename T>
ZoneGrade zone_grade(const Tensor<T>& heat, double activation_threshold = 0.5,
                     double area_fraction = 0.05) {
  if (heat.rank() != 2) throw ArgumentError("zone_grade expects an h x w heatmap");
  std::size_t h = heat.dim(0), w = heat.dim(1);
  if (h < 3 || w < 2 || (h == 3 && w == 2))
    throw ArgumentError("heatmap " + shape_string(heat.shape()) + " is too small to split into 3x2 zones");
  if (!(area_fraction >= 0.0 && area_fraction <= 1.0))
    throw ArgumentError("area_fraction must be in [0, 1]");
  ZoneGrade g;
  g.activation_threshold = activation_threshold;
  g.area_fraction = area_fraction;
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 2; ++c) {
      std::size_t y0 = r * h / 3, y1 = (r + 1) * h / 3;
      std::size_t x0 = c * w / 2, x1 = (c + 1) * w / 2;
      std::size_t hot = 0;
      for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x1; ++x) hot += heat(y, x) > activation_threshold;
      double pixels = static_cast<double>((y1 - y0) * (x1 - x0));
      g.zone_flags[r * 2 + c] = hot > 0 && static_cast<double>(hot) >= area_fraction * pixels;
    }
  g.severity = severity_for(g.hot_zones());
  return g;
}

inline nlohmann::ordered_json to_json(const ZoneGrade& g) {
  nlohmann::ordered_json j;
  nlohmann::ordered_json zones;
  for (std::size_t i = 0; i < 6; ++i) zones[kZoneNames[i]] = g.zone_flags[i];
  j["zones"] = zones;
  j["hot_zones"] = g.hot_zones();
  j["severity"] = to_string(g.severity);
  j["activation_threshold"] = g.activation_threshold;
  j["area_fraction"] = g.area_fraction;
  return j;
}

}  // namespace radnet
