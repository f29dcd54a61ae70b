#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "radnet/errors.hpp"
#include "radnet/layers.hpp"
#include "radnet/loss.hpp"
#include "radnet/random.hpp"
#include "radnet/task.hpp"
#include "radnet/tensor.hpp"

namespace radnet {

/// Declarative description of the classifier. Defaults describe the full-size network:
/// six conv blocks of two 3x3 convolutions each, filters doubling from 16 to 512,
/// dense head 512-128-64 and a 224x224x3 input.
struct ModelSpec {
  Task task = Task::binary;
  Shape2d input{224, 224};
  std::size_t channels = 3;
  std::vector<std::size_t> block_filters{16, 32, 64, 128, 256, 512};
  std::size_t convs_per_block = 2;
  std::size_t kernel = 3;
  std::vector<std::size_t> dense_sizes{512, 128, 64};
  double dropout_conv = 0.25;
  double dropout_dense = 0.5;
  // Odd feature maps get one zero row/column before pooling (224 -> ... -> 7 -> 8 -> 4).
  bool pad_odd = true;
  std::uint64_t seed = 0;

  std::size_t outputs() const { return num_outputs(task); }

  void validate() const {
    if (input.height == 0 || input.width == 0 || channels == 0)
      throw SpecError("input dimensions must be positive");
    if (block_filters.empty()) throw SpecError("block_filters must not be empty");
    for (auto f : block_filters)
      if (f == 0) throw SpecError("block_filters entries must be positive");
    if (convs_per_block == 0) throw SpecError("convs_per_block must be positive");
    if (kernel == 0 || kernel % 2 == 0) throw SpecError("kernel side must be odd");
    for (auto d : dense_sizes)
      if (d == 0) throw SpecError("dense_sizes entries must be positive");
    for (double r : {dropout_conv, dropout_dense})
      if (!(r >= 0.0 && r < 1.0)) throw SpecError("dropout rates must be in [0, 1)");
    if (!pad_odd) {
      std::size_t div = std::size_t{1} << block_filters.size();
      if (input.height % div || input.width % div)
        throw SpecError("input " + std::to_string(input.height) + "x" +
                        std::to_string(input.width) + " is not divisible by " +
                        std::to_string(div) + " and pad_odd is off");
    }
  }

  /// Canonical "key=value" lines; from_text(to_text()) reproduces the spec exactly.
  std::string to_text() const {
    std::ostringstream os;
    auto list = [](const std::vector<std::size_t>& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
      return s;
    };
    auto real = [](double d) {
      char buf[40];
      std::snprintf(buf, sizeof buf, "%.17g", d);
      return std::string(buf);
    };
    os << "task=" << to_string(task) << '\n'
       << "input=" << input.height << 'x' << input.width << 'x' << channels << '\n'
       << "block_filters=" << list(block_filters) << '\n'
       << "convs_per_block=" << convs_per_block << '\n'
       << "kernel=" << kernel << '\n'
       << "dense_sizes=" << list(dense_sizes) << '\n'
       << "dropout_conv=" << real(dropout_conv) << '\n'
       << "dropout_dense=" << real(dropout_dense) << '\n'
       << "pad_odd=" << (pad_odd ? "true" : "false") << '\n'
       << "seed=" << seed << '\n';
    return os.str();
  }

  /// Parses `to_text` output. Blank lines and '#' comments are ignored; missing keys
  /// keep their defaults.
  static ModelSpec from_text(std::string_view text) {
    ModelSpec spec;
    std::istringstream is{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    auto to_uint = [&](const std::string& v) -> std::uint64_t {
      try {
        std::size_t pos = 0;
        auto r = std::stoull(v, &pos);
        if (pos != v.size() || v.empty() || v[0] == '-') throw std::invalid_argument(v);
        return r;
      } catch (const std::exception&) {
        throw SpecError("line " + std::to_string(lineno) + ": bad integer '" + v + "'");
      }
    };
    auto to_real = [&](const std::string& v) {
      try {
        std::size_t pos = 0;
        double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
      } catch (const std::exception&) {
        throw SpecError("line " + std::to_string(lineno) + ": bad number '" + v + "'");
      }
    };
    auto to_list = [&](const std::string& v) {
      std::vector<std::size_t> out;
      if (v.empty()) return out;
      std::istringstream ls(v);
      std::string item;
      while (std::getline(ls, item, ',')) out.push_back(to_uint(item));
      return out;
    };
    while (std::getline(is, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line[0] == '#') continue;
      auto eq = line.find('=');
      if (eq == std::string::npos)
        throw SpecError("line " + std::to_string(lineno) + ": expected key=value");
      std::string key = line.substr(0, eq), value = line.substr(eq + 1);
      if (key == "task") {
        try {
          spec.task = parse_task(value);
        } catch (const ArgumentError& e) {
          throw SpecError(e.what());
        }
      } else if (key == "input") {
        std::vector<std::size_t> dims;
        std::istringstream ds(value);
        std::string item;
        while (std::getline(ds, item, 'x')) dims.push_back(to_uint(item));
        if (dims.size() != 3) throw SpecError("input must be HxWxC, got '" + value + "'");
        spec.input = {dims[0], dims[1]};
        spec.channels = dims[2];
      } else if (key == "block_filters") {
        spec.block_filters = to_list(value);
      } else if (key == "convs_per_block") {
        spec.convs_per_block = to_uint(value);
      } else if (key == "kernel") {
        spec.kernel = to_uint(value);
      } else if (key == "dense_sizes") {
        spec.dense_sizes = to_list(value);
      } else if (key == "dropout_conv") {
        spec.dropout_conv = to_real(value);
      } else if (key == "dropout_dense") {
        spec.dropout_dense = to_real(value);
      } else if (key == "pad_odd") {
        if (value != "true" && value != "false") throw SpecError("pad_odd must be true or false");
        spec.pad_odd = value == "true";
      } else if (key == "seed") {
        spec.seed = to_uint(value);
      } else {
        throw SpecError("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
      }
    }
    return spec;
  }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// An ordered stack of layers whose last layer is the output activation (sigmoid or
/// softmax). Exclusively owned while training; read-only infer passes on distinct
/// models may run concurrently.
template <typename T>
class Model {
 public:
  Model(ModelSpec spec, std::vector<std::unique_ptr<Layer<T>>> layers)
      : spec_(std::move(spec)), layers_(std::move(layers)) {
    if (layers_.empty()) throw SpecError("model needs at least one layer");
  }

  const ModelSpec& spec() const noexcept { return spec_; }
  std::size_t num_layers() const noexcept { return layers_.size(); }
  Layer<T>& layer(std::size_t i) { return *layers_.at(i); }
  const Layer<T>& layer(std::size_t i) const { return *layers_.at(i); }

  LossKind loss_kind() const {
    return spec_.task == Task::binary ? LossKind::bce : LossKind::cce;
  }

  /// Index one past the last logit-producing layer, i.e. the position of the output
  /// activation.
  std::size_t logits_end() const {
    auto k = layers_.back()->kind();
    return (k == LayerKind::sigmoid || k == LayerKind::softmax) ? layers_.size() - 1
                                                                : layers_.size();
  }

  /// Index of the layer whose output is the final convolutional feature map: the last
  /// conv2d, advanced over directly following batchnorm/relu layers.
  std::optional<std::size_t> feature_layer() const {
    std::optional<std::size_t> last;
    for (std::size_t i = 0; i < layers_.size(); ++i)
      if (layers_[i]->kind() == LayerKind::conv2d) last = i;
    if (!last) return std::nullopt;
    std::size_t i = *last;
    while (i + 1 < layers_.size() && (layers_[i + 1]->kind() == LayerKind::batchnorm2d ||
                                      layers_[i + 1]->kind() == LayerKind::relu))
      ++i;
    return i;
  }

  void check_input(const Tensor<T>& batch) const {
    if (batch.rank() != 4 || batch.dim(1) != spec_.channels || batch.dim(2) != spec_.input.height ||
        batch.dim(3) != spec_.input.width)
      throw ShapeError("model expects (batch, " + std::to_string(spec_.channels) + ", " +
                       std::to_string(spec_.input.height) + ", " +
                       std::to_string(spec_.input.width) + ") input, got " +
                       shape_string(batch.shape()));
  }

  /// Probabilities: (batch, 1) for binary, (batch, 3) rows summing to 1 otherwise.
  Tensor<T> forward(const Tensor<T>& batch, Mode mode) {
    check_input(batch);
    return forward_range(batch, 0, layers_.size(), mode);
  }

  Tensor<T> forward_logits(const Tensor<T>& batch, Mode mode) {
    check_input(batch);
    return forward_range(batch, 0, logits_end(), mode);
  }

  /// Runs layers [begin, end).
  Tensor<T> forward_range(const Tensor<T>& x, std::size_t begin, std::size_t end, Mode mode) {
    if (begin > end || end > layers_.size()) throw ArgumentError("bad layer range");
    Tensor<T> h = x;
    for (std::size_t i = begin; i < end; ++i) h = layers_[i]->forward(h, mode);
    return h;
  }

  /// Backpropagates through layers [begin, end) in reverse, filling parameter grads.
  /// Returns the gradient with respect to the input of layer `begin`.
  Tensor<T> backward_range(const Tensor<T>& upstream, std::size_t begin, std::size_t end) {
    if (begin > end || end > layers_.size()) throw ArgumentError("bad layer range");
    Tensor<T> g = upstream;
    for (std::size_t i = end; i-- > begin;) g = layers_[i]->backward(g).input_grad;
    return g;
  }

  /// Backward from a gradient on the logits down to the input image.
  Tensor<T> backward_logits(const Tensor<T>& dlogits) {
    return backward_range(dlogits, 0, logits_end());
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& l : layers_)
      for (auto& p : l->parameters()) out.push_back(&p);
    return out;
  }

  std::vector<Buffer<T>> buffers() {
    std::vector<Buffer<T>> out;
    for (auto& l : layers_)
      for (auto& b : l->buffers()) out.push_back(b);
    return out;
  }

  /// Number of trainable scalars (conv/dense weights and biases, batchnorm gamma/beta).
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& l : layers_)
      for (auto& p : l->parameters()) n += p.value.size();
    return n;
  }

  /// Selects the dropout masks for subsequent train-mode forwards.
  void set_noise_key(std::uint64_t key) {
    for (auto& l : layers_)
      if (auto* d = dynamic_cast<Dropout<T>*>(l.get())) d->set_noise_key(key);
  }

 private:
  ModelSpec spec_;
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

template <typename T>
std::size_t parameter_count(const Model<T>& m) {
  return m.parameter_count();
}

namespace detail {

template <typename T>
void he_uniform(Tensor<T>& w, std::size_t fan_in, Rng& rng) {
  double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : w.data()) v = static_cast<T>(rng.uniform(-limit, limit));
}

}  // namespace detail

/// Builds the layer stack:
///   per block: [conv -> batchnorm -> relu] x convs_per_block -> (pad_even) -> maxpool -> dropout
///   flatten; per dense size: dense -> relu -> dropout; output dense -> sigmoid/softmax.
/// Weights are He-uniform from the spec seed, biases zero, batchnorm running stats 0/1.
template <typename T>
Model<T> build(const ModelSpec& spec) {
  spec.validate();
  std::vector<std::unique_ptr<Layer<T>>> layers;
  Rng rng(spec.seed);
  Shape2d k{spec.kernel, spec.kernel};
  std::size_t ch = spec.channels, h = spec.input.height, w = spec.input.width;
  auto salt = [&] { return static_cast<std::uint64_t>(layers.size()); };

  for (std::size_t b = 0; b < spec.block_filters.size(); ++b) {
    std::string block = "block" + std::to_string(b + 1);
    std::size_t f = spec.block_filters[b];
    for (std::size_t c = 0; c < spec.convs_per_block; ++c) {
      std::string idx = std::to_string(c + 1);
      auto conv = std::make_unique<Conv2d<T>>(block + ".conv" + idx, ch, f, k);
      detail::he_uniform(conv->weight(), ch * k.height * k.width, rng);
      layers.push_back(std::move(conv));
      auto bn = std::make_unique<BatchNorm2d<T>>(block + ".bn" + idx, f);
      bn->reset_running_stats();
      layers.push_back(std::move(bn));
      layers.push_back(std::make_unique<Relu<T>>(block + ".relu" + idx));
      ch = f;
    }
    if (h % 2 || w % 2) {
      if (!spec.pad_odd)
        throw SpecError(block + ": odd feature map " + std::to_string(h) + "x" +
                        std::to_string(w) + " before pooling");
      layers.push_back(std::make_unique<PadEven<T>>(block + ".pad"));
      h += h % 2;
      w += w % 2;
    }
    layers.push_back(std::make_unique<MaxPool2x2<T>>(block + ".pool"));
    h /= 2;
    w /= 2;
    layers.push_back(
        std::make_unique<Dropout<T>>(block + ".dropout", spec.dropout_conv, spec.seed, salt()));
  }

  layers.push_back(std::make_unique<Flatten<T>>("flatten"));
  std::size_t features = ch * h * w;
  for (std::size_t d = 0; d < spec.dense_sizes.size(); ++d) {
    std::string name = "dense" + std::to_string(d + 1);
    auto dense = std::make_unique<Dense<T>>(name, features, spec.dense_sizes[d]);
    detail::he_uniform(dense->weight(), features, rng);
    layers.push_back(std::move(dense));
    layers.push_back(std::make_unique<Relu<T>>(name + ".relu"));
    layers.push_back(
        std::make_unique<Dropout<T>>(name + ".dropout", spec.dropout_dense, spec.seed, salt()));
    features = spec.dense_sizes[d];
  }
  auto out = std::make_unique<Dense<T>>("output", features, spec.outputs());
  detail::he_uniform(out->weight(), features, rng);
  layers.push_back(std::move(out));
  if (spec.task == Task::binary)
    layers.push_back(std::make_unique<Sigmoid<T>>("output.sigmoid"));
  else
    layers.push_back(std::make_unique<Softmax<T>>("output.softmax"));
  return Model<T>(spec, std::move(layers));
}

}  // namespace radnet
