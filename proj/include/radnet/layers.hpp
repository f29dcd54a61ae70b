#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "radnet/errors.hpp"
#include "radnet/random.hpp"
#include "radnet/tensor.hpp"

namespace radnet {

enum class Mode { train, infer };

enum class LayerKind {
  conv2d,
  maxpool2x2,
  pad_even,
  batchnorm2d,
  dropout,
  dense,
  flatten,
  relu,
  sigmoid,
  softmax
};

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::maxpool2x2: return "maxpool2x2";
    case LayerKind::pad_even: return "pad_even";
    case LayerKind::batchnorm2d: return "batchnorm2d";
    case LayerKind::dropout: return "dropout";
    case LayerKind::dense: return "dense";
    case LayerKind::flatten: return "flatten";
    case LayerKind::relu: return "relu";
    case LayerKind::sigmoid: return "sigmoid";
    case LayerKind::softmax: return "softmax";
  }
  return "?";
}

/// Trainable tensor plus the gradient written by the last backward call.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
};

/// Result of a backward call: one gradient per parameter (keyed by full parameter
/// name) and the gradient with respect to the layer input.
template <typename T>
struct GradBundle {
  std::map<std::string, Tensor<T>> grads;
  Tensor<T> input_grad;
};

/// Non-trainable persistent tensor (batchnorm running statistics).
template <typename T>
struct Buffer {
  std::string name;
  Tensor<T>* value;
};

/// A differentiable layer. forward caches what backward needs; backward uses the mode
/// of the most recent forward call.
template <typename T>
class Layer {
 public:
  explicit Layer(std::string name) : name_(std::move(name)) {}
  virtual ~Layer() = default;
  Layer(const Layer&) = delete;
  Layer& operator=(const Layer&) = delete;

  virtual LayerKind kind() const = 0;
  virtual Tensor<T> forward(const Tensor<T>& x, Mode mode) = 0;
  virtual GradBundle<T> backward(const Tensor<T>& upstream) = 0;

  virtual std::span<Parameter<T>> parameters() { return {}; }
  virtual std::vector<Buffer<T>> buffers() { return {}; }

  const std::string& name() const noexcept { return name_; }

 protected:
  void require_forward(const char* what) const {
    if (!has_cache_)
      throw StateError(name_ + ": " + what + " called before forward");
  }
  void require_shape(const Tensor<T>& upstream, const Shape& expected) const {
    if (upstream.shape() != expected)
      throw ShapeError(name_ + ": upstream gradient " + shape_string(upstream.shape()) +
                       " does not match output " + shape_string(expected));
  }
  GradBundle<T> bundle(Tensor<T> input_grad) {
    GradBundle<T> b;
    for (auto& p : parameters()) b.grads.emplace(p.name, p.grad);
    b.input_grad = std::move(input_grad);
    return b;
  }

  std::string name_;
  bool has_cache_ = false;
  Mode cached_mode_ = Mode::infer;
};

namespace detail {

template <typename T>
Tensor<T> sample(const Tensor<T>& x, std::size_t n) {
  Shape s(x.shape().begin() + 1, x.shape().end());
  std::size_t stride = shape_size(s);
  auto src = x.data().subspan(n * stride, stride);
  return Tensor<T>(s, std::vector<T>(src.begin(), src.end()));
}

template <typename T>
void put_sample(Tensor<T>& x, std::size_t n, const Tensor<T>& s) {
  std::copy(s.data().begin(), s.data().end(), x.data().begin() + n * s.size());
}

inline void require_rank(const std::string& who, const Shape& s, std::size_t rank) {
  if (s.size() != rank)
    throw ShapeError(who + ": expected rank " + std::to_string(rank) + " input, got " +
                     shape_string(s));
}

}  // namespace detail

// ---------------------------------------------------------------------------

/// 2-D cross-correlation with zero "same" padding and stride 1.
/// Weight layout (out_ch, in_ch, kh, kw).
template <typename T>
class Conv2d final : public Layer<T> {
 public:
  Conv2d(std::string name, std::size_t in_ch, std::size_t out_ch, Shape2d kernel = {3, 3})
      : Layer<T>(std::move(name)), in_(in_ch), out_(out_ch), kernel_(kernel) {
    check_odd_kernel(kernel);
    params_.push_back({this->name_ + ".weight", Tensor<T>({out_ch, in_ch, kernel.height, kernel.width}), {}});
    params_.push_back({this->name_ + ".bias", Tensor<T>({out_ch}), {}});
  }

  LayerKind kind() const override { return LayerKind::conv2d; }
  std::span<Parameter<T>> parameters() override { return params_; }
  Tensor<T>& weight() { return params_[0].value; }
  Tensor<T>& bias() { return params_[1].value; }
  std::size_t in_channels() const { return in_; }
  std::size_t out_channels() const { return out_; }
  Shape2d kernel() const { return kernel_; }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
    detail::require_rank(this->name_, x.shape(), 4);
    if (x.dim(1) != in_)
      throw ShapeError(this->name_ + ": input has " + std::to_string(x.dim(1)) +
                       " channels, weights expect " + std::to_string(in_));
    std::size_t b = x.dim(0), h = x.dim(2), w = x.dim(3);
    Tensor<T> y({b, out_, h, w});
    const Tensor<T>& W = params_[0].value;
    const Tensor<T>& bias = params_[1].value;
    std::size_t k = in_ * kernel_.height * kernel_.width;
    std::size_t hw = h * w;
    for (std::size_t n = 0; n < b; ++n) {
      Tensor<T> cols = im2col(pad_same(detail::sample(x, n), kernel_), kernel_, 1);
      T* out = y.data().data() + n * out_ * hw;
      for (std::size_t f = 0; f < out_; ++f) std::fill(out + f * hw, out + (f + 1) * hw, bias[f]);
      detail::gemm(W.data().data(), cols.data().data(), out, out_, k, hw, true);
    }
    input_ = x;
    this->has_cache_ = true;
    this->cached_mode_ = mode;
    return y;
  }

  GradBundle<T> backward(const Tensor<T>& dy) override {
    this->require_forward("backward");
    std::size_t b = input_.dim(0), h = input_.dim(2), w = input_.dim(3);
    this->require_shape(dy, {b, out_, h, w});
    std::size_t k = in_ * kernel_.height * kernel_.width;
    std::size_t hw = h * w;
    Tensor<T> dW(params_[0].value.shape());
    Tensor<T> db({out_});
    Tensor<T> dx(input_.shape());
    Tensor<T> Wt = transpose(params_[0].value.reshaped({out_, k}));
    Shape padded{in_, h + kernel_.height - 1, w + kernel_.width - 1};
    for (std::size_t n = 0; n < b; ++n) {
      Tensor<T> cols = im2col(pad_same(detail::sample(input_, n), kernel_), kernel_, 1);
      const T* g = dy.data().data() + n * out_ * hw;
      for (std::size_t f = 0; f < out_; ++f)
        for (std::size_t p = 0; p < hw; ++p) db[f] += g[p + f * hw];
      Tensor<T> colsT = transpose(cols);
      detail::gemm(g, colsT.data().data(), dW.data().data(), out_, hw, k, true);
      Tensor<T> dcols({k, hw});
      detail::gemm(Wt.data().data(), g, dcols.data().data(), k, out_, hw, false);
      detail::put_sample(dx, n, crop_same(col2im(dcols, padded, kernel_, 1), kernel_));
    }
    params_[0].grad = std::move(dW);
    params_[1].grad = std::move(db);
    return this->bundle(std::move(dx));
  }

 private:
  std::size_t in_, out_;
  Shape2d kernel_;
  std::vector<Parameter<T>> params_;
  Tensor<T> input_;
};

/// 2x2 max pooling, stride 2. Ties resolve to the first element in row-major order.
template <typename T>
class MaxPool2x2 final : public Layer<T> {
 public:
  using Layer<T>::Layer;
  LayerKind kind() const override { return LayerKind::maxpool2x2; }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
    detail::require_rank(this->name_, x.shape(), 4);
    std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % 2 || w % 2)
      throw ShapeError(this->name_ + ": maxpool2x2 needs even spatial dims, got " +
                       shape_string(x.shape()));
    std::size_t oh = h / 2, ow = w / 2;
    Tensor<T> y({b, c, oh, ow});
    argmax_.assign(y.size(), 0);
    std::size_t o = 0;
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t ch = 0; ch < c; ++ch) {
        std::size_t base = (n * c + ch) * h * w;
        for (std::size_t i = 0; i < oh; ++i)
          for (std::size_t j = 0; j < ow; ++j, ++o) {
            std::size_t best = base + 2 * i * w + 2 * j;
            const std::size_t cand[3] = {best + 1, best + w, best + w + 1};
            for (auto q : cand)
              if (x[q] > x[best]) best = q;
            y[o] = x[best];
            argmax_[o] = best;
          }
      }
    input_shape_ = x.shape();
    this->has_cache_ = true;
    this->cached_mode_ = mode;
    return y;
  }

  GradBundle<T> backward(const Tensor<T>& dy) override {
    this->require_forward("backward");
    this->require_shape(dy, {input_shape_[0], input_shape_[1], input_shape_[2] / 2,
                             input_shape_[3] / 2});
    Tensor<T> dx(input_shape_);
    for (std::size_t o = 0; o < dy.size(); ++o) dx[argmax_[o]] += dy[o];
    return this->bundle(std::move(dx));
  }

 private:
  Shape input_shape_;
  std::vector<std::size_t> argmax_;
};

/// Appends one zero row and/or column when height/width is odd so a following
/// maxpool2x2 sees even dimensions.
template <typename T>
class PadEven final : public Layer<T> {
 public:
  using Layer<T>::Layer;
  LayerKind kind() const override { return LayerKind::pad_even; }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
    detail::require_rank(this->name_, x.shape(), 4);
    input_shape_ = x.shape();
    this->has_cache_ = true;
    this->cached_mode_ = mode;
    std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    std::size_t oh = h + h % 2, ow = w + w % 2;
    if (oh == h && ow == w) return x;
    Tensor<T> y({b, c, oh, ow});
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < h; ++i) std::copy_n(&x(n, ch, i, 0), w, &y(n, ch, i, 0));
    return y;
  }

  GradBundle<T> backward(const Tensor<T>& dy) override {
    this->require_forward("backward");
    std::size_t b = input_shape_[0], c = input_shape_[1], h = input_shape_[2], w = input_shape_[3];
    this->require_shape(dy, {b, c, h + h % 2, w + w % 2});
    if (dy.shape() == input_shape_) return this->bundle(dy);
    Tensor<T> dx(input_shape_);
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < h; ++i) std::copy_n(&dy(n, ch, i, 0), w, &dx(n, ch, i, 0));
    return this->bundle(std::move(dx));
  }

 private:
  Shape input_shape_;
};

/// Per-channel batch normalization over (batch, height, width).
///
/// Train mode normalizes with the batch statistics (biased variance) and folds them
/// into the running estimates as running = momentum * running + (1 - momentum) * batch.
/// Infer mode uses the running estimates, which must exist: either from a train step,
/// from reset_running_stats(), or loaded from a checkpoint.
template <typename T>
class BatchNorm2d final : public Layer<T> {
 public:
  BatchNorm2d(std::string name, std::size_t channels, double eps = 1e-5, double momentum = 0.9)
      : Layer<T>(std::move(name)), channels_(channels), eps_(eps), momentum_(momentum),
        running_mean_({channels}), running_var_({channels}) {
    params_.push_back({this->name_ + ".gamma", Tensor<T>({channels}, T(1)), {}});
    params_.push_back({this->name_ + ".beta", Tensor<T>({channels}), {}});
  }

  LayerKind kind() const override { return LayerKind::batchnorm2d; }
  std::span<Parameter<T>> parameters() override { return params_; }
  std::vector<Buffer<T>> buffers() override {
    return {{this->name_ + ".running_mean", &running_mean_},
            {this->name_ + ".running_var", &running_var_}};
  }

  Tensor<T>& gamma() { return params_[0].value; }
  Tensor<T>& beta() { return params_[1].value; }
  const Tensor<T>& running_mean() const { return running_mean_; }
  const Tensor<T>& running_var() const { return running_var_; }
  bool has_running_stats() const { return has_stats_; }

  /// Running mean 0, variance 1: infer mode then only applies gamma/beta and the eps scale.
  void reset_running_stats() {
    running_mean_ = Tensor<T>({channels_});
    running_var_ = Tensor<T>({channels_}, T(1));
    has_stats_ = true;
  }
  void set_running_stats(Tensor<T> mean, Tensor<T> var) {
    if (mean.shape() != Shape{channels_} || var.shape() != Shape{channels_})
      throw ShapeError(this->name_ + ": running stats must have shape [" +
                       std::to_string(channels_) + "]");
    for (auto v : var.data())
      if (!(v >= 0)) throw ArgumentError(this->name_ + ": running variance must be >= 0");
    running_mean_ = std::move(mean);
    running_var_ = std::move(var);
    has_stats_ = true;
  }
  /// Marks buffers written in place (checkpoint loading) as valid.
  void mark_stats_loaded() { has_stats_ = true; }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
    detail::require_rank(this->name_, x.shape(), 4);
    if (x.dim(1) != channels_)
      throw ShapeError(this->name_ + ": expected " + std::to_string(channels_) +
                       " channels, got " + shape_string(x.shape()));
    std::size_t b = x.dim(0), hw = x.dim(2) * x.dim(3);
    std::size_t count = b * hw;
    const Tensor<T>& g = params_[0].value;
    const Tensor<T>& beta = params_[1].value;

    inv_std_.assign(channels_, 0);
    xhat_ = Tensor<T>(x.shape());
    Tensor<T> y(x.shape());
    if (mode == Mode::train) {
      if (count < 2)
        throw ShapeError(this->name_ + ": train mode needs at least 2 values per channel");
      if (!has_stats_) reset_running_stats();
      for (std::size_t c = 0; c < channels_; ++c) {
        double sum = 0;
        for (std::size_t n = 0; n < b; ++n) {
          const T* p = x.data().data() + (n * channels_ + c) * hw;
          for (std::size_t i = 0; i < hw; ++i) sum += p[i];
        }
        double mean = sum / count;
        double ss = 0;
        for (std::size_t n = 0; n < b; ++n) {
          const T* p = x.data().data() + (n * channels_ + c) * hw;
          for (std::size_t i = 0; i < hw; ++i) ss += (p[i] - mean) * (p[i] - mean);
        }
        double var = ss / count;
        inv_std_[c] = 1.0 / std::sqrt(var + eps_);
        apply(x, y, c, mean, inv_std_[c], g[c], beta[c]);
        running_mean_[c] = static_cast<T>(momentum_ * running_mean_[c] + (1 - momentum_) * mean);
        running_var_[c] = static_cast<T>(momentum_ * running_var_[c] + (1 - momentum_) * var);
      }
    } else {
      if (!has_stats_)
        throw StateError(this->name_ + ": infer mode before any train step and no loaded stats");
      for (std::size_t c = 0; c < channels_; ++c) {
        inv_std_[c] = 1.0 / std::sqrt(static_cast<double>(running_var_[c]) + eps_);
        apply(x, y, c, running_mean_[c], inv_std_[c], g[c], beta[c]);
      }
    }
    batch_ = b;
    hw_ = hw;
    this->has_cache_ = true;
    this->cached_mode_ = mode;
    return y;
  }

  GradBundle<T> backward(const Tensor<T>& dy) override {
    this->require_forward("backward");
    this->require_shape(dy, xhat_.shape());
    const Tensor<T>& g = params_[0].value;
    Tensor<T> dgamma({channels_});
    Tensor<T> dbeta({channels_});
    Tensor<T> dx(dy.shape());
    double count = static_cast<double>(batch_ * hw_);
    for (std::size_t c = 0; c < channels_; ++c) {
      double sdy = 0, sdyx = 0;
      for (std::size_t n = 0; n < batch_; ++n) {
        std::size_t off = (n * channels_ + c) * hw_;
        for (std::size_t i = 0; i < hw_; ++i) {
          sdy += dy[off + i];
          sdyx += static_cast<double>(dy[off + i]) * xhat_[off + i];
        }
      }
      dgamma[c] = static_cast<T>(sdyx);
      dbeta[c] = static_cast<T>(sdy);
      double scale = g[c] * inv_std_[c];
      for (std::size_t n = 0; n < batch_; ++n) {
        std::size_t off = (n * channels_ + c) * hw_;
        for (std::size_t i = 0; i < hw_; ++i) {
          if (this->cached_mode_ == Mode::train)
            dx[off + i] = static_cast<T>(scale / count *
                                         (count * dy[off + i] - sdy - xhat_[off + i] * sdyx));
          else
            dx[off + i] = static_cast<T>(scale * dy[off + i]);
        }
      }
    }
    params_[0].grad = std::move(dgamma);
    params_[1].grad = std::move(dbeta);
    return this->bundle(std::move(dx));
  }

 private:
  void apply(const Tensor<T>& x, Tensor<T>& y, std::size_t c, double mean, double inv_std,
             double gamma, double beta) {
    std::size_t b = x.dim(0), hw = x.dim(2) * x.dim(3);
    for (std::size_t n = 0; n < b; ++n) {
      std::size_t off = (n * channels_ + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        double xh = (x[off + i] - mean) * inv_std;
        xhat_[off + i] = static_cast<T>(xh);
        y[off + i] = static_cast<T>(gamma * xh + beta);
      }
    }
  }

  std::size_t channels_;
  double eps_, momentum_;
  std::vector<Parameter<T>> params_;
  Tensor<T> running_mean_, running_var_;
  bool has_stats_ = false;
  Tensor<T> xhat_;
  std::vector<double> inv_std_;
  std::size_t batch_ = 0, hw_ = 0;
};

/// Inverted dropout. The train-mode mask is a pure function of (seed, layer salt,
/// noise key, element index); the same key always reproduces the same mask.
template <typename T>
class Dropout final : public Layer<T> {
 public:
  Dropout(std::string name, double rate, std::uint64_t seed, std::uint64_t salt)
      : Layer<T>(std::move(name)), rate_(rate), stream_(mix64(seed, salt)) {
    if (!(rate >= 0.0 && rate < 1.0))
      throw ArgumentError(this->name_ + ": dropout rate must be in [0, 1), got " +
                          std::to_string(rate));
  }

  LayerKind kind() const override { return LayerKind::dropout; }
  double rate() const { return rate_; }
  void set_noise_key(std::uint64_t key) { key_ = key; }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
    this->has_cache_ = true;
    this->cached_mode_ = mode;
    shape_ = x.shape();
    if (mode == Mode::infer || rate_ == 0.0) {
      mask_.clear();
      return x;
    }
    std::uint64_t base = mix64(stream_, key_);
    T keep_scale = static_cast<T>(1.0 / (1.0 - rate_));
    mask_.assign(x.size(), T(0));
    Tensor<T> y = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (unit_double(mix64(base + i)) >= rate_) mask_[i] = keep_scale;
      y[i] *= mask_[i];
    }
    return y;
  }

  GradBundle<T> backward(const Tensor<T>& dy) override {
    this->require_forward("backward");
    this->require_shape(dy, shape_);
    if (mask_.empty()) return this->bundle(dy);
    Tensor<T> dx = dy;
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= mask_[i];
    return this->bundle(std::move(dx));
  }

 private:
  double rate_;
  std::uint64_t stream_;
  std::uint64_t key_ = 0;
  Shape shape_;
  std::vector<T> mask_;
};

/// Fully connected layer, y = x W^T + b with W of shape (out, in).
template <typename T>
class Dense final : public Layer<T> {
 public:
  Dense(std::string name, std::size_t in, std::size_t out)
      : Layer<T>(std::move(name)), in_(in), out_(out) {
    params_.push_back({this->name_ + ".weight", Tensor<T>({out, in}), {}});
    params_.push_back({this->name_ + ".bias", Tensor<T>({out}), {}});
  }

  LayerKind kind() const override { return LayerKind::dense; }
  std::span<Parameter<T>> parameters() override { return params_; }
  Tensor<T>& weight() { return params_[0].value; }
  Tensor<T>& bias() { return params_[1].value; }
  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
    if (x.rank() != 2 || x.dim(1) != in_)
      throw ShapeError(this->name_ + ": input " + shape_string(x.shape()) +
                       " does not match weights " + shape_string(params_[0].value.shape()));
    Tensor<T> y = matmul(x, transpose(params_[0].value));
    const Tensor<T>& b = params_[1].value;
    for (std::size_t n = 0; n < y.dim(0); ++n)
      for (std::size_t j = 0; j < out_; ++j) y(n, j) += b[j];
    input_ = x;
    this->has_cache_ = true;
    this->cached_mode_ = mode;
    return y;
  }

  GradBundle<T> backward(const Tensor<T>& dy) override {
    this->require_forward("backward");
    this->require_shape(dy, {input_.dim(0), out_});
    params_[0].grad = matmul(transpose(dy), input_);
    params_[1].grad = reduce(dy, ReduceKind::sum, {0});
    return this->bundle(matmul(dy, params_[0].value));
  }

 private:
  std::size_t in_, out_;
  std::vector<Parameter<T>> params_;
  Tensor<T> input_;
};

/// (b, c, h, w) -> (b, c*h*w).
template <typename T>
class Flatten final : public Layer<T> {
 public:
  using Layer<T>::Layer;
  LayerKind kind() const override { return LayerKind::flatten; }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
    shape_ = x.shape();
    this->has_cache_ = true;
    this->cached_mode_ = mode;
    return x.reshaped({x.dim(0), x.size() / x.dim(0)});
  }
  GradBundle<T> backward(const Tensor<T>& dy) override {
    this->require_forward("backward");
    if (dy.size() != shape_size(shape_))
      throw ShapeError(this->name_ + ": upstream gradient " + shape_string(dy.shape()) +
                       " does not match input " + shape_string(shape_));
    return this->bundle(dy.reshaped(shape_));
  }

 private:
  Shape shape_;
};

template <typename T>
class Relu final : public Layer<T> {
 public:
  using Layer<T>::Layer;
  LayerKind kind() const override { return LayerKind::relu; }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
    input_ = x;
    this->has_cache_ = true;
    this->cached_mode_ = mode;
    return map(x, [](T v) { return v > T(0) ? v : T(0); });
  }
  GradBundle<T> backward(const Tensor<T>& dy) override {
    this->require_forward("backward");
    this->require_shape(dy, input_.shape());
    return this->bundle(zip(dy, input_, [](T g, T v) { return v > T(0) ? g : T(0); }));
  }

 private:
  Tensor<T> input_;
};

template <typename T>
T sigmoid(T v) {
  // Split by sign so exp never overflows.
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  T e = std::exp(v);
  return e / (T(1) + e);
}

template <typename T>
class Sigmoid final : public Layer<T> {
 public:
  using Layer<T>::Layer;
  LayerKind kind() const override { return LayerKind::sigmoid; }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
    output_ = map(x, [](T v) { return sigmoid(v); });
    this->has_cache_ = true;
    this->cached_mode_ = mode;
    return output_;
  }
  GradBundle<T> backward(const Tensor<T>& dy) override {
    this->require_forward("backward");
    this->require_shape(dy, output_.shape());
    return this->bundle(zip(dy, output_, [](T g, T y) { return g * y * (T(1) - y); }));
  }

 private:
  Tensor<T> output_;
};

/// Row-wise softmax of a (batch, classes) tensor.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("softmax expects (batch, classes), got " + shape_string(x.shape()));
  Tensor<T> y(x.shape());
  std::size_t k = x.dim(1);
  for (std::size_t n = 0; n < x.dim(0); ++n) {
    T m = x(n, 0);
    for (std::size_t j = 1; j < k; ++j) m = std::max(m, x(n, j));
    T s = 0;
    for (std::size_t j = 0; j < k; ++j) s += (y(n, j) = std::exp(x(n, j) - m));
    for (std::size_t j = 0; j < k; ++j) y(n, j) /= s;
  }
  return y;
}

template <typename T>
class Softmax final : public Layer<T> {
 public:
  using Layer<T>::Layer;
  LayerKind kind() const override { return LayerKind::softmax; }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
    output_ = softmax_rows(x);
    this->has_cache_ = true;
    this->cached_mode_ = mode;
    return output_;
  }
  GradBundle<T> backward(const Tensor<T>& dy) override {
    this->require_forward("backward");
    this->require_shape(dy, output_.shape());
    Tensor<T> dx(dy.shape());
    std::size_t k = dy.dim(1);
    for (std::size_t n = 0; n < dy.dim(0); ++n) {
      T dot = 0;
      for (std::size_t j = 0; j < k; ++j) dot += dy(n, j) * output_(n, j);
      for (std::size_t j = 0; j < k; ++j) dx(n, j) = output_(n, j) * (dy(n, j) - dot);
    }
    return this->bundle(std::move(dx));
  }

 private:
  Tensor<T> output_;
};

}  // namespace radnet
