#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "radnet/errors.hpp"
#include "radnet/parallel.hpp"

namespace radnet {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

/// Height/width pair for images, kernels and resize targets.
struct Shape2d {
  std::size_t height = 1;
  std::size_t width = 1;

  friend bool operator==(const Shape2d&, const Shape2d&) = default;
};

/// Dense row-major tensor of rank 1..4. Image batches are (batch, channel, height, width).
/// A default-constructed tensor is empty (rank 0) and only serves as a "not set" value.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (data_.size() != shape_size(shape_))
      throw ShapeError("tensor data has " + std::to_string(data_.size()) +
                       " values but shape " + shape_string(shape_) + " needs " +
                       std::to_string(shape_size(shape_)));
  }

  Tensor(Shape shape, std::initializer_list<T> values)
      : Tensor(std::move(shape), std::vector<T>(values)) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  template <typename... Idx>
  T& operator()(Idx... idx) {
    return data_[offset(idx...)];
  }
  template <typename... Idx>
  const T& operator()(Idx... idx) const {
    return data_[offset(idx...)];
  }

  /// Same data, new shape of equal element count.
  Tensor reshaped(Shape shape) const& {
    Tensor out(std::move(shape), data_);
    return out;
  }
  Tensor reshaped(Shape shape) && {
    Tensor out(std::move(shape), std::move(data_));
    return out;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static void check_shape(const Shape& s) {
    if (s.empty() || s.size() > 4)
      throw ShapeError("tensor rank must be 1..4, got " + std::to_string(s.size()));
    for (auto d : s)
      if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_string(s));
  }

  template <typename... Idx>
  std::size_t offset(Idx... idx) const {
    const std::size_t ix[] = {static_cast<std::size_t>(idx)...};
    std::size_t off = 0;
    for (std::size_t i = 0; i < sizeof...(Idx); ++i) off = off * shape_[i] + ix[i];
    return off;
  }

  Shape shape_;
  std::vector<T> data_;
};

// ---------------------------------------------------------------------------
// Elementwise helpers

template <typename T, typename F>
Tensor<T> map(const Tensor<T>& x, F&& f) {
  Tensor<T> out = x;
  for (auto& v : out.data()) v = f(v);
  return out;
}

template <typename T, typename F>
Tensor<T> zip(const Tensor<T>& a, const Tensor<T>& b, F&& f) {
  if (a.shape() != b.shape())
    throw ShapeError("elementwise op on " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  Tensor<T> out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(o[i], bd[i]);
  return out;
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return zip(a, b, std::plus<T>());
}
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return zip(a, b, std::minus<T>());
}
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, T s) {
  return map(a, [s](T v) { return v * s; });
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("compare " + shape_string(a.shape()) + " with " + shape_string(b.shape()));
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// ---------------------------------------------------------------------------
// Matrix products

namespace detail {

// c[m x n] (+)= a[m x k] * b[k x n], all row-major. Rows of c are independent, so the
// row-parallel split is bitwise identical to the serial loop.
template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate) {
  std::size_t min_rows = std::max<std::size_t>(1, (1u << 16) / std::max<std::size_t>(1, k * n));
  parallel_for(m, min_rows, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      T* crow = c + i * n;
      if (!accumulate) std::fill(crow, crow + n, T(0));
      const T* arow = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        T av = arow[p];
        if (av == T(0)) continue;
        const T* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  });
}

}  // namespace detail

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("transpose needs a matrix, got " + shape_string(a.shape()));
  std::size_t r = a.dim(0), c = a.dim(1);
  Tensor<T> out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul dimension mismatch: " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  Tensor<T> c({a.dim(0), b.dim(1)});
  detail::gemm(a.data().data(), b.data().data(), c.data().data(), a.dim(0), a.dim(1), b.dim(1),
               false);
  return c;
}

// ---------------------------------------------------------------------------
// Convolution lowering

inline void check_odd_kernel(Shape2d kernel) {
  if (kernel.height == 0 || kernel.width == 0 || kernel.height % 2 == 0 || kernel.width % 2 == 0)
    throw ArgumentError("unsupported kernel " + std::to_string(kernel.height) + "x" +
                        std::to_string(kernel.width) + ": sides must be odd");
}

/// Zero border of (k-1)/2 on each side so that a following valid convolution keeps h x w.
template <typename T>
Tensor<T> pad_same(const Tensor<T>& x, Shape2d kernel) {
  check_odd_kernel(kernel);
  if (x.rank() != 3) throw ShapeError("pad_same expects c x h x w, got " + shape_string(x.shape()));
  std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  std::size_t ph = kernel.height / 2, pw = kernel.width / 2;
  std::size_t oh = h + 2 * ph, ow = w + 2 * pw;
  Tensor<T> out({c, oh, ow});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h; ++i)
      std::copy_n(&x(ch, i, 0), w, &out(ch, i + ph, pw));
  return out;
}

/// Inverse of pad_same on the interior: drops the (k-1)/2 border.
template <typename T>
Tensor<T> crop_same(const Tensor<T>& x, Shape2d kernel) {
  check_odd_kernel(kernel);
  if (x.rank() != 3) throw ShapeError("crop_same expects c x h x w, got " + shape_string(x.shape()));
  std::size_t ph = kernel.height / 2, pw = kernel.width / 2;
  if (x.dim(1) <= 2 * ph || x.dim(2) <= 2 * pw)
    throw ShapeError("crop_same: " + shape_string(x.shape()) + " too small for kernel");
  std::size_t c = x.dim(0), h = x.dim(1) - 2 * ph, w = x.dim(2) - 2 * pw;
  Tensor<T> out({c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h; ++i) std::copy_n(&x(ch, i + ph, pw), w, &out(ch, i, 0));
  return out;
}

namespace detail {

inline std::pair<std::size_t, std::size_t> conv_out_dims(const Shape& s, Shape2d kernel,
                                                         std::size_t stride) {
  if (stride == 0) throw ArgumentError("stride must be positive");
  if (s.size() != 3) throw ShapeError("expected c x h x w, got " + shape_string(s));
  std::size_t h = s[1], w = s[2];
  if (kernel.height == 0 || kernel.width == 0 || kernel.height > h || kernel.width > w)
    throw ShapeError("kernel larger than input " + shape_string(s));
  if ((h - kernel.height) % stride != 0 || (w - kernel.width) % stride != 0)
    throw ShapeError("stride " + std::to_string(stride) + " does not tile input " +
                     shape_string(s));
  return {(h - kernel.height) / stride + 1, (w - kernel.width) / stride + 1};
}

}  // namespace detail

/// Lowers a (pre-padded) c x h x w input to a (c*kh*kw) x (oh*ow) matrix. Row index is
/// (channel, ky, kx) row-major; column j is output position j in row-major order.
template <typename T>
Tensor<T> im2col(const Tensor<T>& x, Shape2d kernel, std::size_t stride) {
  auto [oh, ow] = detail::conv_out_dims(x.shape(), kernel, stride);
  std::size_t c = x.dim(0);
  std::size_t rows = c * kernel.height * kernel.width;
  Tensor<T> cols({rows, oh * ow});
  T* out = cols.data().data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t ky = 0; ky < kernel.height; ++ky)
      for (std::size_t kx = 0; kx < kernel.width; ++kx) {
        T* row = out + ((ch * kernel.height + ky) * kernel.width + kx) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const T* src = &x(ch, oy * stride + ky, kx);
          if (stride == 1) {
            std::copy_n(src, ow, row + oy * ow);
          } else {
            for (std::size_t ox = 0; ox < ow; ++ox) row[oy * ow + ox] = src[ox * stride];
          }
        }
      }
  return cols;
}

/// Adjoint of im2col: scatters-and-adds columns back into a c x h x w image.
template <typename T>
Tensor<T> col2im(const Tensor<T>& cols, const Shape& image_shape, Shape2d kernel,
                 std::size_t stride) {
  auto [oh, ow] = detail::conv_out_dims(image_shape, kernel, stride);
  std::size_t c = image_shape[0];
  if (cols.rank() != 2 || cols.dim(0) != c * kernel.height * kernel.width ||
      cols.dim(1) != oh * ow)
    throw ShapeError("col2im: columns " + shape_string(cols.shape()) + " do not match image " +
                     shape_string(image_shape));
  Tensor<T> img(image_shape);
  const T* in = cols.data().data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t ky = 0; ky < kernel.height; ++ky)
      for (std::size_t kx = 0; kx < kernel.width; ++kx) {
        const T* row = in + ((ch * kernel.height + ky) * kernel.width + kx) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          T* dst = &img(ch, oy * stride + ky, kx);
          for (std::size_t ox = 0; ox < ow; ++ox) dst[ox * stride] += row[oy * ow + ox];
        }
      }
  return img;
}

// ---------------------------------------------------------------------------
// Resampling

/// Bilinear resize with the half-pixel (pixel-center) convention and edge clamping.
/// Accepts c x h x w or h x w.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, Shape2d out) {
  if (out.height == 0 || out.width == 0) throw ArgumentError("resize target must be non-empty");
  if (x.rank() == 2)
    return bilinear_resize(x.reshaped({1, x.dim(0), x.dim(1)}), out)
        .reshaped({out.height, out.width});
  if (x.rank() != 3)
    throw ShapeError("bilinear_resize expects c x h x w, got " + shape_string(x.shape()));
  std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h == out.height && w == out.width) return x;

  struct Tap {
    std::size_t i0, i1;
    double f;
  };
  auto taps = [](std::size_t in, std::size_t n) {
    std::vector<Tap> t(n);
    double scale = static_cast<double>(in) / static_cast<double>(n);
    for (std::size_t d = 0; d < n; ++d) {
      double src = (static_cast<double>(d) + 0.5) * scale - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(in - 1));
      auto i0 = static_cast<std::size_t>(std::floor(src));
      std::size_t i1 = std::min(i0 + 1, in - 1);
      t[d] = {i0, i1, src - static_cast<double>(i0)};
    }
    return t;
  };
  auto ty = taps(h, out.height);
  auto tx = taps(w, out.width);

  Tensor<T> y({c, out.height, out.width});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < out.height; ++i) {
      const auto& a = ty[i];
      for (std::size_t j = 0; j < out.width; ++j) {
        const auto& b = tx[j];
        double top = x(ch, a.i0, b.i0) * (1 - b.f) + x(ch, a.i0, b.i1) * b.f;
        double bot = x(ch, a.i1, b.i0) * (1 - b.f) + x(ch, a.i1, b.i1) * b.f;
        y(ch, i, j) = static_cast<T>(top * (1 - a.f) + bot * a.f);
      }
    }
  return y;
}

// ---------------------------------------------------------------------------
// Reductions

enum class ReduceKind { sum, mean, max };

/// Reduces over `axes`, removing them from the shape. Reducing every axis yields shape [1].
template <typename T>
Tensor<T> reduce(const Tensor<T>& x, ReduceKind kind, std::vector<std::size_t> axes) {
  if (axes.empty()) throw ArgumentError("reduce needs at least one axis");
  std::sort(axes.begin(), axes.end());
  if (std::adjacent_find(axes.begin(), axes.end()) != axes.end())
    throw ArgumentError("reduce axes must be distinct");
  if (axes.back() >= x.rank())
    throw ArgumentError("reduce axis " + std::to_string(axes.back()) + " out of range for " +
                        shape_string(x.shape()));

  const Shape& s = x.shape();
  std::vector<bool> reduced(s.size(), false);
  for (auto a : axes) reduced[a] = true;
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (!reduced[i]) out_shape.push_back(s[i]);
  if (out_shape.empty()) out_shape.push_back(1);

  std::size_t count = 1;
  for (auto a : axes) count *= s[a];

  T init = kind == ReduceKind::max ? -std::numeric_limits<T>::infinity() : T(0);
  Tensor<T> out(out_shape, init);
  std::vector<std::size_t> idx(s.size(), 0);
  for (std::size_t flat = 0; flat < x.size(); ++flat) {
    std::size_t o = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (!reduced[i]) o = o * s[i] + idx[i];
    T v = x[flat];
    if (kind == ReduceKind::max)
      out[o] = std::max(out[o], v);
    else
      out[o] += v;
    for (std::size_t i = s.size(); i-- > 0;) {
      if (++idx[i] < s[i]) break;
      idx[i] = 0;
    }
  }
  if (kind == ReduceKind::mean)
    for (auto& v : out.data()) v /= static_cast<T>(count);
  return out;
}

template <typename T>
T reduce_all(const Tensor<T>& x, ReduceKind kind) {
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  return reduce(x, kind, axes)[0];
}

}  // namespace radnet
