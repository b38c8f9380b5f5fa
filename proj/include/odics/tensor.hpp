#pragma once

#include <algorithm>
#include <cmath>
#include <type_traits>
#include <cstring>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "odics/error.hpp"
#include "odics/rng.hpp"

namespace odics {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

/// Dense row-major array. Rank-4 tensors use NCHW layout.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{})
      : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), values_(std::move(values)) {
    if (shape_size(shape_) != values_.size())
      throw ConfigError("tensor of shape " + shape_str(shape_) + " given " +
                        std::to_string(values_.size()) + " values");
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  T* data() noexcept { return values_.data(); }
  const T* data() const noexcept { return values_.data(); }
  std::span<T> values() noexcept { return values_; }
  std::span<const T> values() const noexcept { return values_; }
  std::vector<T>& storage() noexcept { return values_; }
  const std::vector<T>& storage() const noexcept { return values_; }

  T& operator[](std::size_t i) noexcept { return values_[i]; }
  const T& operator[](std::size_t i) const noexcept { return values_[i]; }

  std::size_t offset(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
    return ((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
    return values_[offset(n, c, h, w)];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
    return values_[offset(n, c, h, w)];
  }

  void fill(T v) { std::fill(values_.begin(), values_.end(), v); }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(values_.size());
    std::transform(values_.begin(), values_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](T v) { return std::isfinite(static_cast<double>(v)); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.values_ == b.values_;
  }

 private:
  Shape shape_;
  std::vector<T> values_;
};

using LabelTensor = Tensor<std::int32_t>;

/// Named parameter tensors in a fixed registration order.
template <class T>
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
  };

  void add(std::string name, Tensor<T> value) {
    for (const auto& e : entries_)
      if (e.name == name) throw ConfigError("duplicate parameter name " + name);
    entries_.push_back({std::move(name), std::move(value)});
  }

  std::size_t count() const noexcept { return entries_.size(); }
  Tensor<T>& operator[](std::size_t i) { return entries_[i].value; }
  const Tensor<T>& operator[](std::size_t i) const { return entries_[i].value; }
  const std::string& name(std::size_t i) const { return entries_[i].name; }
  const std::vector<Entry>& entries() const noexcept { return entries_; }

  const Tensor<T>& get(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return e.value;
    throw ConfigError("unknown parameter " + name);
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  /// Same names and shapes, all values zero.
  ParamSet zeros_like() const {
    ParamSet out;
    for (const auto& e : entries_) out.add(e.name, Tensor<T>(e.value.shape()));
    return out;
  }

  bool same_structure(const ParamSet& other) const {
    if (other.count() != count()) return false;
    for (std::size_t i = 0; i < count(); ++i)
      if (entries_[i].name != other.entries_[i].name ||
          entries_[i].value.shape() != other.entries_[i].value.shape())
        return false;
    return true;
  }

  /// Flat coordinate access across all parameters in registration order.
  T& flat(std::size_t i) {
    for (auto& e : entries_) {
      if (i < e.value.size()) return e.value[i];
      i -= e.value.size();
    }
    throw ConfigError("flat parameter index out of range");
  }
  T flat(std::size_t i) const { return const_cast<ParamSet*>(this)->flat(i); }

  template <class U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>());
    return out;
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    if (a.count() != b.count()) return false;
    for (std::size_t i = 0; i < a.count(); ++i)
      if (a.entries_[i].name != b.entries_[i].name || !(a.entries_[i].value == b.entries_[i].value))
        return false;
    return true;
  }

 private:
  std::vector<Entry> entries_;
};

/// Sum of squared differences over every coordinate.
template <class T>
double squared_distance(const ParamSet<T>& a, const ParamSet<T>& b) {
  if (!a.same_structure(b)) throw ConfigError("parameter sets differ in structure");
  double d = 0.0;
  for (std::size_t i = 0; i < a.count(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) {
      const double diff = static_cast<double>(a[i][j]) - static_cast<double>(b[i][j]);
      d += diff * diff;
    }
  return d;
}

// ---------------------------------------------------------------------------
// Kernels

/// Same-padded stride-1 convolution. input N×C×H×W, kernel O×C×k×k, bias O.
namespace detail {

/// Unrolls same-padded k×k neighborhoods: row (c, ky, kx) holds the input
/// plane c shifted by (ky − k/2, kx − k/2), zero outside.
template <class T>
void im2col(const T* in, std::size_t channels, std::size_t height, std::size_t width, std::size_t ksize, T* col) {
  const auto pad = static_cast<std::ptrdiff_t>(ksize / 2);
  const auto h = static_cast<std::ptrdiff_t>(height), w = static_cast<std::ptrdiff_t>(width);
  const std::size_t plane = height * width;
  for (std::size_t c = 0; c < channels; ++c)
    for (std::ptrdiff_t ky = 0; ky < static_cast<std::ptrdiff_t>(ksize); ++ky)
      for (std::ptrdiff_t kx = 0; kx < static_cast<std::ptrdiff_t>(ksize); ++kx) {
        T* dst = col + ((c * ksize + static_cast<std::size_t>(ky)) * ksize + static_cast<std::size_t>(kx)) * plane;
        const T* src = in + c * plane;
        const std::ptrdiff_t dy = ky - pad, dx = kx - pad;
        for (std::ptrdiff_t y = 0; y < h; ++y) {
          T* drow = dst + y * w;
          const std::ptrdiff_t sy = y + dy;
          if (sy < 0 || sy >= h) {
            std::fill(drow, drow + w, T{});
            continue;
          }
          const T* srow = src + sy * w;
          for (std::ptrdiff_t x = 0; x < w; ++x) {
            const std::ptrdiff_t sx = x + dx;
            drow[x] = (sx >= 0 && sx < w) ? srow[sx] : T{};
          }
        }
      }
}

// Vector width follows the target ISA. Only elementwise vector ops are used,
// so results do not depend on the width.
#if defined(__AVX__)
inline constexpr std::size_t kVectorBytes = 32;
#else
inline constexpr std::size_t kVectorBytes = 16;
#endif

template <class T>
struct Simd {
  static constexpr std::size_t kLanes = kVectorBytes / sizeof(T);
  typedef T Vec __attribute__((vector_size(kVectorBytes)));
  static Vec load(const T* p) {
    Vec v;
    std::memcpy(&v, p, sizeof(Vec));
    return v;
  }
  static void store(T* p, const Vec& v) { std::memcpy(p, &v, sizeof(Vec)); }
  static Vec splat(T x) {
    Vec v;
    for (std::size_t l = 0; l < kLanes; ++l) v[l] = x;
    return v;
  }
};

typedef double Double4 __attribute__((vector_size(32)));

template <class T>
Double4 load_double4(const T* p) {
  if constexpr (std::is_same_v<T, double>) {
    Double4 v;
    std::memcpy(&v, p, sizeof(v));
    return v;
  } else {
    return Double4{static_cast<double>(p[0]), static_cast<double>(p[1]), static_cast<double>(p[2]),
                   static_cast<double>(p[3])};
  }
}

/// out[o][p] = bias[o] + Σ_r a[o][r]·b[r][p], summed in increasing r for every
/// element. Tiled 4 rows × 2 vectors so accumulators stay in registers.
template <class T>
void gemm_bias(const T* a, const T* b, const T* bias, T* out, std::size_t m, std::size_t k, std::size_t n) {
  using S = Simd<T>;
  using V = typename S::Vec;
  constexpr std::size_t kRows = 4, kCols = 2 * S::kLanes;
  std::size_t o0 = 0;
  for (; o0 + kRows <= m; o0 += kRows) {
    std::size_t p0 = 0;
    for (; p0 + kCols <= n; p0 += kCols) {
      V acc[kRows][2];
      for (std::size_t i = 0; i < kRows; ++i) acc[i][0] = acc[i][1] = S::splat(bias[o0 + i]);
      for (std::size_t r = 0; r < k; ++r) {
        const V s0 = S::load(b + r * n + p0), s1 = S::load(b + r * n + p0 + S::kLanes);
        for (std::size_t i = 0; i < kRows; ++i) {
          const V w = S::splat(a[(o0 + i) * k + r]);
          acc[i][0] += w * s0;
          acc[i][1] += w * s1;
        }
      }
      for (std::size_t i = 0; i < kRows; ++i) {
        S::store(out + (o0 + i) * n + p0, acc[i][0]);
        S::store(out + (o0 + i) * n + p0 + S::kLanes, acc[i][1]);
      }
    }
    for (; p0 < n; ++p0)
      for (std::size_t i = 0; i < kRows; ++i) {
        T acc = bias[o0 + i];
        for (std::size_t r = 0; r < k; ++r) acc += a[(o0 + i) * k + r] * b[r * n + p0];
        out[(o0 + i) * n + p0] = acc;
      }
  }
  for (; o0 < m; ++o0) {
    T* row = out + o0 * n;
    std::fill(row, row + n, bias[o0]);
    for (std::size_t r = 0; r < k; ++r) {
      const T w = a[o0 * k + r];
      const T* src = b + r * n;
      for (std::size_t p = 0; p < n; ++p) row[p] += w * src[p];
    }
  }
}

/// c[i][j] += Σ_p a[i][p]·b[j][p], each sum formed like dot(): double
/// partials over p mod 4, combined as (s0 + s1) + (s2 + s3).
template <class T>
void gemm_abt_add(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k) {
  const std::size_t k4 = k - k % 4;
  auto finish = [&](const Double4& acc, std::size_t i, std::size_t j) {
    double tail = acc[0];
    for (std::size_t p = k4; p < k; ++p) tail += static_cast<double>(a[i * k + p]) * static_cast<double>(b[j * k + p]);
    c[i * n + j] += static_cast<T>((tail + acc[1]) + (acc[2] + acc[3]));
  };
  std::size_t i0 = 0;
  for (; i0 + 2 <= m; i0 += 2) {
    std::size_t j0 = 0;
    for (; j0 + 4 <= n; j0 += 4) {
      Double4 acc[2][4] = {};
      for (std::size_t p = 0; p < k4; p += 4) {
        const Double4 x0 = load_double4(a + i0 * k + p), x1 = load_double4(a + (i0 + 1) * k + p);
        for (std::size_t j = 0; j < 4; ++j) {
          const Double4 y = load_double4(b + (j0 + j) * k + p);
          acc[0][j] += x0 * y;
          acc[1][j] += x1 * y;
        }
      }
      for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 4; ++j) finish(acc[i][j], i0 + i, j0 + j);
    }
    for (; j0 < n; ++j0)
      for (std::size_t i = i0; i < i0 + 2; ++i) {
        Double4 acc = {};
        for (std::size_t p = 0; p < k4; p += 4) acc += load_double4(a + i * k + p) * load_double4(b + j0 * k + p);
        finish(acc, i, j0);
      }
  }
  for (; i0 < m; ++i0)
    for (std::size_t j = 0; j < n; ++j) {
      Double4 acc = {};
      for (std::size_t p = 0; p < k4; p += 4) acc += load_double4(a + i0 * k + p) * load_double4(b + j * k + p);
      finish(acc, i0, j);
    }
}

/// Adjoint of im2col: scatters each row back onto its shifted plane.
template <class T>
void col2im_add(const T* col, std::size_t channels, std::size_t height, std::size_t width, std::size_t ksize, T* out) {
  const auto pad = static_cast<std::ptrdiff_t>(ksize / 2);
  const auto h = static_cast<std::ptrdiff_t>(height), w = static_cast<std::ptrdiff_t>(width);
  const std::size_t plane = height * width;
  for (std::size_t c = 0; c < channels; ++c)
    for (std::ptrdiff_t ky = 0; ky < static_cast<std::ptrdiff_t>(ksize); ++ky)
      for (std::ptrdiff_t kx = 0; kx < static_cast<std::ptrdiff_t>(ksize); ++kx) {
        const T* src = col + ((c * ksize + static_cast<std::size_t>(ky)) * ksize + static_cast<std::size_t>(kx)) * plane;
        T* dst = out + c * plane;
        const std::ptrdiff_t dy = ky - pad, dx = kx - pad;
        const std::ptrdiff_t y0 = std::max<std::ptrdiff_t>(0, -dy), y1 = std::min(h, h - dy);
        const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx), x1 = std::min(w, w - dx);
        for (std::ptrdiff_t y = y0; y < y1; ++y) {
          T* drow = dst + (y + dy) * w + dx;
          const T* srow = src + y * w;
          for (std::ptrdiff_t x = x0; x < x1; ++x) drow[x] += srow[x];
        }
      }
}

/// Σ a[i]·b[i] (or Σ a[i] when sum_only) in double with four fixed-order
/// partial sums, so the result is independent of vector width.
template <class T>
double dot(const T* a, const T* b, std::size_t n, bool sum_only) {
  double acc[4] = {0.0, 0.0, 0.0, 0.0};
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    for (std::size_t j = 0; j < 4; ++j)
      acc[j] += sum_only ? static_cast<double>(a[i + j]) : static_cast<double>(a[i + j]) * static_cast<double>(b[i + j]);
  for (; i < n; ++i) acc[0] += sum_only ? static_cast<double>(a[i]) : static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return (acc[0] + acc[1]) + (acc[2] + acc[3]);
}

}  // namespace detail

template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias) {
  if (input.rank() != 4 || kernel.rank() != 4 || bias.rank() != 1)
    throw ConfigError("conv2d expects NCHW input, OCkk kernel and O bias");
  const std::size_t n_batch = input.dim(0), in_ch = input.dim(1), height = input.dim(2),
                    width = input.dim(3);
  const std::size_t out_ch = kernel.dim(0), ksize = kernel.dim(2);
  if (kernel.dim(1) != in_ch)
    throw ConfigError("conv2d channel mismatch: input " + shape_str(input.shape()) + " kernel " +
                      shape_str(kernel.shape()));
  if (kernel.dim(3) != ksize || ksize % 2 == 0) throw ConfigError("conv2d kernel must be square and odd");
  if (bias.dim(0) != out_ch) throw ConfigError("conv2d bias size mismatch");

  Tensor<T> out({n_batch, out_ch, height, width});
  const std::size_t plane = height * width, rows = in_ch * ksize * ksize;
  std::vector<T> col(rows * plane);

  for (std::size_t n = 0; n < n_batch; ++n) {
    detail::im2col(input.data() + n * in_ch * plane, in_ch, height, width, ksize, col.data());
    detail::gemm_bias(kernel.data(), col.data(), bias.data(), out.data() + n * out_ch * plane, out_ch, rows, plane);
  }
  return out;
}

/// Backward pass of conv2d. Adds into grad_kernel / grad_bias; writes grad_input
/// when non-null.
template <class T>
void conv2d_backward(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& grad_out,
                     Tensor<T>* grad_input, Tensor<T>& grad_kernel, Tensor<T>& grad_bias) {
  const std::size_t n_batch = input.dim(0), in_ch = input.dim(1), height = input.dim(2),
                    width = input.dim(3);
  const std::size_t out_ch = kernel.dim(0), ksize = kernel.dim(2);
  const std::size_t plane = height * width, rows = in_ch * ksize * ksize;
  if (grad_input) *grad_input = Tensor<T>(input.shape());
  std::vector<T> col(rows * plane), dcol(grad_input ? rows * plane : 0);
  std::vector<T> kernel_t(grad_input ? rows * out_ch : 0), zeros(rows, T{});
  for (std::size_t o = 0; grad_input && o < out_ch; ++o)
    for (std::size_t r = 0; r < rows; ++r) kernel_t[r * out_ch + o] = kernel[o * rows + r];

  for (std::size_t n = 0; n < n_batch; ++n) {
    const T* g = grad_out.data() + n * out_ch * plane;
    detail::im2col(input.data() + n * in_ch * plane, in_ch, height, width, ksize, col.data());
    for (std::size_t o = 0; o < out_ch; ++o)
      grad_bias[o] += static_cast<T>(detail::dot(g + o * plane, g + o * plane, plane, true));
    detail::gemm_abt_add(g, col.data(), grad_kernel.data(), out_ch, rows, plane);
    if (grad_input) {
      detail::gemm_bias(kernel_t.data(), g, zeros.data(), dcol.data(), rows, out_ch, plane);
      detail::col2im_add(dcol.data(), in_ch, height, width, ksize, grad_input->data() + n * in_ch * plane);
    }
  }
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T{} ? x[i] : T{};
  return y;
}

/// dL/dx given the forward input and dL/dy. Subgradient at 0 is 0.
template <class T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& grad_y) {
  Tensor<T> g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = x[i] > T{} ? grad_y[i] : T{};
  return g;
}

template <class T>
struct LossAndGrad {
  double loss = 0.0;
  Tensor<T> grad;
  std::size_t valid_pixels = 0;
};

/// Mean over non-ignored pixels of -log softmax(logits)[label]. With no valid
/// pixel the loss and gradient are exactly zero.
template <class T>
LossAndGrad<T> masked_softmax_cross_entropy(const Tensor<T>& logits, const LabelTensor& labels,
                                            std::int32_t ignore_index) {
  if (logits.rank() != 4 || labels.rank() != 3 || labels.dim(0) != logits.dim(0) ||
      labels.dim(1) != logits.dim(2) || labels.dim(2) != logits.dim(3))
    throw ConfigError("cross entropy shape mismatch: logits " + shape_str(logits.shape()) +
                      " labels " + shape_str(labels.shape()));
  const std::size_t n_batch = logits.dim(0), classes = logits.dim(1);
  const std::size_t plane = logits.dim(2) * logits.dim(3);

  LossAndGrad<T> out{0.0, Tensor<T>(logits.shape()), 0};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto l = labels[i];
    if (l == ignore_index) continue;
    if (l < 0 || static_cast<std::size_t>(l) >= classes)
      throw DataError("label " + std::to_string(l) + " outside [0," + std::to_string(classes) + ")");
    ++out.valid_pixels;
  }
  if (out.valid_pixels == 0) return out;

  const double inv = 1.0 / static_cast<double>(out.valid_pixels);
  std::vector<double> p(classes);
  double total = 0.0;
  for (std::size_t n = 0; n < n_batch; ++n) {
    const T* lg = logits.data() + n * classes * plane;
    T* gr = out.grad.data() + n * classes * plane;
    for (std::size_t px = 0; px < plane; ++px) {
      const auto label = labels[n * plane + px];
      if (label == ignore_index) continue;
      double m = lg[px];
      for (std::size_t c = 1; c < classes; ++c) m = std::max(m, static_cast<double>(lg[c * plane + px]));
      double z = 0.0;
      for (std::size_t c = 0; c < classes; ++c) {
        p[c] = std::exp(static_cast<double>(lg[c * plane + px]) - m);
        z += p[c];
      }
      total += std::log(z) + m - static_cast<double>(lg[static_cast<std::size_t>(label) * plane + px]);
      for (std::size_t c = 0; c < classes; ++c) {
        const double g = p[c] / z - (static_cast<std::size_t>(label) == c ? 1.0 : 0.0);
        gr[c * plane + px] = static_cast<T>(g * inv);
      }
    }
  }
  out.loss = total * inv;
  return out;
}

/// θ ← θ − lr·g. Aborts on a non-finite gradient.
template <class T>
void sgd_step(ParamSet<T>& params, const ParamSet<T>& grads, double lr) {
  if (!params.same_structure(grads)) throw ConfigError("gradient set does not match parameters");
  for (std::size_t i = 0; i < grads.count(); ++i)
    if (!grads[i].all_finite()) throw NumericError("non-finite gradient in " + grads.name(i));
  const T step = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.count(); ++i) {
    auto& p = params[i];
    const auto& g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) p[j] -= step * g[j];
  }
}

/// Max over sampled coordinates of |analytic − central difference| /
/// max(1e-8, |analytic| + |numeric|). Samples every coordinate when the
/// parameter count is at most max_coords.
template <class T>
double finite_diff_check(const std::function<double(const ParamSet<T>&)>& loss_fn,
                         const ParamSet<T>& params, const ParamSet<T>& analytic, double eps,
                         std::size_t max_coords = 200, std::uint64_t seed = 7) {
  if (!params.same_structure(analytic)) throw ConfigError("analytic gradient does not match parameters");
  const std::size_t total = params.total_size();
  std::vector<std::size_t> coords(total);
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  if (total > max_coords) {
    Rng rng(seed);
    rng.shuffle(coords);
    coords.resize(max_coords);
  }
  ParamSet<T> probe = params;
  double worst = 0.0;
  for (std::size_t idx : coords) {
    const T orig = probe.flat(idx);
    probe.flat(idx) = orig + static_cast<T>(eps);
    const double up = loss_fn(probe);
    probe.flat(idx) = orig - static_cast<T>(eps);
    const double down = loss_fn(probe);
    probe.flat(idx) = orig;
    const double numeric = (up - down) / (2.0 * eps);
    const double a = static_cast<double>(analytic.flat(idx));
    const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace odics
