#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace provid {

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ValueError : std::runtime_error {
  explicit ValueError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

/// A (frames, height, width) extent triple. Used both for video extents and
/// for per-axis pooling/upsampling factors.
struct Shape3d {
  std::size_t t{1};
  std::size_t h{1};
  std::size_t w{1};

  friend bool operator==(const Shape3d&, const Shape3d&) = default;

  std::size_t volume() const { return t * h * w; }

  std::string str() const {
    return std::to_string(t) + "x" + std::to_string(h) + "x" + std::to_string(w);
  }
};

/// Dense n-dimensional array, row-major, value semantics.
///
/// Video tensors are laid out B x C x T x H x W. The element count always
/// equals the product of the extents; reshaping produces a new value with the
/// same element count.
template <class T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> dims)
      : dims_(std::move(dims)), data_(checked_numel(dims_), T(0)) {}

  Tensor(std::vector<std::size_t> dims, T fill)
      : dims_(std::move(dims)), data_(checked_numel(dims_), fill) {}

  /// Builds a tensor from explicit values; rejects non-finite entries.
  static Tensor from_values(std::vector<std::size_t> dims, std::vector<T> values) {
    Tensor out;
    out.dims_ = std::move(dims);
    if (values.size() != checked_numel(out.dims_)) {
      throw ShapeError("from_values: got " + std::to_string(values.size()) +
                       " values for shape of " + std::to_string(checked_numel(out.dims_)) +
                       " elements");
    }
    out.data_ = std::move(values);
    out.check_finite("from_values");
    return out;
  }

  static Tensor scalar(T v) { return from_values({1}, {v}); }

  const std::vector<std::size_t>& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return dims_.at(i); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  template <class... Ix>
  T& at(Ix... ix) {
    return data_[flat_index(ix...)];
  }
  template <class... Ix>
  const T& at(Ix... ix) const {
    return data_[flat_index(ix...)];
  }

  /// Single element of a one-element tensor.
  T item() const {
    if (numel() != 1) {
      throw ShapeError("item: tensor has " + std::to_string(numel()) + " elements");
    }
    return data_[0];
  }

  bool same_shape(const Tensor& o) const { return dims_ == o.dims_; }

  Tensor reshaped(std::vector<std::size_t> new_dims) const {
    if (checked_numel(new_dims) != numel()) {
      throw ShapeError("reshape: element count mismatch (" + std::to_string(numel()) +
                       " vs " + std::to_string(checked_numel(new_dims)) + ")");
    }
    Tensor out;
    out.dims_ = std::move(new_dims);
    out.data_ = data_;
    return out;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  void check_finite(const char* what) const {
    for (std::size_t i = 0; i < data_.size(); ++i) {
      if (!std::isfinite(static_cast<double>(data_[i]))) {
        throw ValueError(std::string(what) + ": non-finite value at flat index " +
                         std::to_string(i));
      }
    }
  }

  bool all_finite() const {
    for (const T& v : data_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  static std::string shape_str(const std::vector<std::size_t>& dims) {
    std::string s = "[";
    for (std::size_t i = 0; i < dims.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(dims[i]);
    }
    return s + "]";
  }

 private:
  static std::size_t checked_numel(const std::vector<std::size_t>& dims) {
    std::size_t n = 1;
    for (std::size_t d : dims) {
      if (d == 0) throw ShapeError("zero extent in shape " + shape_str(dims));
      n *= d;
    }
    return n;
  }

  template <class... Ix>
  std::size_t flat_index(Ix... ix) const {
    const std::size_t idx[] = {static_cast<std::size_t>(ix)...};
    constexpr std::size_t r = sizeof...(Ix);
    if (r != dims_.size()) {
      throw ShapeError("index rank " + std::to_string(r) + " vs tensor rank " +
                       std::to_string(dims_.size()));
    }
    std::size_t flat = 0;
    for (std::size_t a = 0; a < r; ++a) {
      flat = flat * dims_[a] + idx[a];
    }
    return flat;
  }

  std::vector<std::size_t> dims_;
  std::vector<T> data_;
};

namespace detail {

inline void require_factor(std::size_t f, const char* axis) {
  if (f != 1 && f != 2) {
    throw ShapeError(std::string("pooling factor on axis ") + axis +
                     " must be 1 or 2, got " + std::to_string(f));
  }
}

template <class T>
void require_rank5(const Tensor<T>& x, const char* op) {
  if (x.rank() != 5) {
    throw ShapeError(std::string(op) + ": expected rank-5 B x C x T x H x W tensor, got rank " +
                     std::to_string(x.rank()));
  }
}

}  // namespace detail

/// 3-D average pooling over the T/H/W axes of a B x C x T x H x W tensor.
/// Each output cell is the arithmetic mean of its factor block.
template <class T>
Tensor<T> avg_pool3d(const Tensor<T>& x, Shape3d factor) {
  detail::require_rank5(x, "avg_pool3d");
  detail::require_factor(factor.t, "T");
  detail::require_factor(factor.h, "H");
  detail::require_factor(factor.w, "W");
  const std::size_t B = x.dim(0), C = x.dim(1), Ti = x.dim(2), H = x.dim(3), W = x.dim(4);
  if (Ti % factor.t) throw ShapeError("avg_pool3d: axis T extent " + std::to_string(Ti) + " not divisible by " + std::to_string(factor.t));
  if (H % factor.h) throw ShapeError("avg_pool3d: axis H extent " + std::to_string(H) + " not divisible by " + std::to_string(factor.h));
  if (W % factor.w) throw ShapeError("avg_pool3d: axis W extent " + std::to_string(W) + " not divisible by " + std::to_string(factor.w));

  const std::size_t To = Ti / factor.t, Ho = H / factor.h, Wo = W / factor.w;
  Tensor<T> out({B, C, To, Ho, Wo});
  const T inv = T(1) / static_cast<T>(factor.volume());
  const T* src = x.data();
  T* dst = out.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t to = 0; to < To; ++to)
        for (std::size_t ho = 0; ho < Ho; ++ho)
          for (std::size_t wo = 0; wo < Wo; ++wo) {
            T acc = 0;
            for (std::size_t dt = 0; dt < factor.t; ++dt)
              for (std::size_t dh = 0; dh < factor.h; ++dh)
                for (std::size_t dw = 0; dw < factor.w; ++dw) {
                  const std::size_t ti = to * factor.t + dt;
                  const std::size_t hi = ho * factor.h + dh;
                  const std::size_t wi = wo * factor.w + dw;
                  acc += src[(((b * C + c) * Ti + ti) * H + hi) * W + wi];
                }
            dst[(((b * C + c) * To + to) * Ho + ho) * Wo + wo] = acc * inv;
          }
  return out;
}

/// Nearest-neighbor upsampling: each input cell is replicated over its factor
/// block, so avg_pool3d(upsample_nearest3d(x, f), f) == x exactly.
template <class T>
Tensor<T> upsample_nearest3d(const Tensor<T>& x, Shape3d factor) {
  detail::require_rank5(x, "upsample_nearest3d");
  detail::require_factor(factor.t, "T");
  detail::require_factor(factor.h, "H");
  detail::require_factor(factor.w, "W");
  const std::size_t B = x.dim(0), C = x.dim(1), Ti = x.dim(2), H = x.dim(3), W = x.dim(4);
  const std::size_t To = Ti * factor.t, Ho = H * factor.h, Wo = W * factor.w;
  Tensor<T> out({B, C, To, Ho, Wo});
  const T* src = x.data();
  T* dst = out.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t to = 0; to < To; ++to)
        for (std::size_t ho = 0; ho < Ho; ++ho)
          for (std::size_t wo = 0; wo < Wo; ++wo) {
            const std::size_t ti = to / factor.t, hi = ho / factor.h, wi = wo / factor.w;
            dst[(((b * C + c) * To + to) * Ho + ho) * Wo + wo] =
                src[(((b * C + c) * Ti + ti) * H + hi) * W + wi];
          }
  return out;
}

/// 3-D cross-correlation with zero "same" padding; odd kernel extents only.
/// x: B x Cin x T x H x W, kernel: Cout x Cin x kt x kh x kw.
template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& kernel) {
  detail::require_rank5(x, "conv3d input");
  detail::require_rank5(kernel, "conv3d kernel");
  const std::size_t B = x.dim(0), Ci = x.dim(1), Ti = x.dim(2), H = x.dim(3), W = x.dim(4);
  const std::size_t Co = kernel.dim(0);
  if (kernel.dim(1) != Ci) {
    throw ShapeError("conv3d: kernel expects " + std::to_string(kernel.dim(1)) +
                     " input channels, tensor has " + std::to_string(Ci));
  }
  const std::size_t kt = kernel.dim(2), kh = kernel.dim(3), kw = kernel.dim(4);
  if (kt % 2 == 0 || kh % 2 == 0 || kw % 2 == 0) {
    throw ShapeError("conv3d: kernel extents must be odd, got " + std::to_string(kt) + "x" +
                     std::to_string(kh) + "x" + std::to_string(kw));
  }
  const std::size_t ct = kt / 2, ch = kh / 2, cw = kw / 2;

  Tensor<T> out({B, Co, Ti, H, W});
  const T* X = x.data();
  const T* K = kernel.data();
  T* Y = out.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < Co; ++o)
      for (std::size_t t = 0; t < Ti; ++t)
        for (std::size_t hh = 0; hh < H; ++hh)
          for (std::size_t ww = 0; ww < W; ++ww) {
            T acc = 0;
            for (std::size_t i = 0; i < Ci; ++i)
              for (std::size_t dt = 0; dt < kt; ++dt) {
                const std::ptrdiff_t ti = static_cast<std::ptrdiff_t>(t + dt) - static_cast<std::ptrdiff_t>(ct);
                if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(Ti)) continue;
                for (std::size_t dh = 0; dh < kh; ++dh) {
                  const std::ptrdiff_t hi = static_cast<std::ptrdiff_t>(hh + dh) - static_cast<std::ptrdiff_t>(ch);
                  if (hi < 0 || hi >= static_cast<std::ptrdiff_t>(H)) continue;
                  for (std::size_t dw = 0; dw < kw; ++dw) {
                    const std::ptrdiff_t wi = static_cast<std::ptrdiff_t>(ww + dw) - static_cast<std::ptrdiff_t>(cw);
                    if (wi < 0 || wi >= static_cast<std::ptrdiff_t>(W)) continue;
                    acc += X[(((b * Ci + i) * Ti + ti) * H + hi) * W + wi] *
                           K[(((o * Ci + i) * kt + dt) * kh + dh) * kw + dw];
                  }
                }
              }
            Y[(((b * Co + o) * Ti + t) * H + hh) * W + ww] = acc;
          }
  return out;
}

template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias) {
  const std::size_t Co = kernel.dim(0);
  if (bias.rank() != 1 || bias.dim(0) != Co) {
    throw ShapeError("conv3d: bias must have shape [" + std::to_string(Co) + "]");
  }
  Tensor<T> out = conv3d(x, kernel);
  const std::size_t B = out.dim(0), inner = out.dim(2) * out.dim(3) * out.dim(4);
  T* Y = out.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < Co; ++o) {
      const T bv = bias[o];
      T* row = Y + (b * Co + o) * inner;
      for (std::size_t i = 0; i < inner; ++i) row[i] += bv;
    }
  return out;
}

/// Affine map per row: x[B,N] * w[M,N]^T + b[M].
template <class T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 2 || w.rank() != 2) {
    throw ShapeError("dense: expected rank-2 input and weight");
  }
  const std::size_t B = x.dim(0), N = x.dim(1), M = w.dim(0);
  if (w.dim(1) != N) {
    throw ShapeError("dense: weight expects " + std::to_string(w.dim(1)) +
                     " inputs, tensor rows have " + std::to_string(N));
  }
  if (b.rank() != 1 || b.dim(0) != M) {
    throw ShapeError("dense: bias must have shape [" + std::to_string(M) + "]");
  }
  Tensor<T> out({B, M});
  for (std::size_t r = 0; r < B; ++r)
    for (std::size_t m = 0; m < M; ++m) {
      T acc = b[m];
      for (std::size_t n = 0; n < N; ++n) acc += x[r * N + n] * w[m * N + n];
      out[r * M + m] = acc;
    }
  return out;
}

/// Elementwise max(x, slope * x), slope in [0, 1).
template <class T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
  if (!(slope >= T(0) && slope < T(1))) {
    throw ValueError("leaky_relu: slope must be in [0,1)");
  }
  Tensor<T> out = x;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    if (out[i] < T(0)) out[i] *= slope;
  }
  return out;
}

/// Stable ascending argsort of a 1-D tensor: equal values keep their original
/// relative order, which makes 1-D transport plans deterministic.
template <class T>
std::vector<std::size_t> argsort_stable(const Tensor<T>& x) {
  if (x.rank() != 1) throw ShapeError("argsort_stable: expected 1-D tensor");
  std::vector<std::size_t> idx(x.numel());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&x](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  return idx;
}

/// Ascending sort of a 1-D tensor.
template <class T>
Tensor<T> sort_values(const Tensor<T>& x) {
  const std::vector<std::size_t> idx = argsort_stable(x);
  Tensor<T> out({x.numel()});
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = x[idx[i]];
  return out;
}

}  // namespace provid
