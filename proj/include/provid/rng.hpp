#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

#include "provid/tensor.hpp"

namespace provid {

namespace detail {

// SplitMix64 finalizer; full-period bijection on 64-bit state.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// FNV-1a over the purpose tag so adding streams never perturbs existing ones.
inline std::uint64_t tag_hash(std::string_view tag) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : tag) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

/// Counter-based random stream: every draw is a pure function of
/// (seed, purpose tag, index). Streams for distinct purposes are independent,
/// so adding a consumer does not shift any other stream.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::string_view purpose, std::uint64_t start_index = 0)
      : base_(detail::mix64(seed ^ detail::tag_hash(purpose))), index_(start_index) {}

  std::uint64_t next_u64() { return detail::mix64(base_ + 0x9e3779b97f4a7c15ULL * ++index_); }

  /// Uniform in [0, 1); 53-bit resolution.
  double next_uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller; consumes two uniforms per pair.
  double next_gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = next_uniform();
    double u2 = next_uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  /// Uniform integer in [0, n).
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

  std::uint64_t index() const { return index_; }

 private:
  std::uint64_t base_;
  std::uint64_t index_;
  bool have_spare_{false};
  double spare_{0.0};
};

template <class T>
Tensor<T> gaussian_tensor(std::vector<std::size_t> dims, CounterRng& rng, T stddev = T(1)) {
  Tensor<T> out(std::move(dims));
  for (std::size_t i = 0; i < out.numel(); ++i) {
    out[i] = static_cast<T>(rng.next_gaussian()) * stddev;
  }
  return out;
}

/// Random K x K orthogonal matrix: modified Gram-Schmidt applied to a square
/// standard-Gaussian matrix. Columns are the projection directions.
template <class T>
Tensor<T> random_orthogonal(std::size_t k, CounterRng& rng) {
  Tensor<T> m = gaussian_tensor<T>({k, k}, rng);
  // orthonormalize columns in place
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t p = 0; p < j; ++p) {
      T dot = 0;
      for (std::size_t i = 0; i < k; ++i) dot += m[i * k + j] * m[i * k + p];
      for (std::size_t i = 0; i < k; ++i) m[i * k + j] -= dot * m[i * k + p];
    }
    T norm = 0;
    for (std::size_t i = 0; i < k; ++i) norm += m[i * k + j] * m[i * k + j];
    norm = std::sqrt(norm);
    if (norm < T(1e-12)) {
      // degenerate draw; replace the column with a basis vector and redo
      for (std::size_t i = 0; i < k; ++i) m[i * k + j] = (i == j % k) ? T(1) : T(0);
      j -= 1;
      continue;
    }
    for (std::size_t i = 0; i < k; ++i) m[i * k + j] /= norm;
  }
  return m;
}

/// Re-orthonormalizes the columns of a square matrix in place (modified
/// Gram-Schmidt). Used after optimizer steps on trainable projection frames.
template <class T>
void reorthonormalize_columns(Tensor<T>& m) {
  if (m.rank() != 2 || m.dim(0) != m.dim(1)) {
    throw ShapeError("reorthonormalize_columns: expected square matrix");
  }
  const std::size_t k = m.dim(0);
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t p = 0; p < j; ++p) {
      T dot = 0;
      for (std::size_t i = 0; i < k; ++i) dot += m[i * k + j] * m[i * k + p];
      for (std::size_t i = 0; i < k; ++i) m[i * k + j] -= dot * m[i * k + p];
    }
    T norm = 0;
    for (std::size_t i = 0; i < k; ++i) norm += m[i * k + j] * m[i * k + j];
    norm = std::sqrt(norm);
    if (norm < T(1e-12)) {
      throw ValueError("reorthonormalize_columns: rank-deficient matrix");
    }
    for (std::size_t i = 0; i < k; ++i) m[i * k + j] /= norm;
  }
}

}  // namespace provid
