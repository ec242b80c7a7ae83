#pragma once

#include <Eigen/Core>

#include <cassert>
#include <cstddef>
#include <functional>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace btr {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapRM = Eigen::Map<const MatRM<T>>;
template <typename T>
using VecMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <typename T>
using CVecMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

using Rng = std::mt19937_64;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major array with a runtime shape.
template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, T fill = T{}) : shape(std::move(s)), data(count(shape), fill) {}

  static std::size_t count(const std::vector<int>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1},
                           [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
  }

  std::size_t size() const noexcept { return data.size(); }
  int dim(std::size_t i) const { return shape.at(i); }
  T* ptr() noexcept { return data.data(); }
  const T* ptr() const noexcept { return data.data(); }
  T& operator[](std::size_t i) noexcept { return data[i]; }
  const T& operator[](std::size_t i) const noexcept { return data[i]; }

  void reshape(std::vector<int> s) {
    if (count(s) != data.size()) throw ShapeError("reshape changes element count");
    shape = std::move(s);
  }

  /// View as a row-major matrix; the tensor must hold rows*cols elements.
  MapRM<T> mat(Eigen::Index rows, Eigen::Index cols) {
    assert(static_cast<std::size_t>(rows * cols) == data.size());
    return MapRM<T>(data.data(), rows, cols);
  }
  CMapRM<T> mat(Eigen::Index rows, Eigen::Index cols) const {
    assert(static_cast<std::size_t>(rows * cols) == data.size());
    return CMapRM<T>(data.data(), rows, cols);
  }
  VecMap<T> vec() { return VecMap<T>(data.data(), static_cast<Eigen::Index>(data.size())); }
  CVecMap<T> vec() const { return CVecMap<T>(data.data(), static_cast<Eigen::Index>(data.size())); }

  void zero() { std::fill(data.begin(), data.end(), T{}); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }
};

/// A trainable array and its gradient accumulator.
template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Param() = default;
  Param(std::string n, std::vector<int> shape) : name(std::move(n)), value(shape), grad(shape) {}
};

template <typename T>
void uniform_fill(Tensor<T>& t, T bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-static_cast<double>(bound), static_cast<double>(bound));
  for (auto& v : t.data) v = static_cast<T>(dist(rng));
}

/// Splits a master seed into an independent stream seed.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  std::uint64_t z = master + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// Keeps large activation buffers on the heap instead of fresh mmaps, which
/// otherwise page-fault on every forward pass. No-op outside glibc.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

}  // namespace btr
