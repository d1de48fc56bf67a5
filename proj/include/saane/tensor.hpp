#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace saane {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Inconsistent tensor shapes or extents.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Malformed or truncated files, bad configs, digest mismatches.
class DataError : public Error {
 public:
  using Error::Error;
};

// A verification step failed (gradient check, determinism probe).
class CheckError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<int>;
using Rng = std::mt19937_64;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int extent : shape) n *= static_cast<std::size_t>(extent);
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

// Dense row-major tensor (rank-3 maps are channel, row, column).
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;

  explicit Tensor(Shape s) : shape(std::move(s)) {
    validate_extents();
    data.assign(shape_numel(shape), T(0));
  }

  Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    validate_extents();
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
  }

  static Tensor full(Shape s, T value) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), value);
    return t;
  }

  static Tensor ones(Shape s) { return full(std::move(s), T(1)); }

  int rank() const { return static_cast<int>(shape.size()); }
  int extent(int axis) const { return shape[static_cast<std::size_t>(axis)]; }
  std::size_t size() const { return data.size(); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  // rank-3 access: (channel, row, column)
  T& at(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
  }
  const T& at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
  }

  // rank-2 access: (row, column)
  T& at(int r, int c) { return data[static_cast<std::size_t>(r) * shape[1] + c]; }
  const T& at(int r, int c) const { return data[static_cast<std::size_t>(r) * shape[1] + c]; }

  // rank-4 access: (out channel, in channel, kernel row, kernel column)
  T& at(int o, int i, int ky, int kx) {
    return data[((static_cast<std::size_t>(o) * shape[1] + i) * shape[2] + ky) * shape[3] + kx];
  }
  const T& at(int o, int i, int ky, int kx) const {
    return data[((static_cast<std::size_t>(o) * shape[1] + i) * shape[2] + ky) * shape[3] + kx];
  }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  bool all_finite() const {
    for (const T& v : data) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

 private:
  void validate_extents() const {
    for (int extent : shape) {
      if (extent <= 0) throw ShapeError("non-positive extent in shape " + shape_str(shape));
    }
  }
};

template <typename T>
bool operator==(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape == b.shape && a.data == b.data;
}

// Named trainable tensor with a gradient buffer of identical shape.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(Tensor<T>(value.shape)) {}

  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), T(0)); }
};

template <typename T>
void fill_gaussian(Tensor<T>& t, Rng& rng, double stddev, double mean = 0.0) {
  std::normal_distribution<double> dist(mean, stddev);
  for (T& v : t.data) v = static_cast<T>(dist(rng));
}

template <typename T>
void fill_uniform(Tensor<T>& t, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  for (T& v : t.data) v = static_cast<T>(dist(rng));
}

}  // namespace saane
