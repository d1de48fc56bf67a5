#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

#include "saane/tensor.hpp"

namespace testutil {

template <typename T>
saane::Tensor<T> random_tensor(saane::Shape shape, saane::Rng& rng, double lo = -1.0,
                               double hi = 1.0) {
  saane::Tensor<T> t(std::move(shape));
  saane::fill_uniform(t, rng, lo, hi);
  return t;
}

// |a - b| <= tol * max(1, |b|), elementwise.
template <typename A, typename B>
bool close_rel(const std::vector<A>& a, const std::vector<B>& b, double tol) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double av = static_cast<double>(a[i]);
    const double bv = static_cast<double>(b[i]);
    if (std::abs(av - bv) > tol * std::max(1.0, std::abs(bv))) return false;
  }
  return true;
}

inline bool close_rel(double a, double b, double tol) {
  return std::abs(a - b) <= tol * std::max(1.0, std::abs(b));
}

}  // namespace testutil
