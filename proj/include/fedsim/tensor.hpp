#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "fedsim/errors.hpp"

namespace fedsim {

// Dense row-major float32 tensor. Values are expected to be finite; ops that
// produce tensors scan their output and raise a numeric error on NaN/Inf
// instead of letting it propagate into aggregation.
struct Tensor {
  std::vector<int> shape;
  std::vector<float> data;

  Tensor() = default;
  Tensor(std::vector<int> s, std::vector<float> d)
      : shape(std::move(s)), data(std::move(d)) {}

  static Tensor zeros(std::vector<int> shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return Tensor(std::move(shape), std::vector<float>(n, 0.0f));
  }

  std::size_t size() const { return data.size(); }

  std::size_t shape_product() const {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
  }

  bool shape_equals(const Tensor& other) const { return shape == other.shape; }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i)
      os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
  }
};

inline bool all_finite(const Tensor& t) {
  for (float v : t.data)
    if (!std::isfinite(v)) return false;
  return true;
}

inline void require_finite(const Tensor& t, const char* context) {
  if (!all_finite(t))
    throw numeric_error(std::string(context) + ": non-finite value in tensor");
}

inline void require_shape(const Tensor& t, const std::vector<int>& shape,
                          const char* context) {
  if (t.shape != shape) {
    Tensor want;
    want.shape = shape;
    throw domain_error(std::string(context) + ": expected shape " +
                       want.shape_str() + ", got " + t.shape_str());
  }
}

// Flattened L2 distance; shapes must match.
inline double l2_distance(const Tensor& a, const Tensor& b) {
  if (!a.shape_equals(b))
    throw domain_error("l2_distance: shape mismatch " + a.shape_str() + " vs " +
                       b.shape_str());
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - b.data[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

}  // namespace fedsim
