#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dcp/errors.hpp"
#include "dcp/rng.hpp"

namespace dcp {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t extent : shape) n *= extent;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

/// Immutable dense f64 array in row-major order. A tensor may additionally
/// carry a node id linking it into the Tape that produced it (node < 0 means
/// detached: a plain value that any tape will treat as a constant).
struct Tensor {
  Shape shape;
  std::shared_ptr<const std::vector<double>> data;
  long node = -1;
  std::uint64_t tape_id = 0;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> values)
      : shape(std::move(s)), data(std::make_shared<const std::vector<double>>(std::move(values))) {
    if (numel(shape) != data->size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                       std::to_string(data->size()) + " values");
    }
  }

  bool defined() const { return data != nullptr; }
  std::size_t size() const { return data ? data->size() : 0; }
  std::size_t rank() const { return shape.size(); }
  const std::vector<double>& values() const { return *data; }

  double at(std::size_t i) const { return (*data)[i]; }
  double at(std::size_t i, std::size_t j) const { return (*data)[i * shape[1] + j]; }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return (*data)[(i * shape[1] + j) * shape[2] + k];
  }

  /// Same values, no tape affiliation.
  Tensor detached() const {
    Tensor t;
    t.shape = shape;
    t.data = data;
    return t;
  }

  /// New tensor with the same shape and fresh values (used by the optimizer;
  /// recorded tapes keep the old buffer alive, so this never mutates history).
  Tensor with_values(std::vector<double> values) const { return Tensor(shape, std::move(values)); }
};

inline Tensor zeros(Shape shape) {
  std::vector<double> v(numel(shape), 0.0);
  return Tensor(std::move(shape), std::move(v));
}

inline Tensor full(Shape shape, double value) {
  std::vector<double> v(numel(shape), value);
  return Tensor(std::move(shape), std::move(v));
}

inline Tensor scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

inline Tensor random_normal(Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.normal(0.0, stddev);
  return Tensor(std::move(shape), std::move(v));
}

namespace detail {

// C += A * B with A: m x k, B: k x n, all row-major. ikj order keeps the
// inner loop contiguous in both B and C.
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = arow[kk];
      const double* brow = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
}

// C += A * B^T with A: m x k, B: n x k.
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      crow[j] += acc;
    }
  }
}

// C += A^T * B with A: m x k, B: m x n, C: k x n.
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = arow[kk];
      double* crow = c + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
}

}  // namespace detail

}  // namespace dcp
