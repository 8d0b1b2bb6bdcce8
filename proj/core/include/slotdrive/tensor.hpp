#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "slotdrive/common.hpp"

namespace slotdrive::nn {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    out += std::to_string(s[i]);
    if (i + 1 < s.size()) out += ",";
  }
  return out + ")";
}

// Dense row-major tensor. Rank is dynamic but stays small (<= 5) in practice.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(shape_numel(shape), T(0)) {}
  Tensor(Shape s, T fill) : shape(std::move(s)), data(shape_numel(shape), fill) {}
  Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    SD_SHAPE(static_cast<int64_t>(data.size()) == shape_numel(shape),
             "data size " << data.size() << " vs shape " << shape_str(shape));
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  // Row-major strides.
  Shape strides() const {
    Shape st(shape.size());
    int64_t acc = 1;
    for (int i = rank() - 1; i >= 0; --i) {
      st[static_cast<size_t>(i)] = acc;
      acc *= shape[static_cast<size_t>(i)];
    }
    return st;
  }

  T& at(std::initializer_list<int64_t> idx) {
    return data[static_cast<size_t>(flat(idx))];
  }
  const T& at(std::initializer_list<int64_t> idx) const {
    return data[static_cast<size_t>(flat(idx))];
  }

  int64_t flat(std::initializer_list<int64_t> idx) const {
    SD_SHAPE(static_cast<int>(idx.size()) == rank(), "index rank");
    int64_t off = 0, acc = 1;
    auto it = idx.end();
    for (int i = rank() - 1; i >= 0; --i) {
      --it;
      off += *it * acc;
      acc *= shape[static_cast<size_t>(i)];
    }
    return off;
  }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }
  void zero() { fill(T(0)); }

  Tensor reshaped(Shape s) const {
    SD_SHAPE(shape_numel(s) == numel(),
             "reshape " << shape_str(shape) << " -> " << shape_str(s));
    Tensor out;
    out.shape = std::move(s);
    out.data = data;
    return out;
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, T v) { return Tensor(std::move(s), v); }
};

template <typename T>
using EigenMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<EigenMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const EigenMat<T>>;

// View the trailing data of a tensor as a (rows, cols) row-major matrix.
template <typename T>
MatMap<T> as_matrix(Tensor<T>& t, int64_t rows, int64_t cols, int64_t offset = 0) {
  return MatMap<T>(t.ptr() + offset, rows, cols);
}
template <typename T>
ConstMatMap<T> as_matrix(const Tensor<T>& t, int64_t rows, int64_t cols,
                         int64_t offset = 0) {
  return ConstMatMap<T>(t.ptr() + offset, rows, cols);
}

}  // namespace slotdrive::nn
