#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <numeric>
#include <vector>

#include "sgg/common.hpp"

namespace sgg {

// Dense row-major n-d array. Storage is shared on copy (tape nodes and
// parameter leaves alias the same buffer); use clone() for a deep copy.
// Tape discipline: a node's value is written once and read-only afterwards.
template <class T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<size_t> shape)
      : shape_(std::move(shape)),
        store_(std::make_shared<std::vector<T>>(numel(shape_), T(0))) {}

  Tensor(std::vector<size_t> shape, std::vector<T> data)
      : shape_(std::move(shape)),
        store_(std::make_shared<std::vector<T>>(std::move(data))) {
    require(store_->size() == numel(shape_), "tensor data length ",
            store_->size(), " does not match shape product ", numel(shape_));
  }

  static Tensor zeros(std::vector<size_t> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<size_t> shape, T v) {
    Tensor t(std::move(shape));
    std::fill(t.data(), t.data() + t.size(), v);
    return t;
  }

  static Tensor scalar(T v) { return full({1}, v); }

  bool defined() const { return static_cast<bool>(store_); }
  size_t size() const { return store_ ? store_->size() : 0; }
  const std::vector<size_t>& shape() const { return shape_; }
  size_t ndim() const { return shape_.size(); }
  size_t dim(size_t i) const { return shape_.at(i); }

  // 2-d conveniences; 1-d tensors count as a single row.
  size_t rows() const { return ndim() >= 2 ? shape_[0] : 1; }
  size_t cols() const { return ndim() >= 2 ? size() / shape_[0] : size(); }

  T* data() { return store_->data(); }
  const T* data() const { return store_->data(); }
  T& operator[](size_t i) { return (*store_)[i]; }
  const T& operator[](size_t i) const { return (*store_)[i]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Tensor clone() const {
    if (!defined()) return Tensor();
    return Tensor(shape_, *store_);
  }

  Tensor reshaped(std::vector<size_t> shape) const {
    require(numel(shape) == size(), "reshape from ", size(), " elements to ",
            numel(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.store_ = store_;
    return t;
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(size());
    for (size_t i = 0; i < size(); ++i) out[i] = static_cast<U>((*store_)[i]);
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    for (size_t i = 0; i < size(); ++i)
      if (!std::isfinite(double((*store_)[i]))) return false;
    return true;
  }

  static size_t numel(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t d : shape) {
      require(d > 0, "tensor shape has a zero dimension");
      n *= d;
    }
    return n;
  }

 private:
  std::vector<size_t> shape_;
  std::shared_ptr<std::vector<T>> store_;
};

}  // namespace sgg
