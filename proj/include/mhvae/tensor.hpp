#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "mhvae/common.hpp"

namespace mhvae {

// Dense row-major tensor. The buffer is shared copy-on-write so that passing
// tensors through graph nodes and parameter bindings never copies; a tensor
// behaves as an immutable value once built unless you ask for mutable_data().
template <class T>
class Tensor {
 public:
  Tensor() : shape_{0}, buf_(std::make_shared<std::vector<T>>()) {}

  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)),
        buf_(std::make_shared<std::vector<T>>(static_cast<size_t>(numel(shape_)), fill)) {
    for (int d : shape_)
      require_shape(d > 0, "tensor dimensions must be positive, got " + shape_str(shape_));
  }

  static Tensor from_data(Shape shape, std::vector<T> data) {
    Tensor t;
    require_shape(static_cast<std::int64_t>(data.size()) == numel(shape),
                  "data length " + std::to_string(data.size()) + " does not match shape " +
                      shape_str(shape));
    t.shape_ = std::move(shape);
    t.buf_ = std::make_shared<std::vector<T>>(std::move(data));
    return t;
  }

  static Tensor scalar(T v) { return from_data({1}, {v}); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(buf_->size()); }
  bool empty() const { return buf_->empty(); }

  const T* data() const { return buf_->data(); }
  const T& operator[](std::int64_t i) const { return (*buf_)[static_cast<size_t>(i)]; }

  // Clones the buffer if it is shared with another tensor.
  T* mutable_data() {
    if (buf_.use_count() > 1) buf_ = std::make_shared<std::vector<T>>(*buf_);
    return buf_->data();
  }

  // Same buffer, different shape.
  Tensor reshaped(Shape s) const {
    require_shape(numel(s) == size(),
                  "reshape " + shape_str(shape_) + " -> " + shape_str(s) + " changes element count");
    Tensor t(*this);
    t.shape_ = std::move(s);
    return t;
  }

  bool all_finite() const {
    for (const T& v : *buf_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(buf_->size());
    for (size_t i = 0; i < buf_->size(); ++i) out[i] = static_cast<U>((*buf_)[i]);
    return Tensor<U>::from_data(shape_, std::move(out));
  }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<T>> buf_;
};

template <class T>
bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape();
}

template <class T>
Tensor<T> zeros_like(const Tensor<T>& t) {
  return Tensor<T>(t.shape());
}

}  // namespace mhvae
