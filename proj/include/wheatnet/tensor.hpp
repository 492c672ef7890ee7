#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "wheatnet/errors.hpp"

namespace wheatnet {

/// NCHW extent of a tensor. W is the fastest-varying index.
struct Shape {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  constexpr std::size_t numel() const { return n * c * h * w; }
  constexpr std::size_t plane() const { return h * w; }
  constexpr bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << '(' << n << ',' << c << ',' << h << ',' << w << ')';
    return os.str();
  }
};

namespace detail {

struct TensorStorage {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until the first gradient lands
  bool requires_grad = false;
};

}  // namespace detail

/// Dense f64 tensor with shared storage. Copies are cheap handles onto the
/// same buffer; use clone() for a deep copy. Constness is that of the handle,
/// as with shared_ptr.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.impl_ = std::make_shared<detail::TensorStorage>();
    t.impl_->shape = shape;
    t.impl_->data.assign(shape.numel(), 0.0);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor filled(Shape shape, double value, bool requires_grad = false) {
    Tensor t = zeros(shape, requires_grad);
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
  }

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (values.size() != shape.numel()) {
      throw ShapeError("tensor: " + std::to_string(values.size()) + " values do not fill shape " +
                       shape.str());
    }
    Tensor t;
    t.impl_ = std::make_shared<detail::TensorStorage>();
    t.impl_->shape = shape;
    t.impl_->data = std::move(values);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({1, 1, 1, 1}, {v}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t numel() const { return impl_->shape.numel(); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() const { return impl_->data; }
  const double* ptr() const { return impl_->data.data(); }
  double* mutable_ptr() const { return impl_->data.data(); }

  double item() const {
    if (numel() != 1) throw ShapeError("item: tensor of shape " + shape().str() + " is not a scalar");
    return impl_->data[0];
  }

  double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    const Shape& s = impl_->shape;
    return impl_->data[((n * s.c + c) * s.h + h) * s.w + w];
  }
  double& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    const Shape& s = impl_->shape;
    return impl_->data[((n * s.c + c) * s.h + h) * s.w + w];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) const { impl_->requires_grad = v; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }

  /// Gradient buffer, allocated as zeros on first access.
  std::span<double> grad_buffer() const {
    if (impl_->grad.empty()) impl_->grad.assign(numel(), 0.0);
    return impl_->grad;
  }
  void zero_grad() const { impl_->grad.clear(); }

  Tensor clone() const {
    Tensor t = from(shape(), impl_->data, impl_->requires_grad);
    return t;
  }

  bool all_finite() const {
    for (double v : impl_->data) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  double sum() const {
    double s = 0.0;
    for (double v : impl_->data) s += v;
    return s;
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<detail::TensorStorage> impl_;
};

}  // namespace wheatnet
