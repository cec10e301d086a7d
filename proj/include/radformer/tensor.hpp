#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace radformer {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

// Dense row-major tensor. A Tensor is a cheap handle onto shared storage;
// values are written once by the producing op and treated as immutable
// afterwards (parameters are the exception: the optimizer updates them
// between steps). The grad buffer is allocated lazily during backward.
template <typename T>
class Tensor {
 public:
  struct Impl {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;
    bool requires_grad = false;
  };

  Tensor() = default;

  static Tensor zeros(const Shape& shape) {
    return from_values(shape, std::vector<T>(numel(shape), T(0)));
  }

  static Tensor full(const Shape& shape, T v) {
    return from_values(shape, std::vector<T>(numel(shape), v));
  }

  static Tensor scalar(T v) { return from_values({1}, {v}); }

  static Tensor from_values(const Shape& shape, std::vector<T> values) {
    if (values.size() != numel(shape)) {
      throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                  " values do not fill shape " + shape_str(shape));
    }
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = shape;
    t.impl_->values = std::move(values);
    return t;
  }

  static Tensor leaf(const Shape& shape, std::vector<T> values, bool requires_grad) {
    Tensor t = from_values(shape, std::move(values));
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t size() const { return impl_->values.size(); }
  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

  std::vector<T>& values() { return impl_->values; }
  const std::vector<T>& values() const { return impl_->values; }
  T& operator[](std::size_t i) { return impl_->values[i]; }
  const T& operator[](std::size_t i) const { return impl_->values[i]; }

  T item() const {
    if (size() != 1) throw std::invalid_argument("item(): tensor " + shape_str(shape()) + " is not scalar");
    return impl_->values[0];
  }

  void ensure_grad() {
    if (impl_->grad.size() != impl_->values.size()) impl_->grad.assign(impl_->values.size(), T(0));
  }
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }
  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  std::vector<T>& grad() {
    ensure_grad();
    return impl_->grad;
  }
  const std::vector<T>& grad() const {
    if (impl_->grad.empty()) throw std::runtime_error("grad(): no gradient populated");
    return impl_->grad;
  }

  bool all_finite() const {
    for (T v : impl_->values)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  const std::shared_ptr<Impl>& impl() const { return impl_; }

 private:
  std::shared_ptr<Impl> impl_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace radformer
