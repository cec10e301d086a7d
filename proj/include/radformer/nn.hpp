#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "radformer/conv.hpp"
#include "radformer/ops.hpp"
#include "radformer/rng.hpp"
#include "radformer/tensor.hpp"

namespace radformer {

// A named trainable tensor. Frozen parameters keep receiving gradients but
// the optimizer must not touch them.
template <typename T>
struct Parameter {
  Tensor<T> tensor;
  std::string name;
  bool frozen = false;
};

// View into one entry of a model's state (parameters plus persistent buffers
// such as batch-norm running statistics); used by checkpoint save/load.
template <typename T>
struct StateEntry {
  std::string name;
  Shape shape;
  std::vector<T>* values;
};

template <typename T>
inline std::vector<T> he_normal(Rng& rng, std::size_t n, std::size_t fan_in) {
  const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(rng.normal(0.0, std_dev));
  return v;
}

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(std::string name, std::size_t in_features, std::size_t out_features, Rng& rng) {
    weight.name = name + ".weight";
    weight.tensor = Tensor<T>::leaf({out_features, in_features},
                                    he_normal<T>(rng, out_features * in_features, in_features),
                                    true);
    bias.name = name + ".bias";
    bias.tensor = Tensor<T>::leaf({out_features}, std::vector<T>(out_features, T(0)), true);
  }

  // x[n,in] -> [n,out]
  Tensor<T> forward(const Tensor<T>& x) const {
    return add_rowvec(matmul_nt(x, weight.tensor), bias.tensor);
  }

  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
  void state(std::vector<StateEntry<T>>& out) {
    out.push_back({weight.name, weight.tensor.shape(), &weight.tensor.values()});
    out.push_back({bias.name, bias.tensor.shape(), &bias.tensor.values()});
  }

  Parameter<T> weight, bias;
};

template <typename T>
class Conv2dLayer {
 public:
  Conv2dLayer() = default;
  Conv2dLayer(std::string name, std::size_t in_ch, std::size_t out_ch, std::size_t kernel,
              std::size_t stride_, std::size_t pad_, Rng& rng, bool with_bias = false)
      : stride(stride_), pad(pad_), has_bias(with_bias) {
    weight.name = name + ".weight";
    const std::size_t n = out_ch * in_ch * kernel * kernel;
    weight.tensor = Tensor<T>::leaf({out_ch, in_ch, kernel, kernel},
                                    he_normal<T>(rng, n, in_ch * kernel * kernel), true);
    if (with_bias) {
      bias.name = name + ".bias";
      bias.tensor = Tensor<T>::leaf({out_ch}, std::vector<T>(out_ch, T(0)), true);
    }
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return has_bias ? conv2d(x, weight.tensor, bias.tensor, stride, pad)
                    : conv2d(x, weight.tensor, stride, pad);
  }

  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&weight);
    if (has_bias) out.push_back(&bias);
  }
  void state(std::vector<StateEntry<T>>& out) {
    out.push_back({weight.name, weight.tensor.shape(), &weight.tensor.values()});
    if (has_bias) out.push_back({bias.name, bias.tensor.shape(), &bias.tensor.values()});
  }

  Parameter<T> weight, bias;
  std::size_t stride = 1, pad = 0;
  bool has_bias = false;
};

template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(std::string name_, std::size_t channels) : name(name_) {
    gamma.name = name_ + ".weight";
    gamma.tensor = Tensor<T>::leaf({channels}, std::vector<T>(channels, T(1)), true);
    beta.name = name_ + ".bias";
    beta.tensor = Tensor<T>::leaf({channels}, std::vector<T>(channels, T(0)), true);
    running_mean.assign(channels, T(0));
    running_var.assign(channels, T(1));
  }

  Tensor<T> forward(const Tensor<T>& x) {
    return batch_norm2d(x, gamma.tensor, beta.tensor, running_mean, running_var, training,
                        momentum, eps);
  }

  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }
  void state(std::vector<StateEntry<T>>& out) {
    out.push_back({gamma.name, gamma.tensor.shape(), &gamma.tensor.values()});
    out.push_back({beta.name, beta.tensor.shape(), &beta.tensor.values()});
    out.push_back({name + ".running_mean", {running_mean.size()}, &running_mean});
    out.push_back({name + ".running_var", {running_var.size()}, &running_var});
  }

  std::string name;
  Parameter<T> gamma, beta;
  std::vector<T> running_mean, running_var;
  bool training = true;
  T momentum = T(0.1);
  T eps = T(1e-5);
};

template <typename T>
class LayerNormLayer {
 public:
  LayerNormLayer() = default;
  LayerNormLayer(std::string name, std::size_t dim) {
    gamma.name = name + ".weight";
    gamma.tensor = Tensor<T>::leaf({dim}, std::vector<T>(dim, T(1)), true);
    beta.name = name + ".bias";
    beta.tensor = Tensor<T>::leaf({dim}, std::vector<T>(dim, T(0)), true);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return layer_norm(x, gamma.tensor, beta.tensor, eps);
  }

  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }
  void state(std::vector<StateEntry<T>>& out) {
    out.push_back({gamma.name, gamma.tensor.shape(), &gamma.tensor.values()});
    out.push_back({beta.name, beta.tensor.shape(), &beta.tensor.values()});
  }

  Parameter<T> gamma, beta;
  T eps = T(1e-5);
};

}  // namespace radformer
