#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fmbff/ops.hpp"
#include "fmbff/param_store.hpp"

namespace fmbff {

// Named tensors captured during a forward pass (gates, attention maps).
template <typename T>
struct Probe {
  std::vector<std::pair<std::string, Tensor<T>>> gates;
  std::vector<std::pair<std::string, Tensor<T>>> attention;
};

template <typename T>
struct RunContext {
  Mode mode = Mode::eval;
  std::mt19937_64* rng = nullptr;  // required for dropout in train mode
  Probe<T>* probe = nullptr;
};

template <typename T>
struct Conv2d {
  Tensor<T> weight;
  Tensor<T> bias;  // may be undefined
  Conv2dOptions opt;

  // Same-padded kernel registered as `<name>.weight` / `<name>.bias`.
  static Conv2d make(ParamStore<T>& store, const std::string& name, Index cin, Index cout,
                     Index kh, Index kw, Index groups = 1, bool with_bias = true);

  Index in_channels() const { return weight.dim(1) * opt.groups; }
  Index out_channels() const { return weight.dim(0); }
  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, opt); }
};

// Depthwise 3x3 (groups = Cin) followed by pointwise 1x1.
template <typename T>
struct DwsConv {
  Conv2d<T> depthwise;
  Conv2d<T> pointwise;

  static DwsConv make(ParamStore<T>& store, const std::string& name, Index cin, Index cout);
  Tensor<T> operator()(const Tensor<T>& x) const { return pointwise(depthwise(x)); }
};

template <typename T>
struct LayerNorm {
  Tensor<T> weight, bias;

  static LayerNorm make(ParamStore<T>& store, const std::string& name, Index channels);
  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, weight, bias); }
};

template <typename T>
struct BatchNorm {
  Tensor<T> weight, bias;
  BatchNormBuffers<T> buffers;
  double momentum = 0.1;

  static BatchNorm make(ParamStore<T>& store, const std::string& name, Index channels, double momentum = 0.1);
  Tensor<T> operator()(const Tensor<T>& x, Mode mode) const {
    return batch_norm(x, weight, bias, buffers, mode, 1e-5, momentum);
  }
};

}  // namespace fmbff
