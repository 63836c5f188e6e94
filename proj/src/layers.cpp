#include "fmbff/layers.hpp"

namespace fmbff {

template <typename T>
Conv2d<T> Conv2d<T>::make(ParamStore<T>& store, const std::string& name, Index cin, Index cout,
                          Index kh, Index kw, Index groups, bool with_bias) {
  if (groups < 1 || cin % groups != 0 || cout % groups != 0) {
    throw ConfigError(name + ": channels " + std::to_string(cin) + "->" + std::to_string(cout) +
                      " not divisible by groups " + std::to_string(groups));
  }
  Conv2d c;
  c.weight = store.add(name + ".weight", {cout, cin / groups, kh, kw}, Init::fan_in_uniform);
  if (with_bias) c.bias = store.add(name + ".bias", {cout}, Init::zeros);
  c.opt = Conv2dOptions::same(kh, kw, groups);
  return c;
}

template <typename T>
DwsConv<T> DwsConv<T>::make(ParamStore<T>& store, const std::string& name, Index cin, Index cout) {
  return {Conv2d<T>::make(store, name + ".depthwise", cin, cin, 3, 3, cin),
          Conv2d<T>::make(store, name + ".pointwise", cin, cout, 1, 1)};
}

template <typename T>
LayerNorm<T> LayerNorm<T>::make(ParamStore<T>& store, const std::string& name, Index channels) {
  return {store.add(name + ".weight", {channels}, Init::ones),
          store.add(name + ".bias", {channels}, Init::zeros)};
}

template <typename T>
BatchNorm<T> BatchNorm<T>::make(ParamStore<T>& store, const std::string& name, Index channels, double momentum) {
  BatchNorm b;
  b.momentum = momentum;
  b.weight = store.add(name + ".weight", {channels}, Init::ones);
  b.bias = store.add(name + ".bias", {channels}, Init::zeros);
  b.buffers.running_mean = store.add_buffer(name + ".running_mean", {channels}, T{0});
  b.buffers.running_var = store.add_buffer(name + ".running_var", {channels}, T{1});
  b.buffers.tracked = store.add_buffer(name + ".tracked", {1}, T{0});
  return b;
}

template struct Conv2d<float>;
template struct Conv2d<double>;
template struct DwsConv<float>;
template struct DwsConv<double>;
template struct LayerNorm<float>;
template struct LayerNorm<double>;
template struct BatchNorm<float>;
template struct BatchNorm<double>;

}  // namespace fmbff
