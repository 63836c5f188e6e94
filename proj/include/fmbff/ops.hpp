#pragma once

#include <random>
#include <vector>

#include "fmbff/tensor.hpp"

namespace fmbff {

struct Conv2dOptions {
  Index stride_h = 1, stride_w = 1;
  Index pad_h = 0, pad_w = 0;
  Index groups = 1;

  static Conv2dOptions same(Index kh, Index kw, Index groups = 1) {
    return {1, 1, kh / 2, kw / 2, groups};
  }
};

// x: N x Cin x H x W, w: Cout x (Cin/groups) x Kh x Kw, b: Cout or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 const Conv2dOptions& opt = {});

enum class PoolKind { max2x2, global_avg, global_max };

template <typename T>
Tensor<T> pool(const Tensor<T>& x, PoolKind kind);

template <typename T>
Tensor<T> max_pool2x2(const Tensor<T>& x) { return pool(x, PoolKind::max2x2); }
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) { return pool(x, PoolKind::global_avg); }
template <typename T>
Tensor<T> global_max_pool(const Tensor<T>& x) { return pool(x, PoolKind::global_max); }

// Align-corners bilinear interpolation of an N x C x H x W tensor.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, Index out_h, Index out_w);

// Normalizes each sample over C x H x W, then applies per-channel affine.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                     double eps = 1e-5);

// Non-learnable batch-norm state. All three are leaves mutated in train mode;
// `tracked` counts the batches folded into the running estimates.
template <typename T>
struct BatchNormBuffers {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  Tensor<T> tracked;
};

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                     const BatchNormBuffers<T>& buffers, Mode mode, double eps = 1e-5,
                     double momentum = 0.1);

enum class Activation { relu, gelu, sigmoid };

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind);

template <typename T>
Tensor<T> relu(const Tensor<T>& x) { return activation(x, Activation::relu); }
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) { return activation(x, Activation::gelu); }
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) { return activation(x, Activation::sigmoid); }

// Max-subtracted softmax along `axis` (negative counts from the back).
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis);

// Elementwise arithmetic. `b` must match `a`, or have the same rank with
// extent 1 on broadcast axes (e.g. N x C x 1 x 1, 1 x C x H x W), or hold a
// single element.
enum class BinaryKind { add, sub, mul };

template <typename T>
Tensor<T> elementwise(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(a, b, BinaryKind::add); }
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(a, b, BinaryKind::sub); }
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(a, b, BinaryKind::mul); }

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value);
template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T value);
// Elementwise power with a fixed exponent.
template <typename T>
Tensor<T> pow_scalar(const Tensor<T>& a, T exponent);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

// (M x K) . (K x N)
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// (B x M x K) . (B x K x N)
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& order);
// Swaps the last two axes.
template <typename T>
Tensor<T> transpose(const Tensor<T>& x);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis);
// Output channel k takes input channel (k mod g) * (C / g) + k / g.
template <typename T>
Tensor<T> channel_shuffle(const Tensor<T>& x, Index groups);

// Inverted dropout; identity in eval mode or when p == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Mode mode, std::mt19937_64* rng);

// Uniform double in [0, 1) from 53 high bits; stable across standard libraries.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0);
}

}  // namespace fmbff
