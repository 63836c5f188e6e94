#include "fmbff/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "fmbff/kernels.hpp"

namespace fmbff {

using detail::input_grad;

namespace {

template <typename T>
using NodeT = detail::Node<T>;

template <typename T>
void require_rank(const Tensor<T>& x, int rank, const char* op) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         " input, got shape " + shape_str(x.shape()));
  }
}

int normalize_axis(int axis, int rank, const char* op) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for rank " +
                         std::to_string(rank));
  }
  return a;
}

}  // namespace

// ---------------------------------------------------------------- conv2d

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 const Conv2dOptions& opt) {
  require_rank(x, 4, "conv2d");
  require_rank(w, 4, "conv2d weight");
  if (opt.groups < 1) {
    throw ConfigError("conv2d: groups must be positive");
  }
  ConvGeometry g;
  g.n = x.dim(0);
  g.cin = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.cout = w.dim(0);
  g.kh = w.dim(2);
  g.kw = w.dim(3);
  g.stride_h = opt.stride_h;
  g.stride_w = opt.stride_w;
  g.pad_h = opt.pad_h;
  g.pad_w = opt.pad_w;
  g.groups = opt.groups;
  if (g.cin % g.groups != 0 || g.cout % g.groups != 0) {
    throw ConfigError("conv2d: channels (" + std::to_string(g.cin) + " in, " +
                      std::to_string(g.cout) + " out) not divisible by groups " +
                      std::to_string(g.groups));
  }
  if (w.dim(1) != g.cin / g.groups) {
    throw DimensionError("conv2d: axis 1 (channels) mismatch: input has " + std::to_string(g.cin) +
                         " channels, weight expects " + std::to_string(w.dim(1) * g.groups));
  }
  if (g.stride_h < 1 || g.stride_w < 1 || g.pad_h < 0 || g.pad_w < 0) {
    throw ConfigError("conv2d: stride must be >= 1 and padding >= 0");
  }
  if (g.h + 2 * g.pad_h < g.kh) {
    throw DimensionError("conv2d: axis 2 (height) too small for kernel");
  }
  if (g.w + 2 * g.pad_w < g.kw) {
    throw DimensionError("conv2d: axis 3 (width) too small for kernel");
  }
  const bool has_bias = b.defined();
  if (has_bias && (b.rank() != 1 || b.dim(0) != g.cout)) {
    throw DimensionError("conv2d: bias axis 0 must equal output channels " + std::to_string(g.cout));
  }
  const Index oh = g.out_h(), ow = g.out_w();
  std::vector<T> y(static_cast<std::size_t>(g.n * g.cout * oh * ow));
  kernels::conv2d_forward(g, x.data().data(), w.data().data(),
                          has_bias ? b.data().data() : nullptr, y.data());

  std::vector<Tensor<T>> inputs{x, w};
  if (has_bias) inputs.push_back(b);
  return Tensor<T>::from_op(
      {g.n, g.cout, oh, ow}, std::move(y), "conv2d", inputs, [g, has_bias](NodeT<T>& self) {
        const T* dy = self.grad.data();
        const T* xd = self.inputs[0]->data.data();
        const T* wd = self.inputs[1]->data.data();
        if (auto gx = input_grad(self, 0); !gx.empty()) {
          kernels::conv2d_backward_input(g, dy, wd, gx.data());
        }
        auto gw = input_grad(self, 1);
        std::span<T> gb = has_bias ? input_grad(self, 2) : std::span<T>{};
        if (!gw.empty()) {
          kernels::conv2d_backward_weight(g, dy, xd, gw.data(), gb.empty() ? nullptr : gb.data());
        } else if (!gb.empty()) {
          const Index hw = g.out_h() * g.out_w();
          for (Index n = 0; n < g.n; ++n)
            for (Index c = 0; c < g.cout; ++c)
              for (Index i = 0; i < hw; ++i) gb[c] += dy[(n * g.cout + c) * hw + i];
        }
      });
}

// ---------------------------------------------------------------- pooling

template <typename T>
Tensor<T> pool(const Tensor<T>& x, PoolKind kind) {
  require_rank(x, 4, "pool");
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index planes = n * c, hw = h * w;
  const T* xd = x.data().data();
  switch (kind) {
    case PoolKind::max2x2: {
      const Index oh = (h + 1) / 2, ow = (w + 1) / 2;
      std::vector<T> y(static_cast<std::size_t>(planes * oh * ow));
      std::vector<Index> arg(y.size());
      kernels::max_pool2x2_forward(planes, h, w, xd, y.data(), arg.data());
      return Tensor<T>::from_op({n, c, oh, ow}, std::move(y), "max_pool2x2", {x},
                                [arg = std::move(arg)](NodeT<T>& self) {
                                  auto gx = input_grad(self, 0);
                                  for (std::size_t i = 0; i < arg.size(); ++i)
                                    gx[static_cast<std::size_t>(arg[i])] += self.grad[i];
                                });
    }
    case PoolKind::global_avg: {
      std::vector<T> y(static_cast<std::size_t>(planes));
      for (Index p = 0; p < planes; ++p) {
        T s{0};
        for (Index i = 0; i < hw; ++i) s += xd[p * hw + i];
        y[static_cast<std::size_t>(p)] = s / static_cast<T>(hw);
      }
      return Tensor<T>::from_op({n, c, 1, 1}, std::move(y), "global_avg_pool", {x},
                                [planes, hw](NodeT<T>& self) {
                                  auto gx = input_grad(self, 0);
                                  for (Index p = 0; p < planes; ++p) {
                                    const T g = self.grad[p] / static_cast<T>(hw);
                                    for (Index i = 0; i < hw; ++i) gx[p * hw + i] += g;
                                  }
                                });
    }
    case PoolKind::global_max: {
      std::vector<T> y(static_cast<std::size_t>(planes));
      std::vector<Index> arg(static_cast<std::size_t>(planes));
      for (Index p = 0; p < planes; ++p) {
        Index best = 0;
        for (Index i = 1; i < hw; ++i)
          if (xd[p * hw + i] > xd[p * hw + best]) best = i;
        arg[p] = p * hw + best;
        y[p] = xd[p * hw + best];
      }
      return Tensor<T>::from_op({n, c, 1, 1}, std::move(y), "global_max_pool", {x},
                                [arg = std::move(arg)](NodeT<T>& self) {
                                  auto gx = input_grad(self, 0);
                                  for (std::size_t i = 0; i < arg.size(); ++i)
                                    gx[static_cast<std::size_t>(arg[i])] += self.grad[i];
                                });
    }
  }
  throw ConfigError("pool: unknown kind");
}

// ---------------------------------------------------------------- resize

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, Index out_h, Index out_w) {
  require_rank(x, 4, "bilinear_resize");
  if (out_h < 1 || out_w < 1) {
    throw DimensionError("bilinear_resize: target extents must be >= 1");
  }
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h == out_h && w == out_w) {
    return x;
  }
  std::vector<T> y(static_cast<std::size_t>(n * c * out_h * out_w));
  kernels::bilinear_forward(n * c, h, w, out_h, out_w, x.data().data(), y.data());
  return Tensor<T>::from_op({n, c, out_h, out_w}, std::move(y), "bilinear_resize", {x},
                            [n, c, h, w, out_h, out_w](NodeT<T>& self) {
                              auto gx = input_grad(self, 0);
                              kernels::bilinear_backward(n * c, h, w, out_h, out_w,
                                                         self.grad.data(), gx.data());
                            });
}

// ---------------------------------------------------------------- normalization

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                     double eps) {
  require_rank(x, 4, "layer_norm");
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (weight.numel() != c || bias.numel() != c) {
    throw DimensionError("layer_norm: affine parameters must have one entry per channel (axis 1)");
  }
  const Index group = c * hw;
  const T* xd = x.data().data();
  const T* wd = weight.data().data();
  const T* bd = bias.data().data();
  std::vector<T> xhat(static_cast<std::size_t>(n * group));
  std::vector<T> inv_std(static_cast<std::size_t>(n));
  std::vector<T> y(xhat.size());
  for (Index s = 0; s < n; ++s) {
    const T* src = xd + s * group;
    double m = 0;
    for (Index i = 0; i < group; ++i) m += src[i];
    m /= static_cast<double>(group);
    double v = 0;
    for (Index i = 0; i < group; ++i) v += (src[i] - m) * (src[i] - m);
    v /= static_cast<double>(group);
    const T is = static_cast<T>(1.0 / std::sqrt(v + eps));
    inv_std[s] = is;
    for (Index ch = 0; ch < c; ++ch) {
      for (Index i = 0; i < hw; ++i) {
        const Index k = s * group + ch * hw + i;
        xhat[k] = (xd[k] - static_cast<T>(m)) * is;
        y[k] = xhat[k] * wd[ch] + bd[ch];
      }
    }
  }
  return Tensor<T>::from_op(
      x.shape(), std::move(y), "layer_norm", {x, weight, bias},
      [n, c, hw, group, xhat = std::move(xhat), inv_std = std::move(inv_std)](NodeT<T>& self) {
        const T* dy = self.grad.data();
        const T* wd = self.inputs[1]->data.data();
        auto gx = input_grad(self, 0);
        auto gw = input_grad(self, 1);
        auto gb = input_grad(self, 2);
        for (Index s = 0; s < n; ++s) {
          double mean_g = 0, mean_gx = 0;
          for (Index ch = 0; ch < c; ++ch) {
            for (Index i = 0; i < hw; ++i) {
              const Index k = s * group + ch * hw + i;
              const double gh = static_cast<double>(dy[k]) * wd[ch];
              mean_g += gh;
              mean_gx += gh * xhat[k];
              if (!gw.empty()) gw[ch] += dy[k] * xhat[k];
              if (!gb.empty()) gb[ch] += dy[k];
            }
          }
          if (gx.empty()) continue;
          mean_g /= static_cast<double>(group);
          mean_gx /= static_cast<double>(group);
          for (Index ch = 0; ch < c; ++ch) {
            for (Index i = 0; i < hw; ++i) {
              const Index k = s * group + ch * hw + i;
              const double gh = static_cast<double>(dy[k]) * wd[ch];
              gx[k] += static_cast<T>(inv_std[s] * (gh - mean_g - xhat[k] * mean_gx));
            }
          }
        }
      });
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                     const BatchNormBuffers<T>& buffers, Mode mode, double eps, double momentum) {
  require_rank(x, 4, "batch_norm");
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (weight.numel() != c || bias.numel() != c || buffers.running_mean.numel() != c ||
      buffers.running_var.numel() != c) {
    throw DimensionError("batch_norm: parameters must have one entry per channel (axis 1)");
  }
  const T* xd = x.data().data();
  const T* wd = weight.data().data();
  const T* bd = bias.data().data();
  std::vector<T> xhat(static_cast<std::size_t>(x.numel()));
  std::vector<T> inv_std(static_cast<std::size_t>(c));
  std::vector<T> y(xhat.size());
  const bool train = mode == Mode::train;
  if (train) {
    Tensor<T> rm = buffers.running_mean, rv = buffers.running_var, tr = buffers.tracked;
    auto rmd = rm.mutable_data();
    auto rvd = rv.mutable_data();
    const double count = static_cast<double>(n * hw);
    for (Index ch = 0; ch < c; ++ch) {
      double m = 0;
      for (Index s = 0; s < n; ++s)
        for (Index i = 0; i < hw; ++i) m += xd[(s * c + ch) * hw + i];
      m /= count;
      double v = 0;
      for (Index s = 0; s < n; ++s)
        for (Index i = 0; i < hw; ++i) {
          const double d = xd[(s * c + ch) * hw + i] - m;
          v += d * d;
        }
      const double unbiased = count > 1 ? v / (count - 1) : 0.0;
      v /= count;
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(v + eps));
      const T mt = static_cast<T>(m);
      for (Index s = 0; s < n; ++s)
        for (Index i = 0; i < hw; ++i) {
          const Index k = (s * c + ch) * hw + i;
          xhat[k] = (xd[k] - mt) * inv_std[ch];
          y[k] = xhat[k] * wd[ch] + bd[ch];
        }
      rmd[ch] = static_cast<T>((1.0 - momentum) * rmd[ch] + momentum * m);
      rvd[ch] = static_cast<T>((1.0 - momentum) * rvd[ch] + momentum * unbiased);
    }
    tr.mutable_data()[0] += T{1};
  } else {
    if (buffers.tracked.data()[0] <= T{0}) {
      throw StateError("batch_norm: eval mode requested before running statistics were populated");
    }
    const T* rm = buffers.running_mean.data().data();
    const T* rv = buffers.running_var.data().data();
    for (Index ch = 0; ch < c; ++ch) {
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(rv[ch]) + eps));
      for (Index s = 0; s < n; ++s)
        for (Index i = 0; i < hw; ++i) {
          const Index k = (s * c + ch) * hw + i;
          xhat[k] = (xd[k] - rm[ch]) * inv_std[ch];
          y[k] = xhat[k] * wd[ch] + bd[ch];
        }
    }
  }
  return Tensor<T>::from_op(
      x.shape(), std::move(y), "batch_norm", {x, weight, bias},
      [n, c, hw, train, xhat = std::move(xhat), inv_std = std::move(inv_std)](NodeT<T>& self) {
        const T* dy = self.grad.data();
        const T* wd = self.inputs[1]->data.data();
        auto gx = input_grad(self, 0);
        auto gw = input_grad(self, 1);
        auto gb = input_grad(self, 2);
        const double count = static_cast<double>(n * hw);
        for (Index ch = 0; ch < c; ++ch) {
          double sum_g = 0, sum_gx = 0;
          for (Index s = 0; s < n; ++s)
            for (Index i = 0; i < hw; ++i) {
              const Index k = (s * c + ch) * hw + i;
              sum_g += dy[k];
              sum_gx += static_cast<double>(dy[k]) * xhat[k];
            }
          if (!gw.empty()) gw[ch] += static_cast<T>(sum_gx);
          if (!gb.empty()) gb[ch] += static_cast<T>(sum_g);
          if (gx.empty()) continue;
          const double scale = static_cast<double>(wd[ch]) * inv_std[ch];
          for (Index s = 0; s < n; ++s)
            for (Index i = 0; i < hw; ++i) {
              const Index k = (s * c + ch) * hw + i;
              if (train) {
                gx[k] += static_cast<T>(scale * (dy[k] - sum_g / count - xhat[k] * sum_gx / count));
              } else {
                gx[k] += static_cast<T>(scale * dy[k]);
              }
            }
        }
      });
}

// ---------------------------------------------------------------- activations

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  const auto xd = x.data();
  std::vector<T> y(xd.size());
  const std::size_t count = y.size();
  switch (kind) {
    case Activation::relu:
      for (std::size_t i = 0; i < count; ++i) y[i] = xd[i] > T{0} ? xd[i] : T{0};
      return Tensor<T>::from_op(x.shape(), std::move(y), "relu", {x}, [](NodeT<T>& self) {
        auto gx = input_grad(self, 0);
        const auto& in = self.inputs[0]->data;
        for (std::size_t i = 0; i < gx.size(); ++i)
          if (in[i] > T{0}) gx[i] += self.grad[i];
      });
    case Activation::gelu: {
      constexpr double inv_sqrt2 = 0.70710678118654752440;
      for (std::size_t i = 0; i < count; ++i) {
        const double v = xd[i];
        y[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
      }
      return Tensor<T>::from_op(x.shape(), std::move(y), "gelu", {x}, [](NodeT<T>& self) {
        constexpr double inv_sqrt2 = 0.70710678118654752440;
        constexpr double inv_sqrt_2pi = 0.39894228040143267794;
        auto gx = input_grad(self, 0);
        const auto& in = self.inputs[0]->data;
        for (std::size_t i = 0; i < gx.size(); ++i) {
          const double v = in[i];
          const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
          const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
          gx[i] += static_cast<T>(self.grad[i] * (cdf + v * pdf));
        }
      });
    }
    case Activation::sigmoid:
      for (std::size_t i = 0; i < count; ++i) {
        const double v = xd[i];
        // Branches keep exp() from overflowing for large |v|.
        y[i] = static_cast<T>(v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)));
      }
      return Tensor<T>::from_op(x.shape(), std::move(y), "sigmoid", {x}, [](NodeT<T>& self) {
        auto gx = input_grad(self, 0);
        for (std::size_t i = 0; i < gx.size(); ++i) {
          const T s = self.data[i];
          gx[i] += self.grad[i] * s * (T{1} - s);
        }
      });
  }
  throw ConfigError("activation: unknown kind");
}

// ---------------------------------------------------------------- softmax

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const int a = normalize_axis(axis, x.rank(), "softmax");
  const Shape& s = x.shape();
  Index outer = 1, inner = 1;
  for (int i = 0; i < a; ++i) outer *= s[i];
  for (int i = a + 1; i < x.rank(); ++i) inner *= s[i];
  const Index len = s[a];
  const T* xd = x.data().data();
  std::vector<T> y(static_cast<std::size_t>(x.numel()));
  for (Index o = 0; o < outer; ++o) {
    for (Index in = 0; in < inner; ++in) {
      const Index base = o * len * inner + in;
      T mx = xd[base];
      for (Index k = 1; k < len; ++k) mx = std::max(mx, xd[base + k * inner]);
      double total = 0;
      for (Index k = 0; k < len; ++k) {
        const double e = std::exp(static_cast<double>(xd[base + k * inner] - mx));
        y[base + k * inner] = static_cast<T>(e);
        total += e;
      }
      for (Index k = 0; k < len; ++k) y[base + k * inner] = static_cast<T>(y[base + k * inner] / total);
    }
  }
  return Tensor<T>::from_op(x.shape(), std::move(y), "softmax", {x},
                            [outer, inner, len](NodeT<T>& self) {
                              auto gx = input_grad(self, 0);
                              const auto& yv = self.data;
                              const auto& gy = self.grad;
                              for (Index o = 0; o < outer; ++o) {
                                for (Index in = 0; in < inner; ++in) {
                                  const Index base = o * len * inner + in;
                                  double dot = 0;
                                  for (Index k = 0; k < len; ++k)
                                    dot += static_cast<double>(gy[base + k * inner]) * yv[base + k * inner];
                                  for (Index k = 0; k < len; ++k) {
                                    const Index i = base + k * inner;
                                    gx[i] += static_cast<T>(yv[i] * (gy[i] - dot));
                                  }
                                }
                              }
                            });
}

// ---------------------------------------------------------------- elementwise

namespace {

// Maps each flat index of `a` onto the flat index of broadcast operand `b`.
// Returns an empty vector for the identity mapping (same shape).
std::vector<Index> broadcast_map(const Shape& a, const Shape& b, bool& scalar) {
  scalar = false;
  if (a == b) return {};
  if (shape_numel(b) == 1) {
    scalar = true;
    return {};
  }
  if (a.size() != b.size()) {
    throw DimensionError("elementwise: cannot broadcast " + shape_str(b) + " to " + shape_str(a));
  }
  const std::size_t r = a.size();
  std::vector<Index> bstride(r, 0);
  Index st = 1;
  for (std::size_t i = r; i-- > 0;) {
    if (b[i] == a[i]) {
      bstride[i] = st;
    } else if (b[i] != 1) {
      throw DimensionError("elementwise: axis " + std::to_string(i) + " extent " +
                           std::to_string(b[i]) + " cannot broadcast to " + std::to_string(a[i]));
    }
    st *= b[i];
  }
  const Index total = shape_numel(a);
  std::vector<Index> map(static_cast<std::size_t>(total));
  std::vector<Index> coord(r, 0);
  Index off = 0;
  for (Index f = 0; f < total; ++f) {
    map[f] = off;
    for (std::size_t i = r; i-- > 0;) {
      ++coord[i];
      off += bstride[i];
      if (coord[i] < a[i]) break;
      off -= bstride[i] * coord[i];
      coord[i] = 0;
    }
  }
  return map;
}

}  // namespace

template <typename T>
Tensor<T> elementwise(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind) {
  bool scalar = false;
  std::vector<Index> map = broadcast_map(a.shape(), b.shape(), scalar);
  const bool same = map.empty() && !scalar;
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<T> y(ad.size());
  auto bidx = [&](std::size_t i) -> std::size_t {
    return same ? i : scalar ? 0 : static_cast<std::size_t>(map[i]);
  };
  switch (kind) {
    case BinaryKind::add:
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = ad[i] + bd[bidx(i)];
      break;
    case BinaryKind::sub:
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = ad[i] - bd[bidx(i)];
      break;
    case BinaryKind::mul:
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = ad[i] * bd[bidx(i)];
      break;
  }
  const char* name = kind == BinaryKind::add ? "add" : kind == BinaryKind::sub ? "sub" : "mul";
  return Tensor<T>::from_op(
      a.shape(), std::move(y), name, {a, b},
      [kind, same, scalar, map = std::move(map)](NodeT<T>& self) {
        auto bidx = [&](std::size_t i) -> std::size_t {
          return same ? i : scalar ? 0 : static_cast<std::size_t>(map[i]);
        };
        const auto& gy = self.grad;
        const auto& av = self.inputs[0]->data;
        const auto& bv = self.inputs[1]->data;
        auto ga = input_grad(self, 0);
        auto gb = input_grad(self, 1);
        for (std::size_t i = 0; i < gy.size(); ++i) {
          const std::size_t j = bidx(i);
          switch (kind) {
            case BinaryKind::add:
              if (!ga.empty()) ga[i] += gy[i];
              if (!gb.empty()) gb[j] += gy[i];
              break;
            case BinaryKind::sub:
              if (!ga.empty()) ga[i] += gy[i];
              if (!gb.empty()) gb[j] -= gy[i];
              break;
            case BinaryKind::mul:
              if (!ga.empty()) ga[i] += gy[i] * bv[j];
              if (!gb.empty()) gb[j] += gy[i] * av[i];
              break;
          }
        }
      });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value) {
  std::vector<T> y(a.data().begin(), a.data().end());
  for (T& v : y) v += value;
  return Tensor<T>::from_op(a.shape(), std::move(y), "add_scalar", {a}, [](NodeT<T>& self) {
    auto ga = input_grad(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T value) {
  std::vector<T> y(a.data().begin(), a.data().end());
  for (T& v : y) v *= value;
  return Tensor<T>::from_op(a.shape(), std::move(y), "mul_scalar", {a}, [value](NodeT<T>& self) {
    auto ga = input_grad(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * value;
  });
}

template <typename T>
Tensor<T> pow_scalar(const Tensor<T>& a, T exponent) {
  std::vector<T> y(a.data().begin(), a.data().end());
  for (T& v : y) v = std::pow(v, exponent);
  return Tensor<T>::from_op(a.shape(), std::move(y), "pow_scalar", {a}, [exponent](NodeT<T>& self) {
    auto ga = input_grad(self, 0);
    const auto& av = self.inputs[0]->data;
    for (std::size_t i = 0; i < ga.size(); ++i)
      ga[i] += self.grad[i] * exponent * std::pow(av[i], exponent - T{1});
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  double s = 0;
  for (T v : x.data()) s += v;
  return Tensor<T>::from_op({1}, {static_cast<T>(s)}, "sum", {x}, [](NodeT<T>& self) {
    auto gx = input_grad(self, 0);
    for (T& g : gx) g += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  double s = 0;
  for (T v : x.data()) s += v;
  const T inv = T{1} / static_cast<T>(x.numel());
  return Tensor<T>::from_op({1}, {static_cast<T>(s) * inv}, "mean", {x}, [inv](NodeT<T>& self) {
    auto gx = input_grad(self, 0);
    for (T& g : gx) g += self.grad[0] * inv;
  });
}

// ---------------------------------------------------------------- matmul

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 3, "bmm");
  require_rank(b, 3, "bmm");
  const Index batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  if (b.dim(0) != batch) {
    throw DimensionError("bmm: axis 0 (batch) mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  if (b.dim(1) != k) {
    throw DimensionError("bmm: inner extents differ " + shape_str(a.shape()) + " . " +
                         shape_str(b.shape()));
  }
  std::vector<T> y(static_cast<std::size_t>(batch * m * n));
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  for (Index i = 0; i < batch; ++i) {
    kernels::gemm<T>(false, false, m, n, k, T{1}, ad + i * m * k, k, bd + i * k * n, n, T{0},
                     y.data() + i * m * n, n);
  }
  return Tensor<T>::from_op({batch, m, n}, std::move(y), "matmul", {a, b},
                            [batch, m, k, n](NodeT<T>& self) {
                              const T* gy = self.grad.data();
                              const T* av = self.inputs[0]->data.data();
                              const T* bv = self.inputs[1]->data.data();
                              auto ga = input_grad(self, 0);
                              auto gb = input_grad(self, 1);
                              for (Index i = 0; i < batch; ++i) {
                                if (!ga.empty())  // dA = dY . B^T
                                  kernels::gemm<T>(false, true, m, k, n, T{1}, gy + i * m * n, n,
                                                   bv + i * k * n, n, T{1}, ga.data() + i * m * k, k);
                                if (!gb.empty())  // dB = A^T . dY
                                  kernels::gemm<T>(true, false, k, n, m, T{1}, av + i * m * k, k,
                                                   gy + i * m * n, n, T{1}, gb.data() + i * k * n, n);
                              }
                            });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner extents differ " + shape_str(a.shape()) + " . " +
                         shape_str(b.shape()));
  }
  Tensor<T> out = bmm(reshape(a, {1, a.dim(0), a.dim(1)}), reshape(b, {1, b.dim(0), b.dim(1)}));
  return reshape(out, {a.dim(0), b.dim(1)});
}

// ---------------------------------------------------------------- layout

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape) +
                         " changes the element count");
  }
  std::vector<T> y(x.data().begin(), x.data().end());
  return Tensor<T>::from_op(std::move(shape), std::move(y), "reshape", {x}, [](NodeT<T>& self) {
    auto gx = input_grad(self, 0);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& order) {
  const int r = x.rank();
  if (static_cast<int>(order.size()) != r) {
    throw DimensionError("permute: order length must equal rank");
  }
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  for (int o : order) {
    if (o < 0 || o >= r || seen[static_cast<std::size_t>(o)]) {
      throw DimensionError("permute: order is not a permutation of the axes");
    }
    seen[static_cast<std::size_t>(o)] = true;
  }
  const Shape& in = x.shape();
  Shape out(static_cast<std::size_t>(r));
  std::vector<Index> in_stride(static_cast<std::size_t>(r));
  Index st = 1;
  for (int i = r - 1; i >= 0; --i) {
    in_stride[i] = st;
    st *= in[i];
  }
  std::vector<Index> src_stride(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    out[i] = in[order[i]];
    src_stride[i] = in_stride[order[i]];
  }
  const Index total = x.numel();
  std::vector<Index> map(static_cast<std::size_t>(total));
  std::vector<Index> coord(static_cast<std::size_t>(r), 0);
  Index off = 0;
  for (Index f = 0; f < total; ++f) {
    map[f] = off;
    for (int i = r - 1; i >= 0; --i) {
      ++coord[i];
      off += src_stride[i];
      if (coord[i] < out[i]) break;
      off -= src_stride[i] * coord[i];
      coord[i] = 0;
    }
  }
  const auto xd = x.data();
  std::vector<T> y(static_cast<std::size_t>(total));
  for (Index f = 0; f < total; ++f) y[f] = xd[map[f]];
  return Tensor<T>::from_op(out, std::move(y), "permute", {x}, [map = std::move(map)](NodeT<T>& self) {
    auto gx = input_grad(self, 0);
    for (std::size_t f = 0; f < map.size(); ++f) gx[map[f]] += self.grad[f];
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() < 2) {
    throw DimensionError("transpose: needs rank >= 2");
  }
  std::vector<int> order(static_cast<std::size_t>(x.rank()));
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[order.size() - 1], order[order.size() - 2]);
  return permute(x, order);
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
  if (xs.empty()) {
    throw DimensionError("concat: no inputs");
  }
  const int r = xs[0].rank();
  const int a = normalize_axis(axis, r, "concat");
  Shape out = xs[0].shape();
  out[a] = 0;
  for (const auto& t : xs) {
    if (t.rank() != r) {
      throw DimensionError("concat: rank mismatch");
    }
    for (int i = 0; i < r; ++i) {
      if (i != a && t.dim(i) != xs[0].dim(i)) {
        throw DimensionError("concat: axis " + std::to_string(i) + " mismatch " +
                             shape_str(xs[0].shape()) + " vs " + shape_str(t.shape()));
      }
    }
    out[a] += t.dim(a);
  }
  Index outer = 1, inner = 1;
  for (int i = 0; i < a; ++i) outer *= out[i];
  for (int i = a + 1; i < r; ++i) inner *= out[i];
  const Index out_block = out[a] * inner;
  std::vector<T> y(static_cast<std::size_t>(shape_numel(out)));
  std::vector<Index> offsets, blocks;
  Index off = 0;
  for (const auto& t : xs) {
    const Index blk = t.dim(a) * inner;
    offsets.push_back(off);
    blocks.push_back(blk);
    const T* src = t.data().data();
    for (Index o = 0; o < outer; ++o) {
      std::copy(src + o * blk, src + (o + 1) * blk, y.data() + o * out_block + off);
    }
    off += blk;
  }
  return Tensor<T>::from_op(out, std::move(y), "concat", xs,
                            [outer, out_block, offsets, blocks](NodeT<T>& self) {
                              for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                                auto gx = input_grad(self, k);
                                if (gx.empty()) continue;
                                const Index blk = blocks[k];
                                for (Index o = 0; o < outer; ++o)
                                  for (Index i = 0; i < blk; ++i)
                                    gx[o * blk + i] += self.grad[o * out_block + offsets[k] + i];
                              }
                            });
}

template <typename T>
Tensor<T> channel_shuffle(const Tensor<T>& x, Index groups) {
  if (x.rank() < 2) {
    throw DimensionError("channel_shuffle: needs a channel axis");
  }
  const Index n = x.dim(0), c = x.dim(1);
  if (groups < 1 || c % groups != 0) {
    throw ConfigError("channel_shuffle: " + std::to_string(c) + " channels not divisible by " +
                      std::to_string(groups) + " groups");
  }
  const Index plane = x.numel() / (n * c);
  const Index per = c / groups;
  std::vector<Index> src(static_cast<std::size_t>(c));
  for (Index k = 0; k < c; ++k) src[k] = (k % groups) * per + k / groups;
  const T* xd = x.data().data();
  std::vector<T> y(static_cast<std::size_t>(x.numel()));
  for (Index s = 0; s < n; ++s)
    for (Index k = 0; k < c; ++k)
      std::copy(xd + (s * c + src[k]) * plane, xd + (s * c + src[k] + 1) * plane,
                y.data() + (s * c + k) * plane);
  return Tensor<T>::from_op(x.shape(), std::move(y), "channel_shuffle", {x},
                            [n, c, plane, src = std::move(src)](NodeT<T>& self) {
                              auto gx = input_grad(self, 0);
                              for (Index s = 0; s < n; ++s)
                                for (Index k = 0; k < c; ++k)
                                  for (Index i = 0; i < plane; ++i)
                                    gx[(s * c + src[k]) * plane + i] += self.grad[(s * c + k) * plane + i];
                            });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Mode mode, std::mt19937_64* rng) {
  if (!(p >= 0.0) || p >= 1.0) {
    throw ConfigError("dropout: probability must lie in [0, 1), got " + std::to_string(p));
  }
  if (mode == Mode::eval || p == 0.0) {
    return x;
  }
  if (rng == nullptr) {
    throw UsageError("dropout: train mode needs a random generator");
  }
  const T scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(static_cast<std::size_t>(x.numel()));
  for (T& m : mask) m = uniform01(*rng) >= p ? scale : T{0};
  std::vector<T> y(mask.size());
  const auto xd = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xd[i] * mask[i];
  return Tensor<T>::from_op(x.shape(), std::move(y), "dropout", {x},
                            [mask = std::move(mask)](NodeT<T>& self) {
                              auto gx = input_grad(self, 0);
                              for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * mask[i];
                            });
}

#define FMBFF_INSTANTIATE(T)                                                                      \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                 \
                            const Conv2dOptions&);                                                \
  template Tensor<T> pool(const Tensor<T>&, PoolKind);                                            \
  template Tensor<T> bilinear_resize(const Tensor<T>&, Index, Index);                             \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);   \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,             \
                                const BatchNormBuffers<T>&, Mode, double, double);                \
  template Tensor<T> activation(const Tensor<T>&, Activation);                                    \
  template Tensor<T> softmax(const Tensor<T>&, int);                                              \
  template Tensor<T> elementwise(const Tensor<T>&, const Tensor<T>&, BinaryKind);                 \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                             \
  template Tensor<T> mul_scalar(const Tensor<T>&, T);                                             \
  template Tensor<T> pow_scalar(const Tensor<T>&, T);                                             \
  template Tensor<T> sum(const Tensor<T>&);                                                       \
  template Tensor<T> mean(const Tensor<T>&);                                                      \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> bmm(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                            \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<int>&);                          \
  template Tensor<T> transpose(const Tensor<T>&);                                                 \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                                  \
  template Tensor<T> channel_shuffle(const Tensor<T>&, Index);                                    \
  template Tensor<T> dropout(const Tensor<T>&, double, Mode, std::mt19937_64*);

FMBFF_INSTANTIATE(float)
FMBFF_INSTANTIATE(double)
#undef FMBFF_INSTANTIATE

}  // namespace fmbff
