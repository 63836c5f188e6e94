#pragma once

// Raw NCHW compute kernels on contiguous buffers.
//
// `kernels::` holds the production (OpenMP-parallel, BLAS-backed) versions used
// by the differentiable ops. `reference::` holds straightforward serial loops
// kept for cross-checking in tests and for the benchmark comparison. Both
// families have identical signatures and accumulate (+=) into gradient outputs.

#include <cstdint>

namespace fmbff {

struct ConvGeometry {
  std::int64_t n = 1, cin = 1, h = 1, w = 1;
  std::int64_t cout = 1, kh = 1, kw = 1;
  std::int64_t stride_h = 1, stride_w = 1;
  std::int64_t pad_h = 0, pad_w = 0;
  std::int64_t groups = 1;

  std::int64_t out_h() const { return (h + 2 * pad_h - kh) / stride_h + 1; }
  std::int64_t out_w() const { return (w + 2 * pad_w - kw) / stride_w + 1; }
  std::int64_t cin_per_group() const { return cin / groups; }
  std::int64_t cout_per_group() const { return cout / groups; }
  bool is_pointwise() const {
    return kh == 1 && kw == 1 && stride_h == 1 && stride_w == 1 && pad_h == 0 && pad_w == 0;
  }
  bool is_depthwise() const { return groups == cin && groups == cout; }
};

namespace kernels {

// y = conv(x, w) + b. `b` may be null.
template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, const T* b, T* y);
// dx += conv^T(dy, w)
template <typename T>
void conv2d_backward_input(const ConvGeometry& g, const T* dy, const T* w, T* dx);
// dw += corr(x, dy); db += sum(dy). `db` may be null.
template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, const T* dy, const T* x, T* dw, T* db);

// C[M,N] = alpha * op(A) op(B) + beta * C, row-major.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
          const T* a, std::int64_t lda, const T* b, std::int64_t ldb, T beta, T* c,
          std::int64_t ldc);

// 2x2 stride-2 max pool over `planes` HxW planes; odd extents padded with the
// lowest representable value. `argmax` receives the flat input index per output.
template <typename T>
void max_pool2x2_forward(std::int64_t planes, std::int64_t h, std::int64_t w, const T* x, T* y,
                         std::int64_t* argmax);

// Align-corners bilinear resize of `planes` planes.
template <typename T>
void bilinear_forward(std::int64_t planes, std::int64_t h, std::int64_t w, std::int64_t oh,
                      std::int64_t ow, const T* x, T* y);
template <typename T>
void bilinear_backward(std::int64_t planes, std::int64_t h, std::int64_t w, std::int64_t oh,
                       std::int64_t ow, const T* dy, T* dx);

}  // namespace kernels

namespace reference {

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, const T* b, T* y);
template <typename T>
void conv2d_backward_input(const ConvGeometry& g, const T* dy, const T* w, T* dx);
template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, const T* dy, const T* x, T* dw, T* db);

template <typename T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
          const T* a, std::int64_t lda, const T* b, std::int64_t ldb, T beta, T* c,
          std::int64_t ldc);

template <typename T>
void max_pool2x2_forward(std::int64_t planes, std::int64_t h, std::int64_t w, const T* x, T* y,
                         std::int64_t* argmax);

template <typename T>
void bilinear_forward(std::int64_t planes, std::int64_t h, std::int64_t w, std::int64_t oh,
                      std::int64_t ow, const T* x, T* y);
template <typename T>
void bilinear_backward(std::int64_t planes, std::int64_t h, std::int64_t w, std::int64_t oh,
                       std::int64_t ow, const T* dy, T* dx);

}  // namespace reference

}  // namespace fmbff
