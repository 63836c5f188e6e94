#include "fmbff/kernels.hpp"

#include <cblas.h>
#include <omp.h>

#include <algorithm>
#include <cstdlib>
#include <limits>
#include <string>
#include <vector>

#include "fmbff/parallel.hpp"

extern "C" void openblas_set_num_threads(int);

namespace fmbff {

int configure_threads_from_env() {
  // BLAS calls are issued from inside our own parallel regions.
  openblas_set_num_threads(1);
  if (const char* env = std::getenv("FMBFF_THREADS")) {
    int n = std::atoi(env);
    if (n >= 1) {
      omp_set_num_threads(n);
    }
  }
  return omp_get_max_threads();
}

void set_num_threads(int n) { omp_set_num_threads(std::max(1, n)); }
int max_threads() { return omp_get_max_threads(); }
int thread_index() { return omp_get_thread_num(); }

namespace kernels {

template <>
void gemm<float>(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k, float alpha,
                 const float* a, std::int64_t lda, const float* b, std::int64_t ldb, float beta,
                 float* c, std::int64_t ldc) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
              static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

template <>
void gemm<double>(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k, double alpha,
                  const double* a, std::int64_t lda, const double* b, std::int64_t ldb,
                  double beta, double* c, std::int64_t ldc) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
              static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

namespace {

// Unfolds one group of one sample: rows (ci, ky, kx), columns (oy, ox).
template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* col) {
  const std::int64_t oh = g.out_h(), ow = g.out_w();
  const std::int64_t cin = g.cin_per_group();
  for (std::int64_t c = 0; c < cin; ++c) {
    const T* plane = x + c * g.h * g.w;
    for (std::int64_t ky = 0; ky < g.kh; ++ky) {
      for (std::int64_t kx = 0; kx < g.kw; ++kx) {
        T* row = col + ((c * g.kh + ky) * g.kw + kx) * oh * ow;
        for (std::int64_t oy = 0; oy < oh; ++oy) {
          const std::int64_t iy = oy * g.stride_h - g.pad_h + ky;
          T* dst = row + oy * ow;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + ow, T{0});
            continue;
          }
          const T* src = plane + iy * g.w;
          for (std::int64_t ox = 0; ox < ow; ++ox) {
            const std::int64_t ix = ox * g.stride_w - g.pad_w + kx;
            dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T{0};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const ConvGeometry& g, const T* col, T* dx) {
  const std::int64_t oh = g.out_h(), ow = g.out_w();
  const std::int64_t cin = g.cin_per_group();
  for (std::int64_t c = 0; c < cin; ++c) {
    T* plane = dx + c * g.h * g.w;
    for (std::int64_t ky = 0; ky < g.kh; ++ky) {
      for (std::int64_t kx = 0; kx < g.kw; ++kx) {
        const T* row = col + ((c * g.kh + ky) * g.kw + kx) * oh * ow;
        for (std::int64_t oy = 0; oy < oh; ++oy) {
          const std::int64_t iy = oy * g.stride_h - g.pad_h + ky;
          if (iy < 0 || iy >= g.h) {
            continue;
          }
          T* dst = plane + iy * g.w;
          const T* src = row + oy * ow;
          for (std::int64_t ox = 0; ox < ow; ++ox) {
            const std::int64_t ix = ox * g.stride_w - g.pad_w + kx;
            if (ix >= 0 && ix < g.w) {
              dst[ix] += src[ox];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void depthwise_forward(const ConvGeometry& g, const T* x, const T* w, const T* b, T* y) {
  const std::int64_t oh = g.out_h(), ow = g.out_w();
  const std::int64_t planes = g.n * g.cin;
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < planes; ++p) {
    const std::int64_t c = p % g.cin;
    const T* src = x + p * g.h * g.w;
    const T* k = w + c * g.kh * g.kw;
    T* dst = y + p * oh * ow;
    const T bias = b ? b[c] : T{0};
    for (std::int64_t oy = 0; oy < oh; ++oy) {
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        T acc = bias;
        for (std::int64_t ky = 0; ky < g.kh; ++ky) {
          const std::int64_t iy = oy * g.stride_h - g.pad_h + ky;
          if (iy < 0 || iy >= g.h) continue;
          for (std::int64_t kx = 0; kx < g.kw; ++kx) {
            const std::int64_t ix = ox * g.stride_w - g.pad_w + kx;
            if (ix < 0 || ix >= g.w) continue;
            acc += src[iy * g.w + ix] * k[ky * g.kw + kx];
          }
        }
        dst[oy * ow + ox] = acc;
      }
    }
  }
}

template <typename T>
void depthwise_backward_input(const ConvGeometry& g, const T* dy, const T* w, T* dx) {
  const std::int64_t oh = g.out_h(), ow = g.out_w();
  const std::int64_t planes = g.n * g.cin;
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < planes; ++p) {
    const std::int64_t c = p % g.cin;
    const T* gy = dy + p * oh * ow;
    const T* k = w + c * g.kh * g.kw;
    T* gx = dx + p * g.h * g.w;
    for (std::int64_t oy = 0; oy < oh; ++oy) {
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        const T v = gy[oy * ow + ox];
        for (std::int64_t ky = 0; ky < g.kh; ++ky) {
          const std::int64_t iy = oy * g.stride_h - g.pad_h + ky;
          if (iy < 0 || iy >= g.h) continue;
          for (std::int64_t kx = 0; kx < g.kw; ++kx) {
            const std::int64_t ix = ox * g.stride_w - g.pad_w + kx;
            if (ix < 0 || ix >= g.w) continue;
            gx[iy * g.w + ix] += v * k[ky * g.kw + kx];
          }
        }
      }
    }
  }
}

template <typename T>
void depthwise_backward_weight(const ConvGeometry& g, const T* dy, const T* x, T* dw, T* db) {
  const std::int64_t oh = g.out_h(), ow = g.out_w();
  // Parallel over channels so each thread owns its kernel slice; batch is the
  // inner loop, giving a fixed summation order.
#pragma omp parallel for schedule(static)
  for (std::int64_t c = 0; c < g.cin; ++c) {
    T* k = dw + c * g.kh * g.kw;
    for (std::int64_t n = 0; n < g.n; ++n) {
      const std::int64_t p = n * g.cin + c;
      const T* gy = dy + p * oh * ow;
      const T* src = x + p * g.h * g.w;
      for (std::int64_t oy = 0; oy < oh; ++oy) {
        for (std::int64_t ox = 0; ox < ow; ++ox) {
          const T v = gy[oy * ow + ox];
          if (db) db[c] += v;
          for (std::int64_t ky = 0; ky < g.kh; ++ky) {
            const std::int64_t iy = oy * g.stride_h - g.pad_h + ky;
            if (iy < 0 || iy >= g.h) continue;
            for (std::int64_t kx = 0; kx < g.kw; ++kx) {
              const std::int64_t ix = ox * g.stride_w - g.pad_w + kx;
              if (ix < 0 || ix >= g.w) continue;
              k[ky * g.kw + kx] += v * src[iy * g.w + ix];
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, const T* b, T* y) {
  if (g.is_depthwise() && g.groups > 1) {
    depthwise_forward(g, x, w, b, y);
    return;
  }
  const std::int64_t oh = g.out_h(), ow = g.out_w(), hw = oh * ow;
  const std::int64_t cin_g = g.cin_per_group(), cout_g = g.cout_per_group();
  const std::int64_t kdim = cin_g * g.kh * g.kw;
  const bool pointwise = g.is_pointwise();
#pragma omp parallel
  {
    std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(kdim * hw));
#pragma omp for schedule(static)
    for (std::int64_t n = 0; n < g.n; ++n) {
      for (std::int64_t grp = 0; grp < g.groups; ++grp) {
        const T* xg = x + (n * g.cin + grp * cin_g) * g.h * g.w;
        T* yg = y + (n * g.cout + grp * cout_g) * hw;
        const T* wg = w + grp * cout_g * kdim;
        const T* src = xg;
        if (!pointwise) {
          im2col(g, xg, col.data());
          src = col.data();
        }
        gemm<T>(false, false, cout_g, hw, kdim, T{1}, wg, kdim, src, hw, T{0}, yg, hw);
        if (b) {
          for (std::int64_t co = 0; co < cout_g; ++co) {
            const T bias = b[grp * cout_g + co];
            T* row = yg + co * hw;
            for (std::int64_t i = 0; i < hw; ++i) row[i] += bias;
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_input(const ConvGeometry& g, const T* dy, const T* w, T* dx) {
  if (g.is_depthwise() && g.groups > 1) {
    depthwise_backward_input(g, dy, w, dx);
    return;
  }
  const std::int64_t oh = g.out_h(), ow = g.out_w(), hw = oh * ow;
  const std::int64_t cin_g = g.cin_per_group(), cout_g = g.cout_per_group();
  const std::int64_t kdim = cin_g * g.kh * g.kw;
  const bool pointwise = g.is_pointwise();
#pragma omp parallel
  {
    std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(kdim * hw));
#pragma omp for schedule(static)
    for (std::int64_t n = 0; n < g.n; ++n) {
      for (std::int64_t grp = 0; grp < g.groups; ++grp) {
        T* dxg = dx + (n * g.cin + grp * cin_g) * g.h * g.w;
        const T* dyg = dy + (n * g.cout + grp * cout_g) * hw;
        const T* wg = w + grp * cout_g * kdim;
        if (pointwise) {
          gemm<T>(true, false, kdim, hw, cout_g, T{1}, wg, kdim, dyg, hw, T{1}, dxg, hw);
        } else {
          gemm<T>(true, false, kdim, hw, cout_g, T{1}, wg, kdim, dyg, hw, T{0}, col.data(), hw);
          col2im_add(g, col.data(), dxg);
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, const T* dy, const T* x, T* dw, T* db) {
  if (g.is_depthwise() && g.groups > 1) {
    depthwise_backward_weight(g, dy, x, dw, db);
    return;
  }
  const std::int64_t oh = g.out_h(), ow = g.out_w(), hw = oh * ow;
  const std::int64_t cin_g = g.cin_per_group(), cout_g = g.cout_per_group();
  const std::int64_t kdim = cin_g * g.kh * g.kw;
  const std::int64_t wsize = g.cout * kdim;
  const bool pointwise = g.is_pointwise();
  const int threads = omp_get_max_threads();
  // Per-thread partial sums reduced in thread order for run-to-run stability.
  std::vector<std::vector<T>> partial(static_cast<std::size_t>(threads));
#pragma omp parallel num_threads(threads)
  {
    const int tid = omp_get_thread_num();
    std::vector<T>& acc = partial[static_cast<std::size_t>(tid)];
    acc.assign(static_cast<std::size_t>(wsize), T{0});
    std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(kdim * hw));
#pragma omp for schedule(static)
    for (std::int64_t n = 0; n < g.n; ++n) {
      for (std::int64_t grp = 0; grp < g.groups; ++grp) {
        const T* xg = x + (n * g.cin + grp * cin_g) * g.h * g.w;
        const T* dyg = dy + (n * g.cout + grp * cout_g) * hw;
        const T* src = xg;
        if (!pointwise) {
          im2col(g, xg, col.data());
          src = col.data();
        }
        gemm<T>(false, true, cout_g, kdim, hw, T{1}, dyg, hw, src, hw, T{1},
                acc.data() + grp * cout_g * kdim, kdim);
      }
    }
  }
  for (const auto& acc : partial) {
    if (acc.empty()) continue;
    for (std::int64_t i = 0; i < wsize; ++i) dw[i] += acc[static_cast<std::size_t>(i)];
  }
  if (db) {
    for (std::int64_t n = 0; n < g.n; ++n) {
      for (std::int64_t co = 0; co < g.cout; ++co) {
        const T* row = dy + (n * g.cout + co) * hw;
        T s{0};
        for (std::int64_t i = 0; i < hw; ++i) s += row[i];
        db[co] += s;
      }
    }
  }
}

template <typename T>
void max_pool2x2_forward(std::int64_t planes, std::int64_t h, std::int64_t w, const T* x, T* y,
                         std::int64_t* argmax) {
  const std::int64_t oh = (h + 1) / 2, ow = (w + 1) / 2;
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < planes; ++p) {
    const T* src = x + p * h * w;
    for (std::int64_t oy = 0; oy < oh; ++oy) {
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        T best = std::numeric_limits<T>::lowest();
        std::int64_t best_idx = -1;
        for (std::int64_t dy = 0; dy < 2; ++dy) {
          for (std::int64_t dx = 0; dx < 2; ++dx) {
            const std::int64_t iy = 2 * oy + dy, ix = 2 * ox + dx;
            if (iy >= h || ix >= w) continue;
            const T v = src[iy * w + ix];
            if (best_idx < 0 || v > best) {
              best = v;
              best_idx = iy * w + ix;
            }
          }
        }
        const std::int64_t o = p * oh * ow + oy * ow + ox;
        y[o] = best;
        argmax[o] = p * h * w + best_idx;
      }
    }
  }
}

namespace {

struct Tap {
  std::int64_t i0, i1;
  double f;
};

std::vector<Tap> taps(std::int64_t in, std::int64_t out) {
  std::vector<Tap> t(static_cast<std::size_t>(out));
  for (std::int64_t o = 0; o < out; ++o) {
    const double pos = out > 1 ? static_cast<double>(o) * static_cast<double>(in - 1) /
                                     static_cast<double>(out - 1)
                               : 0.0;
    std::int64_t i0 = static_cast<std::int64_t>(pos);
    i0 = std::min(i0, in - 1);
    const std::int64_t i1 = std::min(i0 + 1, in - 1);
    t[static_cast<std::size_t>(o)] = {i0, i1, pos - static_cast<double>(i0)};
  }
  return t;
}

}  // namespace

template <typename T>
void bilinear_forward(std::int64_t planes, std::int64_t h, std::int64_t w, std::int64_t oh,
                      std::int64_t ow, const T* x, T* y) {
  const auto ty = taps(h, oh);
  const auto tx = taps(w, ow);
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < planes; ++p) {
    const T* src = x + p * h * w;
    T* dst = y + p * oh * ow;
    for (std::int64_t oy = 0; oy < oh; ++oy) {
      const Tap& a = ty[static_cast<std::size_t>(oy)];
      const T fy = static_cast<T>(a.f);
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        const Tap& b = tx[static_cast<std::size_t>(ox)];
        const T fx = static_cast<T>(b.f);
        const T top = src[a.i0 * w + b.i0] * (T{1} - fx) + src[a.i0 * w + b.i1] * fx;
        const T bot = src[a.i1 * w + b.i0] * (T{1} - fx) + src[a.i1 * w + b.i1] * fx;
        dst[oy * ow + ox] = top * (T{1} - fy) + bot * fy;
      }
    }
  }
}

template <typename T>
void bilinear_backward(std::int64_t planes, std::int64_t h, std::int64_t w, std::int64_t oh,
                       std::int64_t ow, const T* dy, T* dx) {
  const auto ty = taps(h, oh);
  const auto tx = taps(w, ow);
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < planes; ++p) {
    const T* src = dy + p * oh * ow;
    T* dst = dx + p * h * w;
    for (std::int64_t oy = 0; oy < oh; ++oy) {
      const Tap& a = ty[static_cast<std::size_t>(oy)];
      const T fy = static_cast<T>(a.f);
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        const Tap& b = tx[static_cast<std::size_t>(ox)];
        const T fx = static_cast<T>(b.f);
        const T g = src[oy * ow + ox];
        dst[a.i0 * w + b.i0] += g * (T{1} - fy) * (T{1} - fx);
        dst[a.i0 * w + b.i1] += g * (T{1} - fy) * fx;
        dst[a.i1 * w + b.i0] += g * fy * (T{1} - fx);
        dst[a.i1 * w + b.i1] += g * fy * fx;
      }
    }
  }
}

#define FMBFF_INSTANTIATE(T)                                                                  \
  template void conv2d_forward<T>(const ConvGeometry&, const T*, const T*, const T*, T*);    \
  template void conv2d_backward_input<T>(const ConvGeometry&, const T*, const T*, T*);       \
  template void conv2d_backward_weight<T>(const ConvGeometry&, const T*, const T*, T*, T*);  \
  template void max_pool2x2_forward<T>(std::int64_t, std::int64_t, std::int64_t, const T*,  \
                                       T*, std::int64_t*);                                  \
  template void bilinear_forward<T>(std::int64_t, std::int64_t, std::int64_t, std::int64_t, \
                                    std::int64_t, const T*, T*);                            \
  template void bilinear_backward<T>(std::int64_t, std::int64_t, std::int64_t, std::int64_t, \
                                     std::int64_t, const T*, T*);

FMBFF_INSTANTIATE(float)
FMBFF_INSTANTIATE(double)
#undef FMBFF_INSTANTIATE

}  // namespace kernels

}  // namespace fmbff
