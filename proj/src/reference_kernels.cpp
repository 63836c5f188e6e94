// Serial textbook versions of the kernels in kernels.cpp.

#include <algorithm>
#include <limits>

#include "fmbff/kernels.hpp"

namespace fmbff::reference {

namespace {

template <typename T>
T padded(const ConvGeometry& g, const T* x, std::int64_t n, std::int64_t c, std::int64_t y,
         std::int64_t xx) {
  if (y < 0 || y >= g.h || xx < 0 || xx >= g.w) return T{0};
  return x[((n * g.cin + c) * g.h + y) * g.w + xx];
}

}  // namespace

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, const T* b, T* y) {
  const std::int64_t oh = g.out_h(), ow = g.out_w();
  const std::int64_t cin_g = g.cin_per_group(), cout_g = g.cout_per_group();
  for (std::int64_t n = 0; n < g.n; ++n) {
    for (std::int64_t co = 0; co < g.cout; ++co) {
      const std::int64_t grp = co / cout_g;
      for (std::int64_t oy = 0; oy < oh; ++oy) {
        for (std::int64_t ox = 0; ox < ow; ++ox) {
          T acc = b ? b[co] : T{0};
          for (std::int64_t ci = 0; ci < cin_g; ++ci) {
            for (std::int64_t ky = 0; ky < g.kh; ++ky) {
              for (std::int64_t kx = 0; kx < g.kw; ++kx) {
                const T v = padded(g, x, n, grp * cin_g + ci, oy * g.stride_h - g.pad_h + ky,
                                   ox * g.stride_w - g.pad_w + kx);
                acc += v * w[((co * cin_g + ci) * g.kh + ky) * g.kw + kx];
              }
            }
          }
          y[((n * g.cout + co) * oh + oy) * ow + ox] = acc;
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_input(const ConvGeometry& g, const T* dy, const T* w, T* dx) {
  const std::int64_t oh = g.out_h(), ow = g.out_w();
  const std::int64_t cin_g = g.cin_per_group(), cout_g = g.cout_per_group();
  for (std::int64_t n = 0; n < g.n; ++n) {
    for (std::int64_t co = 0; co < g.cout; ++co) {
      const std::int64_t grp = co / cout_g;
      for (std::int64_t oy = 0; oy < oh; ++oy) {
        for (std::int64_t ox = 0; ox < ow; ++ox) {
          const T gv = dy[((n * g.cout + co) * oh + oy) * ow + ox];
          for (std::int64_t ci = 0; ci < cin_g; ++ci) {
            for (std::int64_t ky = 0; ky < g.kh; ++ky) {
              const std::int64_t iy = oy * g.stride_h - g.pad_h + ky;
              if (iy < 0 || iy >= g.h) continue;
              for (std::int64_t kx = 0; kx < g.kw; ++kx) {
                const std::int64_t ix = ox * g.stride_w - g.pad_w + kx;
                if (ix < 0 || ix >= g.w) continue;
                dx[((n * g.cin + grp * cin_g + ci) * g.h + iy) * g.w + ix] +=
                    gv * w[((co * cin_g + ci) * g.kh + ky) * g.kw + kx];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_weight(const ConvGeometry& g, const T* dy, const T* x, T* dw, T* db) {
  const std::int64_t oh = g.out_h(), ow = g.out_w();
  const std::int64_t cin_g = g.cin_per_group(), cout_g = g.cout_per_group();
  for (std::int64_t n = 0; n < g.n; ++n) {
    for (std::int64_t co = 0; co < g.cout; ++co) {
      const std::int64_t grp = co / cout_g;
      for (std::int64_t oy = 0; oy < oh; ++oy) {
        for (std::int64_t ox = 0; ox < ow; ++ox) {
          const T gv = dy[((n * g.cout + co) * oh + oy) * ow + ox];
          if (db) db[co] += gv;
          for (std::int64_t ci = 0; ci < cin_g; ++ci) {
            for (std::int64_t ky = 0; ky < g.kh; ++ky) {
              for (std::int64_t kx = 0; kx < g.kw; ++kx) {
                const T v = padded(g, x, n, grp * cin_g + ci, oy * g.stride_h - g.pad_h + ky,
                                   ox * g.stride_w - g.pad_w + kx);
                dw[((co * cin_g + ci) * g.kh + ky) * g.kw + kx] += gv * v;
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void gemm(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k, T alpha, const T* a,
          std::int64_t lda, const T* b, std::int64_t ldb, T beta, T* c, std::int64_t ldc) {
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      T acc{0};
      for (std::int64_t p = 0; p < k; ++p) {
        const T av = ta ? a[p * lda + i] : a[i * lda + p];
        const T bv = tb ? b[j * ldb + p] : b[p * ldb + j];
        acc += av * bv;
      }
      T& out = c[i * ldc + j];
      out = alpha * acc + (beta == T{0} ? T{0} : beta * out);
    }
  }
}

template <typename T>
void max_pool2x2_forward(std::int64_t planes, std::int64_t h, std::int64_t w, const T* x, T* y,
                         std::int64_t* argmax) {
  const std::int64_t oh = (h + 1) / 2, ow = (w + 1) / 2;
  for (std::int64_t p = 0; p < planes; ++p) {
    for (std::int64_t oy = 0; oy < oh; ++oy) {
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        T best = std::numeric_limits<T>::lowest();
        std::int64_t idx = -1;
        for (std::int64_t iy = 2 * oy; iy < std::min(2 * oy + 2, h); ++iy) {
          for (std::int64_t ix = 2 * ox; ix < std::min(2 * ox + 2, w); ++ix) {
            const std::int64_t flat = (p * h + iy) * w + ix;
            if (idx < 0 || x[flat] > best) {
              best = x[flat];
              idx = flat;
            }
          }
        }
        y[(p * oh + oy) * ow + ox] = best;
        argmax[(p * oh + oy) * ow + ox] = idx;
      }
    }
  }
}

namespace {

void source(std::int64_t o, std::int64_t in, std::int64_t out, std::int64_t& i0, std::int64_t& i1,
            double& f) {
  const double pos =
      out > 1 ? static_cast<double>(o) * static_cast<double>(in - 1) / static_cast<double>(out - 1)
              : 0.0;
  i0 = std::min(static_cast<std::int64_t>(pos), in - 1);
  i1 = std::min(i0 + 1, in - 1);
  f = pos - static_cast<double>(i0);
}

}  // namespace

template <typename T>
void bilinear_forward(std::int64_t planes, std::int64_t h, std::int64_t w, std::int64_t oh,
                      std::int64_t ow, const T* x, T* y) {
  for (std::int64_t p = 0; p < planes; ++p) {
    for (std::int64_t oy = 0; oy < oh; ++oy) {
      std::int64_t y0, y1;
      double fy;
      source(oy, h, oh, y0, y1, fy);
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        std::int64_t x0, x1;
        double fx;
        source(ox, w, ow, x0, x1, fx);
        const T* s = x + p * h * w;
        const T a = static_cast<T>(fx), c = static_cast<T>(fy);
        const T top = s[y0 * w + x0] * (T{1} - a) + s[y0 * w + x1] * a;
        const T bot = s[y1 * w + x0] * (T{1} - a) + s[y1 * w + x1] * a;
        y[(p * oh + oy) * ow + ox] = top * (T{1} - c) + bot * c;
      }
    }
  }
}

template <typename T>
void bilinear_backward(std::int64_t planes, std::int64_t h, std::int64_t w, std::int64_t oh,
                       std::int64_t ow, const T* dy, T* dx) {
  for (std::int64_t p = 0; p < planes; ++p) {
    for (std::int64_t oy = 0; oy < oh; ++oy) {
      std::int64_t y0, y1;
      double fy;
      source(oy, h, oh, y0, y1, fy);
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        std::int64_t x0, x1;
        double fx;
        source(ox, w, ow, x0, x1, fx);
        const T g = dy[(p * oh + oy) * ow + ox];
        const T a = static_cast<T>(fx), c = static_cast<T>(fy);
        T* d = dx + p * h * w;
        d[y0 * w + x0] += g * (T{1} - c) * (T{1} - a);
        d[y0 * w + x1] += g * (T{1} - c) * a;
        d[y1 * w + x0] += g * c * (T{1} - a);
        d[y1 * w + x1] += g * c * a;
      }
    }
  }
}

#define FMBFF_INSTANTIATE(T)                                                                  \
  template void conv2d_forward<T>(const ConvGeometry&, const T*, const T*, const T*, T*);    \
  template void conv2d_backward_input<T>(const ConvGeometry&, const T*, const T*, T*);       \
  template void conv2d_backward_weight<T>(const ConvGeometry&, const T*, const T*, T*, T*);  \
  template void gemm<T>(bool, bool, std::int64_t, std::int64_t, std::int64_t, T, const T*,   \
                        std::int64_t, const T*, std::int64_t, T, T*, std::int64_t);          \
  template void max_pool2x2_forward<T>(std::int64_t, std::int64_t, std::int64_t, const T*,  \
                                       T*, std::int64_t*);                                  \
  template void bilinear_forward<T>(std::int64_t, std::int64_t, std::int64_t, std::int64_t, \
                                    std::int64_t, const T*, T*);                            \
  template void bilinear_backward<T>(std::int64_t, std::int64_t, std::int64_t, std::int64_t, \
                                     std::int64_t, const T*, T*);

FMBFF_INSTANTIATE(float)
FMBFF_INSTANTIATE(double)
#undef FMBFF_INSTANTIATE

}  // namespace fmbff::reference
