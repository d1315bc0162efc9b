#include "tsa/kernels.hpp"

#include <algorithm>
#include <cstring>
#include <stdexcept>
#include <vector>

namespace tsa::kernels {

int conv_out_extent(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

ConvGeom ConvGeom::make(int n, int cin, int h, int w, int cout, int kh, int kw,
                        int stride, int pad) {
  ConvGeom g{n, cin, h, w, cout, kh, kw, stride, pad, 0, 0};
  g.oh = conv_out_extent(h, kh, stride, pad);
  g.ow = conv_out_extent(w, kw, stride, pad);
  return g;
}

void gemm_nn(int m, int n, int k, const real* A, const real* B, real* C) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) {
    real* __restrict ci = C + static_cast<size_t>(i) * n;
    std::memset(ci, 0, sizeof(real) * n);
    const real* ai = A + static_cast<size_t>(i) * k;
    for (int kk = 0; kk < k; ++kk) {
      const real a = ai[kk];
      if (a == real(0)) continue;
      const real* __restrict bk = B + static_cast<size_t>(kk) * n;
#pragma omp simd
      for (int j = 0; j < n; ++j) ci[j] += a * bk[j];
    }
  }
}

void gemm_nn_acc(int m, int n, int k, const real* A, const real* B, real* C) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) {
    real* __restrict ci = C + static_cast<size_t>(i) * n;
    const real* ai = A + static_cast<size_t>(i) * k;
    for (int kk = 0; kk < k; ++kk) {
      const real a = ai[kk];
      if (a == real(0)) continue;
      const real* __restrict bk = B + static_cast<size_t>(kk) * n;
#pragma omp simd
      for (int j = 0; j < n; ++j) ci[j] += a * bk[j];
    }
  }
}

void gemm_nt_acc(int m, int n, int k, const real* A, const real* B, real* C) {
  constexpr int kb = 512;
  for (int k0 = 0; k0 < k; k0 += kb) {
    const int k1 = std::min(k, k0 + kb);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
      const real* ai = A + static_cast<size_t>(i) * k;
      real* ci = C + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) {
        const real* bj = B + static_cast<size_t>(j) * k;
        real acc = 0;
#pragma omp simd reduction(+ : acc)
        for (int kk = k0; kk < k1; ++kk) acc += ai[kk] * bj[kk];
        ci[j] += acc;
      }
    }
  }
}

void transpose(int m, int n, const real* A, real* AT) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      AT[static_cast<size_t>(j) * m + i] = A[static_cast<size_t>(i) * n + j];
}

void im2col(const real* x, int cin, int h, int w, int kh, int kw, int stride,
            int pad, int oh, int ow, int n_images, int img_index, real* col) {
  const size_t row_stride = static_cast<size_t>(n_images) * oh * ow;
  const size_t col_off = static_cast<size_t>(img_index) * oh * ow;
  for (int c = 0; c < cin; ++c) {
    const real* xc = x + static_cast<size_t>(c) * h * w;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const int r = (c * kh + ki) * kw + kj;
        real* dst = col + static_cast<size_t>(r) * row_stride + col_off;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ki;
          real* drow = dst + static_cast<size_t>(oy) * ow;
          if (iy < 0 || iy >= h) {
            std::memset(drow, 0, sizeof(real) * ow);
            continue;
          }
          const real* xrow = xc + static_cast<size_t>(iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kj;
            drow[ox] = (ix >= 0 && ix < w) ? xrow[ix] : real(0);
          }
        }
      }
    }
  }
}

void col2im_acc(const real* col, int cin, int h, int w, int kh, int kw,
                int stride, int pad, int oh, int ow, int n_images,
                int img_index, real* gx) {
  const size_t row_stride = static_cast<size_t>(n_images) * oh * ow;
  const size_t col_off = static_cast<size_t>(img_index) * oh * ow;
  for (int c = 0; c < cin; ++c) {
    real* gc = gx + static_cast<size_t>(c) * h * w;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const int r = (c * kh + ki) * kw + kj;
        const real* src = col + static_cast<size_t>(r) * row_stride + col_off;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= h) continue;
          const real* srow = src + static_cast<size_t>(oy) * ow;
          real* grow = gc + static_cast<size_t>(iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kj;
            if (ix >= 0 && ix < w) grow[ix] += srow[ox];
          }
        }
      }
    }
  }
}

static bool pointwise(const ConvGeom& g) {
  return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;
}

void conv2d_forward(const ConvGeom& g, const real* x, const real* k, real* y) {
  const size_t ohow = static_cast<size_t>(g.oh) * g.ow;
  if (pointwise(g)) {
    const size_t hw = static_cast<size_t>(g.h) * g.w;
#pragma omp parallel for schedule(static)
    for (int n = 0; n < g.n; ++n)
      gemm_nn(g.cout, static_cast<int>(hw), g.cin, k, x + n * g.cin * hw,
              y + n * g.cout * hw);
    return;
  }
  const int krows = g.cin * g.kh * g.kw;
  const size_t ncols = static_cast<size_t>(g.n) * ohow;
  static thread_local std::vector<real> col, ymat;
  col.resize(static_cast<size_t>(krows) * ncols);
  ymat.resize(static_cast<size_t>(g.cout) * ncols);
#pragma omp parallel for schedule(static)
  for (int n = 0; n < g.n; ++n)
    im2col(x + static_cast<size_t>(n) * g.cin * g.h * g.w, g.cin, g.h, g.w,
           g.kh, g.kw, g.stride, g.pad, g.oh, g.ow, g.n, n, col.data());
  gemm_nn(g.cout, static_cast<int>(ncols), krows, k, col.data(), ymat.data());
#pragma omp parallel for schedule(static)
  for (int n = 0; n < g.n; ++n)
    for (int o = 0; o < g.cout; ++o)
      std::memcpy(y + (static_cast<size_t>(n) * g.cout + o) * ohow,
                  ymat.data() + static_cast<size_t>(o) * ncols + n * ohow,
                  sizeof(real) * ohow);
}

// Gathers NCHW gradient into a (cout x n*oh*ow) matrix matching the batched
// patch-matrix column layout.
static void gather_grad(const ConvGeom& g, const real* gy, real* gymat) {
  const size_t ohow = static_cast<size_t>(g.oh) * g.ow;
  const size_t ncols = static_cast<size_t>(g.n) * ohow;
#pragma omp parallel for schedule(static)
  for (int o = 0; o < g.cout; ++o)
    for (int n = 0; n < g.n; ++n)
      std::memcpy(gymat + static_cast<size_t>(o) * ncols + n * ohow,
                  gy + (static_cast<size_t>(n) * g.cout + o) * ohow,
                  sizeof(real) * ohow);
}

void conv2d_backward_input(const ConvGeom& g, const real* gy, const real* k,
                           real* gx) {
  if (pointwise(g)) {
    const size_t hw = static_cast<size_t>(g.h) * g.w;
    static thread_local std::vector<real> kt;
    kt.resize(static_cast<size_t>(g.cin) * g.cout);
    transpose(g.cout, g.cin, k, kt.data());
#pragma omp parallel for schedule(static)
    for (int n = 0; n < g.n; ++n)
      gemm_nn_acc(g.cin, static_cast<int>(hw), g.cout, kt.data(),
                  gy + n * g.cout * hw, gx + n * g.cin * hw);
    return;
  }
  const int krows = g.cin * g.kh * g.kw;
  const size_t ohow = static_cast<size_t>(g.oh) * g.ow;
  const size_t ncols = static_cast<size_t>(g.n) * ohow;
  static thread_local std::vector<real> kt, gymat, gcol;
  kt.resize(static_cast<size_t>(krows) * g.cout);
  gymat.resize(static_cast<size_t>(g.cout) * ncols);
  gcol.resize(static_cast<size_t>(krows) * ncols);
  transpose(g.cout, krows, k, kt.data());
  gather_grad(g, gy, gymat.data());
  gemm_nn(krows, static_cast<int>(ncols), g.cout, kt.data(), gymat.data(),
          gcol.data());
#pragma omp parallel for schedule(static)
  for (int n = 0; n < g.n; ++n)
    col2im_acc(gcol.data(), g.cin, g.h, g.w, g.kh, g.kw, g.stride, g.pad, g.oh,
               g.ow, g.n, n, gx + static_cast<size_t>(n) * g.cin * g.h * g.w);
}

void conv2d_backward_kernel(const ConvGeom& g, const real* gy, const real* x,
                            real* gk) {
  if (pointwise(g)) {
    const size_t hw = static_cast<size_t>(g.h) * g.w;
    for (int n = 0; n < g.n; ++n)
      gemm_nt_acc(g.cout, g.cin, static_cast<int>(hw), gy + n * g.cout * hw,
                  x + n * g.cin * hw, gk);
    return;
  }
  const int krows = g.cin * g.kh * g.kw;
  const size_t ohow = static_cast<size_t>(g.oh) * g.ow;
  const size_t ncols = static_cast<size_t>(g.n) * ohow;
  static thread_local std::vector<real> col, gymat;
  col.resize(static_cast<size_t>(krows) * ncols);
  gymat.resize(static_cast<size_t>(g.cout) * ncols);
#pragma omp parallel for schedule(static)
  for (int n = 0; n < g.n; ++n)
    im2col(x + static_cast<size_t>(n) * g.cin * g.h * g.w, g.cin, g.h, g.w,
           g.kh, g.kw, g.stride, g.pad, g.oh, g.ow, g.n, n, col.data());
  gather_grad(g, gy, gymat.data());
  gemm_nt_acc(g.cout, krows, static_cast<int>(ncols), gymat.data(), col.data(),
              gk);
}

namespace ref {

void gemm_nn(int m, int n, int k, const real* A, const real* B, real* C) {
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      real acc = 0;
      for (int kk = 0; kk < k; ++kk)
        acc += A[static_cast<size_t>(i) * k + kk] *
               B[static_cast<size_t>(kk) * n + j];
      C[static_cast<size_t>(i) * n + j] = acc;
    }
}

void gemm_nt_acc(int m, int n, int k, const real* A, const real* B, real* C) {
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      real acc = 0;
      for (int kk = 0; kk < k; ++kk)
        acc += A[static_cast<size_t>(i) * k + kk] *
               B[static_cast<size_t>(j) * k + kk];
      C[static_cast<size_t>(i) * n + j] += acc;
    }
}

void conv2d_forward(const ConvGeom& g, const real* x, const real* k, real* y) {
  const size_t hw = static_cast<size_t>(g.h) * g.w;
  const size_t ohow = static_cast<size_t>(g.oh) * g.ow;
  for (int n = 0; n < g.n; ++n)
    for (int o = 0; o < g.cout; ++o)
      for (int oy = 0; oy < g.oh; ++oy)
        for (int ox = 0; ox < g.ow; ++ox) {
          real acc = 0;
          for (int c = 0; c < g.cin; ++c)
            for (int ki = 0; ki < g.kh; ++ki)
              for (int kj = 0; kj < g.kw; ++kj) {
                const int iy = oy * g.stride - g.pad + ki;
                const int ix = ox * g.stride - g.pad + kj;
                if (iy < 0 || iy >= g.h || ix < 0 || ix >= g.w) continue;
                acc += x[(static_cast<size_t>(n) * g.cin + c) * hw + iy * g.w + ix] *
                       k[((static_cast<size_t>(o) * g.cin + c) * g.kh + ki) * g.kw + kj];
              }
          y[(static_cast<size_t>(n) * g.cout + o) * ohow + oy * g.ow + ox] = acc;
        }
}

void conv2d_backward_input(const ConvGeom& g, const real* gy, const real* k,
                           real* gx) {
  const size_t hw = static_cast<size_t>(g.h) * g.w;
  const size_t ohow = static_cast<size_t>(g.oh) * g.ow;
  for (int n = 0; n < g.n; ++n)
    for (int o = 0; o < g.cout; ++o)
      for (int oy = 0; oy < g.oh; ++oy)
        for (int ox = 0; ox < g.ow; ++ox) {
          const real gv = gy[(static_cast<size_t>(n) * g.cout + o) * ohow + oy * g.ow + ox];
          for (int c = 0; c < g.cin; ++c)
            for (int ki = 0; ki < g.kh; ++ki)
              for (int kj = 0; kj < g.kw; ++kj) {
                const int iy = oy * g.stride - g.pad + ki;
                const int ix = ox * g.stride - g.pad + kj;
                if (iy < 0 || iy >= g.h || ix < 0 || ix >= g.w) continue;
                gx[(static_cast<size_t>(n) * g.cin + c) * hw + iy * g.w + ix] +=
                    gv * k[((static_cast<size_t>(o) * g.cin + c) * g.kh + ki) * g.kw + kj];
              }
        }
}

void conv2d_backward_kernel(const ConvGeom& g, const real* gy, const real* x,
                            real* gk) {
  const size_t hw = static_cast<size_t>(g.h) * g.w;
  const size_t ohow = static_cast<size_t>(g.oh) * g.ow;
  for (int n = 0; n < g.n; ++n)
    for (int o = 0; o < g.cout; ++o)
      for (int oy = 0; oy < g.oh; ++oy)
        for (int ox = 0; ox < g.ow; ++ox) {
          const real gv = gy[(static_cast<size_t>(n) * g.cout + o) * ohow + oy * g.ow + ox];
          for (int c = 0; c < g.cin; ++c)
            for (int ki = 0; ki < g.kh; ++ki)
              for (int kj = 0; kj < g.kw; ++kj) {
                const int iy = oy * g.stride - g.pad + ki;
                const int ix = ox * g.stride - g.pad + kj;
                if (iy < 0 || iy >= g.h || ix < 0 || ix >= g.w) continue;
                gk[((static_cast<size_t>(o) * g.cin + c) * g.kh + ki) * g.kw + kj] +=
                    gv * x[(static_cast<size_t>(n) * g.cin + c) * hw + iy * g.w + ix];
              }
        }
}

}  // namespace ref

}  // namespace tsa::kernels
