#pragma once

#include "tsa/config.hpp"

namespace tsa::kernels {

/// Output extent of a strided, padded correlation window.
int conv_out_extent(int in, int k, int stride, int pad);

struct ConvGeom {
  int n, cin, h, w;
  int cout, kh, kw;
  int stride, pad;
  int oh, ow;
  static ConvGeom make(int n, int cin, int h, int w, int cout, int kh, int kw,
                       int stride, int pad);
};

// Parallel kernels. Built with OpenMP these split disjoint output slices over
// threads; every output element keeps a fixed accumulation order, so results
// are bit-identical for any thread count (and match the serial build).

/// C = A * B, row-major, A m x k, B k x n.
void gemm_nn(int m, int n, int k, const real* A, const real* B, real* C);

/// C += A * B.
void gemm_nn_acc(int m, int n, int k, const real* A, const real* B, real* C);

/// C += A * B^T, A m x k, B n x k. Accumulation order over k is blocked
/// ascending, fixed per element.
void gemm_nt_acc(int m, int n, int k, const real* A, const real* B, real* C);

/// AT = A^T, A m x n.
void transpose(int m, int n, const real* A, real* AT);

/// Patch matrix for one image: col is (cin*kh*kw) x (n_images*oh*ow) batched
/// row-major; this fills the column block of image `img_index`.
void im2col(const real* x, int cin, int h, int w, int kh, int kw, int stride,
            int pad, int oh, int ow, int n_images, int img_index, real* col);

/// Scatter-add of one image's column block back onto the padded input grid.
void col2im_acc(const real* col, int cin, int h, int w, int kh, int kw,
                int stride, int pad, int oh, int ow, int n_images,
                int img_index, real* gx);

/// y = conv(x, k); x NCHW, k OIHW, y NCHW. Overwrites y.
void conv2d_forward(const ConvGeom& g, const real* x, const real* k, real* y);

/// gx += dconv/dx applied to gy. Accumulates.
void conv2d_backward_input(const ConvGeom& g, const real* gy, const real* k,
                           real* gx);

/// gk += dconv/dk applied to gy. Accumulates.
void conv2d_backward_kernel(const ConvGeom& g, const real* gy, const real* x,
                            real* gk);

// Serial reference implementations: direct nested loops, no patch matrices.
// Kept as the correctness oracle for the parallel kernels and exercised by the
// benchmark target.
namespace ref {
void gemm_nn(int m, int n, int k, const real* A, const real* B, real* C);
void gemm_nt_acc(int m, int n, int k, const real* A, const real* B, real* C);
void conv2d_forward(const ConvGeom& g, const real* x, const real* k, real* y);
void conv2d_backward_input(const ConvGeom& g, const real* gy, const real* k,
                           real* gx);
void conv2d_backward_kernel(const ConvGeom& g, const real* gy, const real* x,
                            real* gk);
}  // namespace ref

}  // namespace tsa::kernels
