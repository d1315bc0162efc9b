// Compares the OpenMP kernels against the serial reference implementations:
// same inputs, wall-clock per op, and the worst output mismatch. Forward ops
// accumulate in the same order on both paths and agree exactly; the backward
// scatter-adds associate differently, so they agree to rounding noise only.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "tsa/kernels.hpp"
#include "tsa/rng.hpp"

using namespace tsa;
using kernels::ConvGeom;

namespace {

std::vector<real> random_buf(Rng& rng, size_t n) {
  std::vector<real> v(n);
  for (real& x : v) x = static_cast<real>(rng.normal());
  return v;
}

double time_ms(const std::function<void()>& fn, int reps) {
  fn();  // warm up
  const auto t0 = std::chrono::steady_clock::now();
  for (int r = 0; r < reps; ++r) fn();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

double max_abs_diff(const std::vector<real>& a, const std::vector<real>& b) {
  double worst = 0;
  for (size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::fabs(static_cast<double>(a[i]) -
                                      static_cast<double>(b[i])));
  return worst;
}

void report_row(const std::string& name, double serial_ms, double parallel_ms,
                double diff) {
  std::printf("%-34s %10.3f %10.3f %8.2fx %10.2e\n", name.c_str(), serial_ms,
              parallel_ms, serial_ms / parallel_ms, diff);
}

void bench_gemm(Rng& rng, int m, int n, int k, int reps) {
  const std::vector<real> A = random_buf(rng, static_cast<size_t>(m) * k);
  const std::vector<real> B = random_buf(rng, static_cast<size_t>(k) * n);
  std::vector<real> Cs(static_cast<size_t>(m) * n), Cp = Cs;

  const double serial =
      time_ms([&] { kernels::ref::gemm_nn(m, n, k, A.data(), B.data(), Cs.data()); },
              reps);
  const double parallel =
      time_ms([&] { kernels::gemm_nn(m, n, k, A.data(), B.data(), Cp.data()); },
              reps);
  report_row("gemm_nn " + std::to_string(m) + "x" + std::to_string(n) + "x" +
                 std::to_string(k),
             serial, parallel, max_abs_diff(Cs, Cp));
}

void bench_conv(Rng& rng, const std::string& tag, int n, int cin, int hw,
                int cout, int stride, int reps) {
  const ConvGeom g = ConvGeom::make(n, cin, hw, hw, cout, 3, 3, stride, 1);
  const std::vector<real> x =
      random_buf(rng, static_cast<size_t>(n) * cin * hw * hw);
  const std::vector<real> k = random_buf(rng, static_cast<size_t>(cout) * cin * 9);
  const size_t ynum = static_cast<size_t>(n) * cout * g.oh * g.ow;
  std::vector<real> ys(ynum), yp(ynum);

  double serial = time_ms(
      [&] { kernels::ref::conv2d_forward(g, x.data(), k.data(), ys.data()); },
      reps);
  double parallel = time_ms(
      [&] { kernels::conv2d_forward(g, x.data(), k.data(), yp.data()); }, reps);
  report_row("conv_fwd " + tag, serial, parallel, max_abs_diff(ys, yp));

  const std::vector<real> gy = random_buf(rng, ynum);
  std::vector<real> gxs(x.size()), gxp(x.size());
  serial = time_ms(
      [&] {
        std::memset(gxs.data(), 0, gxs.size() * sizeof(real));
        kernels::ref::conv2d_backward_input(g, gy.data(), k.data(), gxs.data());
      },
      reps);
  parallel = time_ms(
      [&] {
        std::memset(gxp.data(), 0, gxp.size() * sizeof(real));
        kernels::conv2d_backward_input(g, gy.data(), k.data(), gxp.data());
      },
      reps);
  report_row("conv_bwd_input " + tag, serial, parallel, max_abs_diff(gxs, gxp));

  std::vector<real> gks(k.size()), gkp(k.size());
  serial = time_ms(
      [&] {
        std::memset(gks.data(), 0, gks.size() * sizeof(real));
        kernels::ref::conv2d_backward_kernel(g, gy.data(), x.data(), gks.data());
      },
      reps);
  parallel = time_ms(
      [&] {
        std::memset(gkp.data(), 0, gkp.size() * sizeof(real));
        kernels::conv2d_backward_kernel(g, gy.data(), x.data(), gkp.data());
      },
      reps);
  report_row("conv_bwd_kernel " + tag, serial, parallel, max_abs_diff(gks, gkp));
}

}  // namespace

int main(int argc, char** argv) {
  const int reps = argc > 1 ? std::atoi(argv[1]) : 3;
#ifdef _OPENMP
  std::printf("OpenMP: %d threads\n", omp_get_max_threads());
#else
  std::printf("OpenMP: off (serial build)\n");
#endif
  std::printf("%-34s %10s %10s %9s %10s\n", "op", "serial ms", "parallel",
              "speedup", "max diff");

  Rng rng(42);
  bench_gemm(rng, 256, 256, 256, reps);
  bench_gemm(rng, 64, 2048, 144, reps);
  // the three conv shapes a 32x32 image meets along the small backbone
  bench_conv(rng, "16c 32px", 8, 16, 32, 16, 1, reps);
  bench_conv(rng, "16->32c /2", 8, 16, 32, 32, 2, reps);
  bench_conv(rng, "64c 8px", 8, 64, 8, 64, 1, reps);
  return 0;
}
