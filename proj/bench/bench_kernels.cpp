// Serial reference kernels vs the OpenMP kernels the autodiff ops use.
//
//   bench_kernels [--threads N] [--reps R]

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <string>
#include <vector>

#include "omnidit/attention.hpp"
#include "omnidit/kernels.hpp"
#include "omnidit/rng.hpp"

using namespace omnidit;
using Clock = std::chrono::steady_clock;

namespace {

template <typename F>
double best_seconds(int reps, F&& f) {
  double best = 1e30;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = Clock::now();
    f();
    best = std::min(best, std::chrono::duration<double>(Clock::now() - t0).count());
  }
  return best;
}

std::vector<float> random_vec(std::size_t n, std::uint64_t stream) {
  Rng rng(7, stream);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

void gemm_row(const char* name, std::size_t m, std::size_t k, std::size_t n, int reps) {
  auto a = random_vec(m * k, 1), b = random_vec(k * n, 2);
  std::vector<float> c1(m * n), c2(m * n);
  const double ts = best_seconds(reps, [&] { kernels::serial::gemm(m, k, n, a.data(), b.data(), c1.data(), false); });
  const double tp = best_seconds(reps, [&] { kernels::parallel::gemm(m, k, n, a.data(), b.data(), c2.data(), false); });
  const double gf = 2.0 * m * n * k * 1e-9;
  std::printf("%-26s %10.3f %10.3f %8.2f %8.2f %7.2fx %s\n", name, ts * 1e3, tp * 1e3, gf / ts, gf / tp, ts / tp,
              c1 == c2 ? "bitwise" : "DIFFERS");
}

void attention_row(std::size_t grid, std::size_t window, int reps) {
  const layout::Grid g{grid, grid};
  std::vector<layout::Grid> refs{g, g};
  const auto seq = layout::assign_positions(g, refs, 4);
  const auto mask = attention::build_mask(seq, attention::plan_windows(seq, window, attention::Parity::regular));
  const std::size_t len = seq.total_len(), d = 16, groups = 4;
  auto q = random_vec(groups * len * d, 3), k = random_vec(groups * len * d, 4), v = random_vec(groups * len * d, 5);
  std::vector<float> o1(q.size()), o2(q.size()), p1(groups * mask.rows.nnz()), p2(p1.size());
  const float scale = 0.25f;
  const double ts = best_seconds(reps, [&] {
    kernels::serial::sparse_attention(groups, len, d, mask.rows, scale, q.data(), k.data(), v.data(), o1.data(), p1.data());
  });
  const double tp = best_seconds(reps, [&] {
    kernels::parallel::sparse_attention(groups, len, d, mask.rows, scale, q.data(), k.data(), v.data(), o2.data(), p2.data());
  });
  const double gf = 4.0 * d * groups * mask.rows.nnz() * 1e-9;
  char name[64];
  std::snprintf(name, sizeof name, "attn %zux%zu x2 M=%zu", grid, grid, window);
  std::printf("%-26s %10.3f %10.3f %8.2f %8.2f %7.2fx %s\n", name, ts * 1e3, tp * 1e3, gf / ts, gf / tp, ts / tp,
              o1 == o2 ? "bitwise" : "DIFFERS");
}

}  // namespace

int main(int argc, char** argv) {
  int reps = 5;
  for (int i = 1; i + 1 < argc; ++i) {
    if (!std::strcmp(argv[i], "--threads")) kernels::set_threads(std::atoi(argv[++i]));
    else if (!std::strcmp(argv[i], "--reps")) reps = std::atoi(argv[++i]);
  }
  std::printf("threads=%d\n", kernels::max_threads());
  std::printf("%-26s %10s %10s %8s %8s %8s\n", "kernel", "serial_ms", "omp_ms", "ser_GF", "omp_GF", "speedup");
  gemm_row("gemm 1576x64x192 (qkv)", 1576, 64, 192, reps);
  gemm_row("gemm 1576x64x256 (fc1)", 1576, 64, 256, reps);
  gemm_row("gemm 1576x256x64 (fc2)", 1576, 256, 64, reps);
  gemm_row("gemm 512x512x512", 512, 512, 512, reps);
  attention_row(8, 4, reps);
  attention_row(32, 8, reps);
  return 0;
}
