#include "pica/gemm.hpp"

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <vector>

namespace pica {

namespace {
constexpr std::int64_t kParThreshold = 1 << 18;  // flops below this stay single-threaded
}

template <typename T>
void gemm(int m, int n, int k, const T* a, const T* b, T* c, bool accumulate) {
  const std::int64_t work = std::int64_t(m) * n * k;
#pragma omp parallel for schedule(static) if (work > kParThreshold)
  for (int i = 0; i < m; ++i) {
    T* cr = c + std::size_t(i) * n;
    if (!accumulate) std::fill(cr, cr + n, T(0));
    const T* ar = a + std::size_t(i) * k;
    for (int kk = 0; kk < k; ++kk) {
      const T av = ar[kk];
      const T* br = b + std::size_t(kk) * n;
      for (int j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

template <typename T>
void gemm_at(int m, int n, int k, const T* a, const T* b, T* c, bool accumulate) {
  // C[m][j] = sum_s A[s][m] * B[s][j]; each thread owns a block of C rows and
  // streams s in ascending order, so the sum order per element is fixed.
  const std::int64_t work = std::int64_t(m) * n * k;
#pragma omp parallel for schedule(static) if (work > kParThreshold)
  for (int i = 0; i < m; ++i) {
    T* cr = c + std::size_t(i) * n;
    if (!accumulate) std::fill(cr, cr + n, T(0));
    for (int s = 0; s < k; ++s) {
      const T av = a[std::size_t(s) * m + i];
      if (av == T(0)) continue;
      const T* br = b + std::size_t(s) * n;
      for (int j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

template <typename T>
void gemm_bt(int m, int n, int k, const T* a, const T* b, T* c, bool accumulate) {
  // B is n x k; transpose it once so the hot loop is the plain kernel.
  std::vector<T> bt(std::size_t(k) * n);
  for (int j = 0; j < n; ++j)
    for (int s = 0; s < k; ++s) bt[std::size_t(s) * n + j] = b[std::size_t(j) * k + s];
  gemm(m, n, k, a, bt.data(), c, accumulate);
}

template void gemm<float>(int, int, int, const float*, const float*, float*, bool);
template void gemm<double>(int, int, int, const double*, const double*, double*, bool);
template void gemm_at<float>(int, int, int, const float*, const float*, float*, bool);
template void gemm_at<double>(int, int, int, const double*, const double*, double*, bool);
template void gemm_bt<float>(int, int, int, const float*, const float*, float*, bool);
template void gemm_bt<double>(int, int, int, const double*, const double*, double*, bool);

}  // namespace pica
