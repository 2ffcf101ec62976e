#pragma once

namespace pica {

// Row-major matrix multiply kernels. All three keep a fixed per-element
// accumulation order (sequential in k), so results are bit-stable for any
// thread count.

// C[M,N] (+)= A[M,K] * B[K,N]
template <typename T>
void gemm(int m, int n, int k, const T* a, const T* b, T* c, bool accumulate);

// C[M,N] (+)= A[K,M]^T * B[K,N]
template <typename T>
void gemm_at(int m, int n, int k, const T* a, const T* b, T* c, bool accumulate);

// C[M,N] (+)= A[M,K] * B[N,K]^T
template <typename T>
void gemm_bt(int m, int n, int k, const T* a, const T* b, T* c, bool accumulate);

}  // namespace pica
