#pragma once

#include <cstdint>

namespace mirau::nd {

// Row-major matrix kernels. Every output element is produced by exactly one
// thread with a fixed inner-loop order, so results are bit-identical across
// thread counts and repeated runs.

namespace detail {
constexpr std::int64_t kParallelCutoff = 1 << 16;  // flops below this run serial
}

// C[M,N] (+)= A[M,K] * B[K,N]
template <typename T>
void gemm_nn(std::int64_t M, std::int64_t N, std::int64_t K,
             const T* A, const T* B, T* C, bool accumulate) {
    const bool par = M * N * K > detail::kParallelCutoff && M > 1;
#pragma omp parallel for schedule(static) if (par)
    for (std::int64_t i = 0; i < M; ++i) {
        T* c = C + i * N;
        if (!accumulate)
            for (std::int64_t j = 0; j < N; ++j) c[j] = T(0);
        const T* a = A + i * K;
        for (std::int64_t k = 0; k < K; ++k) {
            const T aik = a[k];
            const T* b = B + k * N;
            for (std::int64_t j = 0; j < N; ++j) c[j] += aik * b[j];
        }
    }
}

// C[M,N] (+)= A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt(std::int64_t M, std::int64_t N, std::int64_t K,
             const T* A, const T* B, T* C, bool accumulate) {
    constexpr std::int64_t L = 16;  // accumulator lanes; maps onto one simd register chain
    const bool par = M * N * K > detail::kParallelCutoff && M > 1;
#pragma omp parallel for schedule(static) if (par)
    for (std::int64_t i = 0; i < M; ++i) {
        const T* a = A + i * K;
        T* c = C + i * N;
        for (std::int64_t j = 0; j < N; ++j) {
            const T* b = B + j * K;
            T lanes[L] = {};
            std::int64_t k = 0;
            for (; k + L <= K; k += L)
                for (std::int64_t l = 0; l < L; ++l) lanes[l] += a[k + l] * b[k + l];
            T s = T(0);
            for (; k < K; ++k) s += a[k] * b[k];
            for (std::int64_t l = 0; l < L; ++l) s += lanes[l];
            if (accumulate)
                c[j] += s;
            else
                c[j] = s;
        }
    }
}

// C[M,N] (+)= A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(std::int64_t M, std::int64_t N, std::int64_t K,
             const T* A, const T* B, T* C, bool accumulate) {
    const bool par = M * N * K > detail::kParallelCutoff && M > 1;
#pragma omp parallel for schedule(static) if (par)
    for (std::int64_t i = 0; i < M; ++i) {
        T* c = C + i * N;
        if (!accumulate)
            for (std::int64_t j = 0; j < N; ++j) c[j] = T(0);
        for (std::int64_t k = 0; k < K; ++k) {
            const T aki = A[k * M + i];
            const T* b = B + k * N;
            for (std::int64_t j = 0; j < N; ++j) c[j] += aki * b[j];
        }
    }
}

}  // namespace mirau::nd
