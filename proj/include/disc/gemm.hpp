#pragma once

#include <cstddef>

namespace disc {

// Small row-major GEMM kernels, accumulate into C. Loop orders are chosen
// so the inner loop is a contiguous stream the compiler can vectorize.

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(int M, int N, int K, const T* A, const T* B, T* C) {
    for (int i = 0; i < M; ++i) {
        T* c = C + static_cast<std::size_t>(i) * N;
        const T* a = A + static_cast<std::size_t>(i) * K;
        for (int k = 0; k < K; ++k) {
            T av = a[k];
            const T* b = B + static_cast<std::size_t>(k) * N;
            for (int j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// C[M,N] += A^T * B, with A stored [K,M]
template <typename T>
void gemm_tn(int M, int N, int K, const T* A, const T* B, T* C) {
    for (int k = 0; k < K; ++k) {
        const T* a = A + static_cast<std::size_t>(k) * M;
        const T* b = B + static_cast<std::size_t>(k) * N;
        for (int i = 0; i < M; ++i) {
            T av = a[i];
            T* c = C + static_cast<std::size_t>(i) * N;
            for (int j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// C[M,N] += A * B^T, with B stored [N,K]
template <typename T>
void gemm_nt(int M, int N, int K, const T* A, const T* B, T* C) {
    for (int i = 0; i < M; ++i) {
        const T* a = A + static_cast<std::size_t>(i) * K;
        T* c = C + static_cast<std::size_t>(i) * N;
        for (int j = 0; j < N; ++j) {
            const T* b = B + static_cast<std::size_t>(j) * K;
            T acc = 0;
            for (int k = 0; k < K; ++k) acc += a[k] * b[k];
            c[j] += acc;
        }
    }
}

}  // namespace disc
