#pragma once

#include <cstddef>

namespace gazemoe {
namespace kern {

// All kernels accumulate (C +=) and iterate with the reduction innermost kept
// sequential per output element, so results are bit-deterministic for a given
// build regardless of call pattern.

// C[m,n] += A[m,k] * B[k,n]
template <class S>
void gemm_nn(S* C, const S* A, const S* B, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        S* c = C + i * n;
        const S* arow = A + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const S a = arow[p];
            if (a == S(0)) continue;
            const S* b = B + p * n;
            for (std::size_t j = 0; j < n; ++j) c[j] += a * b[j];
        }
    }
}

// C[k,n] += A[m,k]^T * B[m,n]
template <class S>
void gemm_tn(S* C, const S* A, const S* B, std::size_t k, std::size_t m, std::size_t n) {
    for (std::size_t p = 0; p < m; ++p) {
        const S* arow = A + p * k;
        const S* brow = B + p * n;
        for (std::size_t i = 0; i < k; ++i) {
            const S a = arow[i];
            if (a == S(0)) continue;
            S* c = C + i * n;
            for (std::size_t j = 0; j < n; ++j) c[j] += a * brow[j];
        }
    }
}

// out[n,m] = in[m,n]
template <class S>
void transpose2d(S* out, const S* in, std::size_t m, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = in[i * n + j];
}

} // namespace kern
} // namespace gazemoe
