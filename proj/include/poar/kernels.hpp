#pragma once

// Plain loops over row-major buffers. No shape checks; the
// tape ops in ops.hpp validate shapes before calling in.

#include <cmath>
#include <cstddef>
#include <vector>

namespace poar::kernels {

// c[m×n] += a[m×k] · b[k×n]
template <class Real>
void gemm_nn(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        Real* ci = c + i * n;
        const Real* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const Real av = ai[p];
            const Real* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// c[m×n] += a[m×k] · b[n×k]ᵀ, via a transposed copy of b so the inner loop
// runs over contiguous memory.
template <class Real>
void gemm_nt(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
    std::vector<Real> bt(k * n);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
    gemm_nn(a, bt.data(), c, m, k, n);
}

// c[m×n] += a[k×m]ᵀ · b[k×n]
template <class Real>
void gemm_tn(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const Real* ap = a + p * m;
        const Real* bp = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const Real av = ap[i];
            Real* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

}  // namespace poar::kernels
