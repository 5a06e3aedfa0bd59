#pragma once

// Internal row-major kernels shared by inference and training. Inner-index
// accumulation is always ascending so results stay reproducible.

#include <cstddef>

#include "bicl/errors.hpp"
#include "bicl/tensor.hpp"

namespace bicl::kernels {

// x[T x in] * w[in x out] + b[out]
inline Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
    Tensor y = matmul(x, w);
    if (b.size() != y.cols()) throw DimensionError("affine: bias size mismatch");
    for (std::size_t t = 0; t < y.rows(); ++t) {
        float* r = &y.at(t, 0);
        for (std::size_t j = 0; j < b.size(); ++j) r[j] += b[j];
    }
    return y;
}

// c[m x n] += a[m x k] * b[k x n], raw pointers, no checks.
inline void gemm_nn(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        float* cr = c + i * n;
        const float* ar = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const float av = ar[p];
            const float* br = b + p * n;
            for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

// c[k x n] += a[m x k]^T * b[m x n]
inline void gemm_tn(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const float* ar = a + i * k;
        const float* br = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const float av = ar[p];
            float* cr = c + p * n;
            for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

// c[m x k] += a[m x n] * b[k x n]^T
inline void gemm_nt(const float* a, const float* b, float* c, std::size_t m, std::size_t n, std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const float* ar = a + i * n;
        float* cr = c + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const float* br = b + p * n;
            float acc = 0.0f;
            for (std::size_t j = 0; j < n; ++j) acc += ar[j] * br[j];
            cr[p] += acc;
        }
    }
}

}  // namespace bicl::kernels
