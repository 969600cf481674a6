#pragma once

#include <cstddef>

namespace cram::kern {

// Matrix kernels, row-major, accumulate into C. These are the hot loops of
// the whole project; keep them branch-free and let the compiler vectorize
// the inner j loop. A(m x k), B as annotated, C(m x n).

// C += A * B, B is (k x n).
inline void mm_nn(const double* __restrict a, const double* __restrict b,
                  double* __restrict c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            double av = arow[p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// Unrolled dot product. The eight independent accumulators let the compiler
// vectorize the reduction without reassociating a single serial chain; the
// summation order is fixed, so results stay deterministic.
inline double dot(const double* __restrict x, const double* __restrict y, std::size_t n) {
    double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
    double a4 = 0.0, a5 = 0.0, a6 = 0.0, a7 = 0.0;
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        a0 += x[i] * y[i];
        a1 += x[i + 1] * y[i + 1];
        a2 += x[i + 2] * y[i + 2];
        a3 += x[i + 3] * y[i + 3];
        a4 += x[i + 4] * y[i + 4];
        a5 += x[i + 5] * y[i + 5];
        a6 += x[i + 6] * y[i + 6];
        a7 += x[i + 7] * y[i + 7];
    }
    double acc = ((a0 + a1) + (a2 + a3)) + ((a4 + a5) + (a6 + a7));
    for (; i < n; ++i) acc += x[i] * y[i];
    return acc;
}

// C += A * B^T, B is (n x k): C[i][j] = dot(A row i, B row j).
inline void mm_nt(const double* __restrict a, const double* __restrict b,
                  double* __restrict c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += dot(arow, b + j * k, k);
    }
}

// C += A^T * B, A is (k x m), B is (k x n): sum of outer products of rows.
inline void mm_tn(const double* __restrict a, const double* __restrict b,
                  double* __restrict c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const double* arow = a + p * m;
        const double* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            double av = arow[i];
            double* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

inline void axpy(double alpha, const double* __restrict x, double* __restrict y,
                 std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace cram::kern
