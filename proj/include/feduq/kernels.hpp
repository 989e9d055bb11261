#pragma once

#include <cstddef>

namespace feduq::kern {

// Serial reference implementations. The OpenMP kernels below must produce
// bitwise-identical results: parallelism is only ever over independent output
// elements, never over a floating-point reduction, so results do not depend
// on thread count.
namespace ref {

void matmul(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n);
// c[m x n] = a[m x k] * b[n x k]^T
void matmul_nt(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n);
// c[k x n] = a[m x k]^T * b[m x n]
void matmul_tn(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n);

void gelu(const double* x, double* y, std::size_t n);
void gelu_grad(const double* x, const double* g, double* dx, std::size_t n);
void sigmoid(const double* x, double* y, std::size_t n);
void exp(const double* x, double* y, std::size_t n);

// per-row softmax with max-shift
void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t cols);
// per-row layernorm; mean/rstd are per-row scratch outputs reused by backward
void layernorm_rows(const double* x, const double* gain, const double* bias,
                    double eps, double* y, double* mean, double* rstd,
                    std::size_t rows, std::size_t cols);
// rows divided by max(l2 norm, eps); norms records the divisor per row
void l2norm_rows(const double* x, double eps, double* y, double* norms,
                 std::size_t rows, std::size_t cols);

}  // namespace ref

// Parallel entry points used by the graph. Fall back to the serial loop for
// small work sizes where fork/join overhead dominates.
void matmul(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n);
void matmul_nt(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n);
void matmul_tn(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n);
void gelu(const double* x, double* y, std::size_t n);
void gelu_grad(const double* x, const double* g, double* dx, std::size_t n);
void sigmoid(const double* x, double* y, std::size_t n);
void exp(const double* x, double* y, std::size_t n);
void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t cols);
void layernorm_rows(const double* x, const double* gain, const double* bias,
                    double eps, double* y, double* mean, double* rstd,
                    std::size_t rows, std::size_t cols);
void l2norm_rows(const double* x, double eps, double* y, double* norms,
                 std::size_t rows, std::size_t cols);

}  // namespace feduq::kern
