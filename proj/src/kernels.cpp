#include "feduq/kernels.hpp"

#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace feduq::kern {

namespace ref {

void matmul(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] = 0.0;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a[i * k + p];
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

void matmul_nt(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
            c[i * n + j] = s;
        }
    }
}

void matmul_tn(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n) {
    // c[k x n]; iterate output rows so the accumulation order per element is
    // fixed regardless of parallel row split in the caller.
    for (std::size_t i = 0; i < k; ++i) {
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] = 0.0;
        for (std::size_t p = 0; p < m; ++p) {
            const double api = a[p * k + i];
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
        }
    }
}

static inline double phi_cdf(double x) { return 0.5 * std::erfc(-x * M_SQRT1_2); }
static inline double phi_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI); }

void gelu(const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] = x[i] * phi_cdf(x[i]);
}

void gelu_grad(const double* x, const double* g, double* dx, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dx[i] = g[i] * (phi_cdf(x[i]) + x[i] * phi_pdf(x[i]));
}

void sigmoid(const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] = 1.0 / (1.0 + std::exp(-x[i]));
}

void exp(const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] = std::exp(x[i]);
}

void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x + r * cols;
        double* yr = y + r * cols;
        double mx = xr[0];
        for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            z += yr[j];
        }
        for (std::size_t j = 0; j < cols; ++j) yr[j] /= z;
    }
}

void layernorm_rows(const double* x, const double* gain, const double* bias,
                    double eps, double* y, double* mean, double* rstd,
                    std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x + r * cols;
        double* yr = y + r * cols;
        double m = 0.0;
        for (std::size_t j = 0; j < cols; ++j) m += xr[j];
        m /= static_cast<double>(cols);
        double v = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            const double d = xr[j] - m;
            v += d * d;
        }
        v /= static_cast<double>(cols);
        const double rs = 1.0 / std::sqrt(v + eps);
        mean[r] = m;
        rstd[r] = rs;
        for (std::size_t j = 0; j < cols; ++j) yr[j] = gain[j] * ((xr[j] - m) * rs) + bias[j];
    }
}

void l2norm_rows(const double* x, double eps, double* y, double* norms,
                 std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x + r * cols;
        double* yr = y + r * cols;
        double s = 0.0;
        for (std::size_t j = 0; j < cols; ++j) s += xr[j] * xr[j];
        const double nrm = std::max(std::sqrt(s), eps);
        norms[r] = nrm;
        for (std::size_t j = 0; j < cols; ++j) yr[j] = xr[j] / nrm;
    }
}

}  // namespace ref

#ifdef _OPENMP
// minimum per-element work before a parallel region pays off
static constexpr std::size_t kMinFlops = 1 << 16;
static constexpr std::size_t kMinElems = 1 << 14;
#endif

void matmul(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n) {
#ifdef _OPENMP
    if (m * n * k >= kMinFlops && m > 1) {
#pragma omp parallel for schedule(static)
        for (long long i = 0; i < static_cast<long long>(m); ++i)
            ref::matmul(a + i * k, b, c + i * n, 1, k, n);
        return;
    }
#endif
    ref::matmul(a, b, c, m, k, n);
}

void matmul_nt(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n) {
#ifdef _OPENMP
    if (m * n * k >= kMinFlops && m > 1) {
#pragma omp parallel for schedule(static)
        for (long long i = 0; i < static_cast<long long>(m); ++i)
            ref::matmul_nt(a + i * k, b, c + i * n, 1, k, n);
        return;
    }
#endif
    ref::matmul_nt(a, b, c, m, k, n);
}

void matmul_tn(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n) {
#ifdef _OPENMP
    if (m * n * k >= kMinFlops && k > 1) {
        // split over output rows (columns of a); per-element order unchanged
#pragma omp parallel for schedule(static)
        for (long long i = 0; i < static_cast<long long>(k); ++i) {
            double* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] = 0.0;
            for (std::size_t p = 0; p < m; ++p) {
                const double api = a[p * k + i];
                const double* bp = b + p * n;
                for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
            }
        }
        return;
    }
#endif
    ref::matmul_tn(a, b, c, m, k, n);
}

#ifdef _OPENMP
#define FEDUQ_MAP_PARALLEL(total, serial_call, chunk_call)                            \
    if ((total) >= kMinElems) {                                                       \
        const long long nn = static_cast<long long>(total);                           \
        _Pragma("omp parallel") {                                                     \
            const int nt = omp_get_num_threads();                                     \
            const int t = omp_get_thread_num();                                       \
            const long long lo = nn * t / nt, hi = nn * (t + 1) / nt;                 \
            if (hi > lo) chunk_call;                                                  \
        }                                                                             \
        return;                                                                       \
    }                                                                                 \
    serial_call;
#else
#define FEDUQ_MAP_PARALLEL(total, serial_call, chunk_call) serial_call;
#endif

void gelu(const double* x, double* y, std::size_t n) {
    FEDUQ_MAP_PARALLEL(n, ref::gelu(x, y, n),
                       ref::gelu(x + lo, y + lo, static_cast<std::size_t>(hi - lo)))
}

void gelu_grad(const double* x, const double* g, double* dx, std::size_t n) {
    FEDUQ_MAP_PARALLEL(n, ref::gelu_grad(x, g, dx, n),
                       ref::gelu_grad(x + lo, g + lo, dx + lo, static_cast<std::size_t>(hi - lo)))
}

void sigmoid(const double* x, double* y, std::size_t n) {
    FEDUQ_MAP_PARALLEL(n, ref::sigmoid(x, y, n),
                       ref::sigmoid(x + lo, y + lo, static_cast<std::size_t>(hi - lo)))
}

void exp(const double* x, double* y, std::size_t n) {
    FEDUQ_MAP_PARALLEL(n, ref::exp(x, y, n),
                       ref::exp(x + lo, y + lo, static_cast<std::size_t>(hi - lo)))
}

void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t cols) {
#ifdef _OPENMP
    if (rows * cols >= kMinElems && rows > 1) {
#pragma omp parallel for schedule(static)
        for (long long r = 0; r < static_cast<long long>(rows); ++r)
            ref::softmax_rows(x + r * cols, y + r * cols, 1, cols);
        return;
    }
#endif
    ref::softmax_rows(x, y, rows, cols);
}

void layernorm_rows(const double* x, const double* gain, const double* bias,
                    double eps, double* y, double* mean, double* rstd,
                    std::size_t rows, std::size_t cols) {
#ifdef _OPENMP
    if (rows * cols >= kMinElems && rows > 1) {
#pragma omp parallel for schedule(static)
        for (long long r = 0; r < static_cast<long long>(rows); ++r)
            ref::layernorm_rows(x + r * cols, gain, bias, eps, y + r * cols, mean + r,
                                rstd + r, 1, cols);
        return;
    }
#endif
    ref::layernorm_rows(x, gain, bias, eps, y, mean, rstd, rows, cols);
}

void l2norm_rows(const double* x, double eps, double* y, double* norms,
                 std::size_t rows, std::size_t cols) {
#ifdef _OPENMP
    if (rows * cols >= kMinElems && rows > 1) {
#pragma omp parallel for schedule(static)
        for (long long r = 0; r < static_cast<long long>(rows); ++r)
            ref::l2norm_rows(x + r * cols, eps, y + r * cols, norms + r, 1, cols);
        return;
    }
#endif
    ref::l2norm_rows(x, eps, y, norms, rows, cols);
}

}  // namespace feduq::kern
