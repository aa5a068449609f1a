// SPDX-License-Identifier: Apache-2.0
#include "magent/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>

namespace magent::kernels {

namespace {
std::atomic<Backend> g_backend{Backend::Parallel};

// Work below this many fused multiply-adds is not worth a fork/join.
constexpr int64_t kParallelGrain = 16 * 1024;
}  // namespace

void set_backend(Backend b) { g_backend.store(b, std::memory_order_relaxed); }
Backend backend() { return g_backend.load(std::memory_order_relaxed); }
bool parallel() { return backend() == Backend::Parallel; }

void gemm_nn(double* c, const double* a, const double* b, int m, int k, int n, bool accumulate) {
    const bool par = parallel() && static_cast<int64_t>(m) * k * n >= kParallelGrain;
#pragma omp parallel for schedule(static) if (par)
    for (int i = 0; i < m; ++i) {
        double* __restrict crow = c + static_cast<int64_t>(i) * n;
        if (!accumulate) std::fill(crow, crow + n, 0.0);
        const double* arow = a + static_cast<int64_t>(i) * k;
        int p = 0;
        // unrolled over p; additions into crow[j] stay in ascending p order,
        // so the result is bitwise identical to the plain loop
        for (; p + 4 <= k; p += 4) {
            const double a0 = arow[p], a1 = arow[p + 1], a2 = arow[p + 2], a3 = arow[p + 3];
            const double* __restrict b0 = b + static_cast<int64_t>(p) * n;
            const double* __restrict b1 = b0 + n;
            const double* __restrict b2 = b1 + n;
            const double* __restrict b3 = b2 + n;
            for (int j = 0; j < n; ++j) {
                double acc = crow[j];
                acc += a0 * b0[j];
                acc += a1 * b1[j];
                acc += a2 * b2[j];
                acc += a3 * b3[j];
                crow[j] = acc;
            }
        }
        for (; p < k; ++p) {
            const double av = arow[p];
            const double* __restrict brow = b + static_cast<int64_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void gemm_nt(double* c, const double* a, const double* b, int m, int k, int n, bool accumulate) {
    const bool par = parallel() && static_cast<int64_t>(m) * k * n >= kParallelGrain;
#pragma omp parallel for schedule(static) if (par)
    for (int i = 0; i < m; ++i) {
        const double* __restrict arow = a + static_cast<int64_t>(i) * k;
        double* __restrict crow = c + static_cast<int64_t>(i) * n;
        int j = 0;
        // two dot products per pass share the arow loads; each keeps its own
        // single accumulator in plain p order
        for (; j + 2 <= n; j += 2) {
            const double* __restrict b0 = b + static_cast<int64_t>(j) * k;
            const double* __restrict b1 = b0 + k;
            double acc0 = 0.0, acc1 = 0.0;
            for (int p = 0; p < k; ++p) {
                const double av = arow[p];
                acc0 += av * b0[p];
                acc1 += av * b1[p];
            }
            crow[j] = accumulate ? crow[j] + acc0 : acc0;
            crow[j + 1] = accumulate ? crow[j + 1] + acc1 : acc1;
        }
        for (; j < n; ++j) {
            const double* __restrict brow = b + static_cast<int64_t>(j) * k;
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] = accumulate ? crow[j] + acc : acc;
        }
    }
}

void gemm_tn(double* c, const double* a, const double* b, int m, int k, int n, bool accumulate) {
    // Threads own whole rows of C and rows accumulate in fixed i order, so
    // the result does not depend on the thread count.
    const bool par = parallel() && static_cast<int64_t>(m) * k * n >= kParallelGrain;
#pragma omp parallel for schedule(static) if (par)
    for (int p0 = 0; p0 < k; p0 += 4) {
        const int pn = std::min(4, k - p0);
        double* __restrict c0 = c + static_cast<int64_t>(p0) * n;
        double* __restrict c1 = pn > 1 ? c0 + n : nullptr;
        double* __restrict c2 = pn > 2 ? c0 + 2 * n : nullptr;
        double* __restrict c3 = pn > 3 ? c0 + 3 * n : nullptr;
        if (!accumulate) std::fill(c0, c0 + static_cast<int64_t>(pn) * n, 0.0);
        if (pn == 4) {
            // four C rows share one pass over B
            for (int i = 0; i < m; ++i) {
                const double* arow = a + static_cast<int64_t>(i) * k + p0;
                const double a0 = arow[0], a1 = arow[1], a2 = arow[2], a3 = arow[3];
                const double* __restrict brow = b + static_cast<int64_t>(i) * n;
                for (int j = 0; j < n; ++j) {
                    const double bj = brow[j];
                    c0[j] += a0 * bj;
                    c1[j] += a1 * bj;
                    c2[j] += a2 * bj;
                    c3[j] += a3 * bj;
                }
            }
        } else {
            for (int p = p0; p < p0 + pn; ++p) {
                double* __restrict crow = c + static_cast<int64_t>(p) * n;
                for (int i = 0; i < m; ++i) {
                    const double av = a[static_cast<int64_t>(i) * k + p];
                    const double* __restrict brow = b + static_cast<int64_t>(i) * n;
                    for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
                }
            }
        }
    }
}

void softmax_rows(const double* x, double* y, int rows, int cols) {
    const bool par = parallel() && static_cast<int64_t>(rows) * cols >= kParallelGrain;
#pragma omp parallel for schedule(static) if (par)
    for (int i = 0; i < rows; ++i) {
        const double* xr = x + static_cast<int64_t>(i) * cols;
        double* yr = y + static_cast<int64_t>(i) * cols;
        double mx = xr[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
        double sum = 0.0;
        for (int j = 0; j < cols; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            sum += yr[j];
        }
        const double inv = 1.0 / sum;
        for (int j = 0; j < cols; ++j) yr[j] *= inv;
    }
}

void log_softmax_rows(const double* x, double* y, int rows, int cols) {
    const bool par = parallel() && static_cast<int64_t>(rows) * cols >= kParallelGrain;
#pragma omp parallel for schedule(static) if (par)
    for (int i = 0; i < rows; ++i) {
        const double* xr = x + static_cast<int64_t>(i) * cols;
        double* yr = y + static_cast<int64_t>(i) * cols;
        double mx = xr[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
        double sum = 0.0;
        for (int j = 0; j < cols; ++j) sum += std::exp(xr[j] - mx);
        const double lse = mx + std::log(sum);
        for (int j = 0; j < cols; ++j) yr[j] = xr[j] - lse;
    }
}

void layer_norm_rows(const double* x, const double* gain, const double* bias, double* y, double* xhat,
                     double* inv_std, int rows, int cols, double eps) {
    const bool par = parallel() && static_cast<int64_t>(rows) * cols >= kParallelGrain;
#pragma omp parallel for schedule(static) if (par)
    for (int i = 0; i < rows; ++i) {
        const double* xr = x + static_cast<int64_t>(i) * cols;
        double* yr = y + static_cast<int64_t>(i) * cols;
        double* hr = xhat + static_cast<int64_t>(i) * cols;
        double mean = 0.0;
        for (int j = 0; j < cols; ++j) mean += xr[j];
        mean /= cols;
        double var = 0.0;
        for (int j = 0; j < cols; ++j) {
            const double d = xr[j] - mean;
            var += d * d;
        }
        var /= cols;
        const double istd = 1.0 / std::sqrt(var + eps);
        inv_std[i] = istd;
        for (int j = 0; j < cols; ++j) {
            hr[j] = (xr[j] - mean) * istd;
            yr[j] = gain[j] * hr[j] + bias[j];
        }
    }
}

void layer_norm_rows_backward(const double* dy, const double* xhat, const double* inv_std,
                              const double* gain, double* dx, double* dgain, double* dbias, int rows,
                              int cols) {
    const bool par = parallel() && static_cast<int64_t>(rows) * cols >= kParallelGrain;
#pragma omp parallel for schedule(static) if (par)
    for (int i = 0; i < rows; ++i) {
        const double* dyr = dy + static_cast<int64_t>(i) * cols;
        const double* hr = xhat + static_cast<int64_t>(i) * cols;
        double* dxr = dx + static_cast<int64_t>(i) * cols;
        double sum_g = 0.0, sum_gh = 0.0;
        for (int j = 0; j < cols; ++j) {
            const double gdy = gain[j] * dyr[j];
            sum_g += gdy;
            sum_gh += gdy * hr[j];
        }
        const double mean_g = sum_g / cols;
        const double mean_gh = sum_gh / cols;
        for (int j = 0; j < cols; ++j) {
            dxr[j] += (gain[j] * dyr[j] - mean_g - hr[j] * mean_gh) * inv_std[i];
        }
    }
    // Column reductions stay serial so accumulation order over rows is fixed.
    for (int i = 0; i < rows; ++i) {
        const double* dyr = dy + static_cast<int64_t>(i) * cols;
        const double* hr = xhat + static_cast<int64_t>(i) * cols;
        for (int j = 0; j < cols; ++j) {
            dgain[j] += dyr[j] * hr[j];
            dbias[j] += dyr[j];
        }
    }
}

void add(double* out, const double* a, const double* b, int64_t n, bool accumulate) {
    const bool par = parallel() && n >= kParallelGrain;
#pragma omp parallel for schedule(static) if (par)
    for (int64_t i = 0; i < n; ++i) out[i] = (accumulate ? out[i] : 0.0) + a[i] + b[i];
}

void mul(double* out, const double* a, const double* b, int64_t n, bool accumulate) {
    const bool par = parallel() && n >= kParallelGrain;
#pragma omp parallel for schedule(static) if (par)
    for (int64_t i = 0; i < n; ++i) out[i] = (accumulate ? out[i] : 0.0) + a[i] * b[i];
}

void axpy(double* y, double alpha, const double* x, int64_t n) {
    const bool par = parallel() && n >= kParallelGrain;
#pragma omp parallel for schedule(static) if (par)
    for (int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scale(double* out, const double* x, double alpha, int64_t n, bool accumulate) {
    const bool par = parallel() && n >= kParallelGrain;
#pragma omp parallel for schedule(static) if (par)
    for (int64_t i = 0; i < n; ++i) out[i] = (accumulate ? out[i] : 0.0) + alpha * x[i];
}

void relu(double* y, const double* x, int64_t n) {
    const bool par = parallel() && n >= kParallelGrain;
#pragma omp parallel for schedule(static) if (par)
    for (int64_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_backward(double* dx, const double* x, const double* dy, int64_t n) {
    const bool par = parallel() && n >= kParallelGrain;
#pragma omp parallel for schedule(static) if (par)
    for (int64_t i = 0; i < n; ++i) {
        if (x[i] > 0.0) dx[i] += dy[i];
    }
}

void adam_step(double* param, const double* grad, double* m, double* v, int64_t n, int64_t step,
               double lr, double beta1, double beta2, double eps, double weight_decay) {
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    const bool par = parallel() && n >= kParallelGrain;
#pragma omp parallel for schedule(static) if (par)
    for (int64_t i = 0; i < n; ++i) {
        const double g = grad[i] + weight_decay * param[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        param[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

}  // namespace magent::kernels
