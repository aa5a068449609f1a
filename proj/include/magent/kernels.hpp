// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

namespace magent::kernels {

// All kernels come in two flavours behind one entry point: a serial reference
// and an OpenMP version parallelised over independent output rows. Every
// output element is produced by exactly one thread with the same inner-loop
// order as the serial path, so both backends are bitwise identical and runs
// reproduce exactly regardless of thread count.
enum class Backend { Serial, Parallel };

void set_backend(Backend b);
Backend backend();
bool parallel();

// C[m,n] = A[m,k] * B[k,n]          (accumulate: C += ...)
void gemm_nn(double* c, const double* a, const double* b, int m, int k, int n, bool accumulate);
// C[m,n] = A[m,k] * B[n,k]^T
void gemm_nt(double* c, const double* a, const double* b, int m, int k, int n, bool accumulate);
// C[k,n] = A[m,k]^T * B[m,n]
void gemm_tn(double* c, const double* a, const double* b, int m, int k, int n, bool accumulate);

// Row-wise softmax with max subtraction; x and y may alias.
void softmax_rows(const double* x, double* y, int rows, int cols);
void log_softmax_rows(const double* x, double* y, int rows, int cols);

// y = gain .* (x - mean) / sqrt(var + eps) + bias, per row.
// xhat and inv_std are caches for the backward pass (xhat: rows*cols, inv_std: rows).
void layer_norm_rows(const double* x, const double* gain, const double* bias, double* y, double* xhat,
                     double* inv_std, int rows, int cols, double eps);
void layer_norm_rows_backward(const double* dy, const double* xhat, const double* inv_std,
                              const double* gain, double* dx, double* dgain, double* dbias, int rows,
                              int cols);

// Elementwise helpers.
void add(double* out, const double* a, const double* b, int64_t n, bool accumulate);
void mul(double* out, const double* a, const double* b, int64_t n, bool accumulate);
void axpy(double* y, double alpha, const double* x, int64_t n);  // y += alpha * x
void scale(double* out, const double* x, double alpha, int64_t n, bool accumulate);
void relu(double* y, const double* x, int64_t n);
void relu_backward(double* dx, const double* x, const double* dy, int64_t n);  // dx += dy * (x > 0)

// One Adam update over a flat parameter array. step is 1-based and drives the
// bias correction. weight_decay of 0 (the default everywhere) leaves
// zero-gradient parameters untouched when the moments are zero.
void adam_step(double* param, const double* grad, double* m, double* v, int64_t n, int64_t step,
               double lr, double beta1, double beta2, double eps, double weight_decay);

}  // namespace magent::kernels
