#pragma once

// Dense row-major kernels shared by the forward and backward passes.
// All accumulation is in double.

#include <cstddef>

namespace sop::kernels {

// out[n x m] = a[n x k] * w[k x m] (+ bias[m] when non-null).
void matmul(const double* a, int n, int k, const double* w, int m, const double* bias, double* out);

// out[n x k] += dy[n x m] * w[k x m]^T
void matmul_bt_acc(const double* dy, int n, int m, const double* w, int k, double* out);

// dw[k x m] += a[n x k]^T * dy[n x m]
void matmul_at_acc(const double* a, int n, int k, const double* dy, int m, double* dw);

// db[m] += column sums of dy[n x m]
void colsum_acc(const double* dy, int n, int m, double* db);

double dot(const double* a, const double* b, int n);

// Layer norm over each row; writes normalized-and-scaled rows plus mean / rstd.
void layer_norm(const double* x, int n, int d, const double* gamma, const double* beta, double* out,
                double* mean, double* rstd);

// Same as above for a single row, no saved statistics.
void layer_norm_row(const double* x, int d, const double* gamma, const double* beta, double* out);

// dx += LN backward; dgamma/dbeta accumulated when non-null.
void layer_norm_backward(const double* x, int n, int d, const double* gamma, const double* mean,
                         const double* rstd, const double* dy, double* dx, double* dgamma, double* dbeta);

double gelu(double x);
double gelu_grad(double x);

// In-place numerically stable softmax; returns log of the normalizer (max + log sum exp).
double softmax_inplace(double* z, int n);

}  // namespace sop::kernels
