#include "sop/kernels.hpp"

#include <algorithm>
#include <cmath>

namespace sop::kernels {

namespace {

// Output columns [j0, j0 + B) of one row, accumulated in registers. Each output
// is still bias + a[0] w[0][j] + a[1] w[1][j] + ... in that order.
template <int B>
inline void row_block(const double* ai, int k, const double* w, int m, const double* bias, int j0, double* o) {
  double acc[B];
  for (int t = 0; t < B; ++t) acc[t] = bias ? bias[j0 + t] : 0.0;
  for (int p = 0; p < k; ++p) {
    const double av = ai[p];
    const double* wr = w + static_cast<std::size_t>(p) * m + j0;
    for (int t = 0; t < B; ++t) acc[t] += av * wr[t];
  }
  for (int t = 0; t < B; ++t) o[j0 + t] = acc[t];
}

}  // namespace

void matmul(const double* a, int n, int k, const double* w, int m, const double* bias, double* out) {
  for (int i = 0; i < n; ++i) {
    double* o = out + static_cast<std::size_t>(i) * m;
    const double* ai = a + static_cast<std::size_t>(i) * k;
    int j = 0;
    for (; j + 16 <= m; j += 16) row_block<16>(ai, k, w, m, bias, j, o);
    for (; j + 4 <= m; j += 4) row_block<4>(ai, k, w, m, bias, j, o);
    for (; j < m; ++j) row_block<1>(ai, k, w, m, bias, j, o);
  }
}

void matmul_bt_acc(const double* dy, int n, int m, const double* w, int k, double* out) {
  for (int i = 0; i < n; ++i) {
    const double* d = dy + static_cast<std::size_t>(i) * m;
    double* o = out + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) o[p] += dot(d, w + static_cast<std::size_t>(p) * m, m);
  }
}

void matmul_at_acc(const double* a, int n, int k, const double* dy, int m, double* dw) {
  for (int i = 0; i < n; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * k;
    const double* d = dy + static_cast<std::size_t>(i) * m;
    for (int p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      double* row = dw + static_cast<std::size_t>(p) * m;
      for (int j = 0; j < m; ++j) row[j] += av * d[j];
    }
  }
}

void colsum_acc(const double* dy, int n, int m, double* db) {
  for (int i = 0; i < n; ++i) {
    const double* d = dy + static_cast<std::size_t>(i) * m;
    for (int j = 0; j < m; ++j) db[j] += d[j];
  }
}

double dot(const double* a, const double* b, int n) {
  // Four partial sums so the loop vectorizes without -ffast-math.
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  int i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

namespace {
constexpr double kLnEps = 1e-5;
}

void layer_norm_row(const double* x, int d, const double* gamma, const double* beta, double* out) {
  double mu = 0;
  for (int j = 0; j < d; ++j) mu += x[j];
  mu /= d;
  double var = 0;
  for (int j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
  var /= d;
  const double rs = 1.0 / std::sqrt(var + kLnEps);
  for (int j = 0; j < d; ++j) out[j] = (x[j] - mu) * rs * gamma[j] + beta[j];
}

void layer_norm(const double* x, int n, int d, const double* gamma, const double* beta, double* out,
                double* mean, double* rstd) {
  for (int i = 0; i < n; ++i) {
    const double* xi = x + static_cast<std::size_t>(i) * d;
    double mu = 0;
    for (int j = 0; j < d; ++j) mu += xi[j];
    mu /= d;
    double var = 0;
    for (int j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= d;
    const double rs = 1.0 / std::sqrt(var + kLnEps);
    mean[i] = mu;
    rstd[i] = rs;
    double* o = out + static_cast<std::size_t>(i) * d;
    for (int j = 0; j < d; ++j) o[j] = (xi[j] - mu) * rs * gamma[j] + beta[j];
  }
}

void layer_norm_backward(const double* x, int n, int d, const double* gamma, const double* mean,
                         const double* rstd, const double* dy, double* dx, double* dgamma, double* dbeta) {
  for (int i = 0; i < n; ++i) {
    const double* xi = x + static_cast<std::size_t>(i) * d;
    const double* g = dy + static_cast<std::size_t>(i) * d;
    double* o = dx + static_cast<std::size_t>(i) * d;
    double sum_dxhat = 0, sum_dxhat_xhat = 0;
    for (int j = 0; j < d; ++j) {
      const double xhat = (xi[j] - mean[i]) * rstd[i];
      const double dxhat = g[j] * gamma[j];
      sum_dxhat += dxhat;
      sum_dxhat_xhat += dxhat * xhat;
      if (dgamma) dgamma[j] += g[j] * xhat;
      if (dbeta) dbeta[j] += g[j];
    }
    sum_dxhat /= d;
    sum_dxhat_xhat /= d;
    for (int j = 0; j < d; ++j) {
      const double xhat = (xi[j] - mean[i]) * rstd[i];
      o[j] += rstd[i] * (g[j] * gamma[j] - sum_dxhat - xhat * sum_dxhat_xhat);
    }
  }
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); }

double gelu_grad(double x) {
  const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

double softmax_inplace(double* z, int n) {
  const double mx = *std::max_element(z, z + n);
  double sum = 0;
  for (int i = 0; i < n; ++i) {
    z[i] = std::exp(z[i] - mx);
    sum += z[i];
  }
  const double inv = 1.0 / sum;
  for (int i = 0; i < n; ++i) z[i] *= inv;
  return mx + std::log(sum);
}

}  // namespace sop::kernels
