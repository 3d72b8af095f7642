#include <algorithm>
#include <cmath>

#include "instructdiff/kernels/kernels.hpp"

namespace instructdiff::kernels::scalar {

template <class T>
void gemm(int m, int n, int k, const T* a, std::ptrdiff_t a_row, std::ptrdiff_t a_col, const T* b,
          std::ptrdiff_t ldb, T* c, std::ptrdiff_t ldc, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    T* crow = c + i * ldc;
    if (!accumulate) std::fill(crow, crow + n, T{0});
    for (int p = 0; p < k; ++p) {
      const T aip = a[i * a_row + p * a_col];
      const T* brow = b + p * ldb;
      for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

template <class T>
void axpy(std::size_t n, T alpha, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <class T>
double dot(std::size_t n, const T* x, const T* y) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(x[i]) * static_cast<double>(y[i]);
  return acc;
}

template <class T>
void adam_update(std::size_t n, const AdamStep& s, const T* grad, T* m, T* v, T* param) {
  const T b1 = static_cast<T>(s.beta1);
  const T b2 = static_cast<T>(s.beta2);
  const T step = static_cast<T>(s.lr / s.bias1);
  const T inv_sqrt_bias2 = static_cast<T>(1.0 / std::sqrt(s.bias2));
  const T eps = static_cast<T>(s.eps);
  for (std::size_t i = 0; i < n; ++i) {
    const T g = grad[i];
    m[i] = b1 * m[i] + (T{1} - b1) * g;
    v[i] = b2 * v[i] + (T{1} - b2) * g * g;
    param[i] -= step * m[i] / (std::sqrt(v[i]) * inv_sqrt_bias2 + eps);
  }
}

template void gemm<float>(int, int, int, const float*, std::ptrdiff_t, std::ptrdiff_t, const float*,
                          std::ptrdiff_t, float*, std::ptrdiff_t, bool);
template void gemm<double>(int, int, int, const double*, std::ptrdiff_t, std::ptrdiff_t,
                           const double*, std::ptrdiff_t, double*, std::ptrdiff_t, bool);
template void axpy<float>(std::size_t, float, const float*, float*);
template void axpy<double>(std::size_t, double, const double*, double*);
template double dot<float>(std::size_t, const float*, const float*);
template double dot<double>(std::size_t, const double*, const double*);
template void adam_update<float>(std::size_t, const AdamStep&, const float*, float*, float*, float*);
template void adam_update<double>(std::size_t, const AdamStep&, const double*, double*, double*,
                                  double*);

}  // namespace instructdiff::kernels::scalar
