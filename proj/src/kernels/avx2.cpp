// Compiled with -mavx2 -mfma; only reached after a CPUID check.
#include <immintrin.h>

#include <algorithm>
#include <cmath>

#include "instructdiff/kernels/kernels.hpp"

namespace instructdiff::kernels::avx2 {

namespace {

// Lane mask with the first `count` (0..8) lanes enabled.
inline __m256i tail_mask(int count) {
  alignas(32) static const int table[16] = {-1, -1, -1, -1, -1, -1, -1, -1, 0, 0, 0, 0, 0, 0, 0, 0};
  return _mm256_loadu_si256(reinterpret_cast<const __m256i*>(table + 8 - count));
}

// Register block of R rows by 16 columns.
template <int R>
inline void block16(int k, const float* a, std::ptrdiff_t a_row, std::ptrdiff_t a_col,
                    const float* b, std::ptrdiff_t ldb, float* c, std::ptrdiff_t ldc) {
  __m256 acc0[R];
  __m256 acc1[R];
  for (int r = 0; r < R; ++r) {
    acc0[r] = _mm256_loadu_ps(c + r * ldc);
    acc1[r] = _mm256_loadu_ps(c + r * ldc + 8);
  }
  for (int p = 0; p < k; ++p) {
    const __m256 b0 = _mm256_loadu_ps(b + p * ldb);
    const __m256 b1 = _mm256_loadu_ps(b + p * ldb + 8);
    for (int r = 0; r < R; ++r) {
      const __m256 av = _mm256_broadcast_ss(a + r * a_row + p * a_col);
      acc0[r] = _mm256_fmadd_ps(av, b0, acc0[r]);
      acc1[r] = _mm256_fmadd_ps(av, b1, acc1[r]);
    }
  }
  for (int r = 0; r < R; ++r) {
    _mm256_storeu_ps(c + r * ldc, acc0[r]);
    _mm256_storeu_ps(c + r * ldc + 8, acc1[r]);
  }
}

// Register block of R rows by up to 8 columns (masked when width < 8).
template <int R>
inline void block8(int k, int width, const float* a, std::ptrdiff_t a_row, std::ptrdiff_t a_col,
                   const float* b, std::ptrdiff_t ldb, float* c, std::ptrdiff_t ldc) {
  const __m256i mask = tail_mask(width);
  __m256 acc[R];
  for (int r = 0; r < R; ++r) acc[r] = _mm256_maskload_ps(c + r * ldc, mask);
  for (int p = 0; p < k; ++p) {
    const __m256 bv = _mm256_maskload_ps(b + p * ldb, mask);
    for (int r = 0; r < R; ++r) {
      const __m256 av = _mm256_broadcast_ss(a + r * a_row + p * a_col);
      acc[r] = _mm256_fmadd_ps(av, bv, acc[r]);
    }
  }
  for (int r = 0; r < R; ++r) _mm256_maskstore_ps(c + r * ldc, mask, acc[r]);
}

template <int R>
inline void row_panel(int n, int k, const float* a, std::ptrdiff_t a_row, std::ptrdiff_t a_col,
                      const float* b, std::ptrdiff_t ldb, float* c, std::ptrdiff_t ldc) {
  int j = 0;
  for (; j + 16 <= n; j += 16) block16<R>(k, a, a_row, a_col, b + j, ldb, c + j, ldc);
  for (; j < n; j += 8) block8<R>(k, std::min(8, n - j), a, a_row, a_col, b + j, ldb, c + j, ldc);
}

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  __m128 shuf = _mm_movehdup_ps(lo);
  __m128 sums = _mm_add_ps(lo, shuf);
  shuf = _mm_movehl_ps(shuf, sums);
  sums = _mm_add_ss(sums, shuf);
  return _mm_cvtss_f32(sums);
}

}  // namespace

bool available() {
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
}

void gemm(int m, int n, int k, const float* a, std::ptrdiff_t a_row, std::ptrdiff_t a_col,
          const float* b, std::ptrdiff_t ldb, float* c, std::ptrdiff_t ldc, bool accumulate) {
  if (!accumulate) {
    for (int i = 0; i < m; ++i) std::fill(c + i * ldc, c + i * ldc + n, 0.0f);
  }
  if (k == 0 || n == 0) return;
  int i = 0;
  for (; i + 4 <= m; i += 4) row_panel<4>(n, k, a + i * a_row, a_row, a_col, b, ldb, c + i * ldc, ldc);
  for (; i < m; ++i) row_panel<1>(n, k, a + i * a_row, a_row, a_col, b, ldb, c + i * ldc, ldc);
}

void axpy(std::size_t n, float alpha, const float* x, float* y) {
  const __m256 av = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(av, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

double dot(std::size_t n, const float* x, const float* y) {
  // Accumulate in double lanes to match the reference's precision class.
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 xv = _mm256_loadu_ps(x + i);
    const __m256 yv = _mm256_loadu_ps(y + i);
    const __m256d xl = _mm256_cvtps_pd(_mm256_castps256_ps128(xv));
    const __m256d xh = _mm256_cvtps_pd(_mm256_extractf128_ps(xv, 1));
    const __m256d yl = _mm256_cvtps_pd(_mm256_castps256_ps128(yv));
    const __m256d yh = _mm256_cvtps_pd(_mm256_extractf128_ps(yv, 1));
    acc0 = _mm256_fmadd_pd(xl, yl, acc0);
    acc1 = _mm256_fmadd_pd(xh, yh, acc1);
  }
  alignas(32) double lanes[4];
  _mm256_store_pd(lanes, _mm256_add_pd(acc0, acc1));
  double total = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
  for (; i < n; ++i) total += static_cast<double>(x[i]) * static_cast<double>(y[i]);
  return total;
}

void adam_update(std::size_t n, const AdamStep& s, const float* grad, float* m, float* v,
                 float* param) {
  const float b1 = static_cast<float>(s.beta1);
  const float b2 = static_cast<float>(s.beta2);
  const float step = static_cast<float>(s.lr / s.bias1);
  const float inv_sqrt_bias2 = static_cast<float>(1.0 / std::sqrt(s.bias2));
  const float eps = static_cast<float>(s.eps);
  const __m256 vb1 = _mm256_set1_ps(b1), vc1 = _mm256_set1_ps(1.0f - b1);
  const __m256 vb2 = _mm256_set1_ps(b2), vc2 = _mm256_set1_ps(1.0f - b2);
  const __m256 vstep = _mm256_set1_ps(step), vib2 = _mm256_set1_ps(inv_sqrt_bias2);
  const __m256 veps = _mm256_set1_ps(eps);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 g = _mm256_loadu_ps(grad + i);
    const __m256 mi = _mm256_add_ps(_mm256_mul_ps(vb1, _mm256_loadu_ps(m + i)), _mm256_mul_ps(vc1, g));
    const __m256 vi = _mm256_add_ps(_mm256_mul_ps(vb2, _mm256_loadu_ps(v + i)),
                                    _mm256_mul_ps(_mm256_mul_ps(vc2, g), g));
    _mm256_storeu_ps(m + i, mi);
    _mm256_storeu_ps(v + i, vi);
    const __m256 denom = _mm256_add_ps(_mm256_mul_ps(_mm256_sqrt_ps(vi), vib2), veps);
    const __m256 upd = _mm256_div_ps(_mm256_mul_ps(vstep, mi), denom);
    _mm256_storeu_ps(param + i, _mm256_sub_ps(_mm256_loadu_ps(param + i), upd));
  }
  for (; i < n; ++i) {
    const float g = grad[i];
    m[i] = b1 * m[i] + (1.0f - b1) * g;
    v[i] = b2 * v[i] + (1.0f - b2) * g * g;
    param[i] -= step * m[i] / (std::sqrt(v[i]) * inv_sqrt_bias2 + eps);
  }
}

}  // namespace instructdiff::kernels::avx2
