#pragma once

#include <cstddef>
#include <string_view>

// Dense arithmetic kernels used by the backbone and the optimizer.
//
// Every kernel has a scalar reference implementation (any of float/double)
// and, for float, an AVX2+FMA variant. The variant is chosen at runtime from
// CPUID unless INSTRUCTDIFF_ISA=scalar is set or a ScopedIsa override is live.
// The two paths agree to rounding (FMA contraction and summation order
// differ), which tests/unit/kernels_test.cpp pins down.
namespace instructdiff::kernels {

enum class Isa { kScalar, kAvx2 };

std::string_view isa_name(Isa isa);

// Best ISA the CPU and the build support.
Isa detected_isa();

// ISA currently used by the dispatching entry points.
Isa active_isa();

// Overrides the active ISA for the lifetime of the object (tests, benchmarks).
class ScopedIsa {
 public:
  explicit ScopedIsa(Isa isa);
  ~ScopedIsa();
  ScopedIsa(const ScopedIsa&) = delete;
  ScopedIsa& operator=(const ScopedIsa&) = delete;

 private:
  Isa previous_;
};

// C[m x n] (+)= A[m x k] * B[k x n].
// A is addressed as a[i * a_row + p * a_col], so a transposed operand is just
// a stride swap. B and C are row-major with leading dimensions ldb and ldc.
void gemm(int m, int n, int k, const float* a, std::ptrdiff_t a_row, std::ptrdiff_t a_col,
          const float* b, std::ptrdiff_t ldb, float* c, std::ptrdiff_t ldc, bool accumulate);
void gemm(int m, int n, int k, const double* a, std::ptrdiff_t a_row, std::ptrdiff_t a_col,
          const double* b, std::ptrdiff_t ldb, double* c, std::ptrdiff_t ldc, bool accumulate);

// y += alpha * x
void axpy(std::size_t n, float alpha, const float* x, float* y);
void axpy(std::size_t n, double alpha, const double* x, double* y);

// sum_i x[i] * y[i]
double dot(std::size_t n, const float* x, const float* y);
double dot(std::size_t n, const double* x, const double* y);

struct AdamStep {
  double lr;
  double beta1;
  double beta2;
  double eps;
  double bias1;  // 1 - beta1^t
  double bias2;  // 1 - beta2^t
};

// One bias-corrected Adam update of param in place; m and v are updated too.
void adam_update(std::size_t n, const AdamStep& step, const float* grad, float* m, float* v,
                 float* param);
void adam_update(std::size_t n, const AdamStep& step, const double* grad, double* m, double* v,
                 double* param);

// Explicit access to each path, for equivalence tests.
namespace scalar {
template <class T>
void gemm(int m, int n, int k, const T* a, std::ptrdiff_t a_row, std::ptrdiff_t a_col, const T* b,
          std::ptrdiff_t ldb, T* c, std::ptrdiff_t ldc, bool accumulate);
template <class T>
void axpy(std::size_t n, T alpha, const T* x, T* y);
template <class T>
double dot(std::size_t n, const T* x, const T* y);
template <class T>
void adam_update(std::size_t n, const AdamStep& step, const T* grad, T* m, T* v, T* param);
}  // namespace scalar

namespace avx2 {
bool available();
void gemm(int m, int n, int k, const float* a, std::ptrdiff_t a_row, std::ptrdiff_t a_col,
          const float* b, std::ptrdiff_t ldb, float* c, std::ptrdiff_t ldc, bool accumulate);
void axpy(std::size_t n, float alpha, const float* x, float* y);
double dot(std::size_t n, const float* x, const float* y);
void adam_update(std::size_t n, const AdamStep& step, const float* grad, float* m, float* v,
                 float* param);
}  // namespace avx2

}  // namespace instructdiff::kernels
