#include <atomic>
#include <cstdlib>
#include <string>

#include "instructdiff/kernels/kernels.hpp"

namespace instructdiff::kernels {

namespace {

Isa initial_isa() {
  if (const char* env = std::getenv("INSTRUCTDIFF_ISA")) {
    if (std::string(env) == "scalar") return Isa::kScalar;
  }
  return detected_isa();
}

std::atomic<Isa>& current() {
  static std::atomic<Isa> isa{initial_isa()};
  return isa;
}

bool use_avx2() { return current().load(std::memory_order_relaxed) == Isa::kAvx2; }

}  // namespace

std::string_view isa_name(Isa isa) { return isa == Isa::kAvx2 ? "avx2" : "scalar"; }

Isa detected_isa() {
  static const Isa isa = avx2::available() ? Isa::kAvx2 : Isa::kScalar;
  return isa;
}

Isa active_isa() { return current().load(); }

ScopedIsa::ScopedIsa(Isa isa) : previous_(current().load()) {
  if (isa == Isa::kAvx2 && detected_isa() != Isa::kAvx2) isa = Isa::kScalar;
  current().store(isa);
}

ScopedIsa::~ScopedIsa() { current().store(previous_); }

void gemm(int m, int n, int k, const float* a, std::ptrdiff_t a_row, std::ptrdiff_t a_col,
          const float* b, std::ptrdiff_t ldb, float* c, std::ptrdiff_t ldc, bool accumulate) {
  if (use_avx2()) return avx2::gemm(m, n, k, a, a_row, a_col, b, ldb, c, ldc, accumulate);
  scalar::gemm(m, n, k, a, a_row, a_col, b, ldb, c, ldc, accumulate);
}

void gemm(int m, int n, int k, const double* a, std::ptrdiff_t a_row, std::ptrdiff_t a_col,
          const double* b, std::ptrdiff_t ldb, double* c, std::ptrdiff_t ldc, bool accumulate) {
  scalar::gemm(m, n, k, a, a_row, a_col, b, ldb, c, ldc, accumulate);
}

void axpy(std::size_t n, float alpha, const float* x, float* y) {
  if (use_avx2()) return avx2::axpy(n, alpha, x, y);
  scalar::axpy(n, alpha, x, y);
}

void axpy(std::size_t n, double alpha, const double* x, double* y) { scalar::axpy(n, alpha, x, y); }

double dot(std::size_t n, const float* x, const float* y) {
  if (use_avx2()) return avx2::dot(n, x, y);
  return scalar::dot(n, x, y);
}

double dot(std::size_t n, const double* x, const double* y) { return scalar::dot(n, x, y); }

void adam_update(std::size_t n, const AdamStep& step, const float* grad, float* m, float* v,
                 float* param) {
  if (use_avx2()) return avx2::adam_update(n, step, grad, m, v, param);
  scalar::adam_update(n, step, grad, m, v, param);
}

void adam_update(std::size_t n, const AdamStep& step, const double* grad, double* m, double* v,
                 double* param) {
  scalar::adam_update(n, step, grad, m, v, param);
}

}  // namespace instructdiff::kernels
