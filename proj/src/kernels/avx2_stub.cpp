// Linked when the AVX2 variants are disabled at configure time.
#include <stdexcept>

#include "instructdiff/kernels/kernels.hpp"

namespace instructdiff::kernels::avx2 {

bool available() { return false; }

namespace {
[[noreturn]] void unavailable() { throw std::logic_error("AVX2 kernels not built"); }
}  // namespace

void gemm(int, int, int, const float*, std::ptrdiff_t, std::ptrdiff_t, const float*, std::ptrdiff_t,
          float*, std::ptrdiff_t, bool) {
  unavailable();
}
void axpy(std::size_t, float, const float*, float*) { unavailable(); }
double dot(std::size_t, const float*, const float*) { unavailable(); }
void adam_update(std::size_t, const AdamStep&, const float*, float*, float*, float*) { unavailable(); }

}  // namespace instructdiff::kernels::avx2
