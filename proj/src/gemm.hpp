#pragma once

#include <cstdint>

namespace convivit::detail {

// Row-major single-precision GEMM: C = alpha * op(A) * op(B) + beta * C,
// with op(A) of shape m x k and op(B) of shape k x n.
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
          const float* a, const float* b, float* c, bool accumulate);

}  // namespace convivit::detail
