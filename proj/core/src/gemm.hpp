// Row-major general matrix multiply on top of Eigen's blocked kernels.
#pragma once

#include <cstddef>

namespace voxseg::detail {

enum class Trans { kNo, kYes };

/// C = alpha * op(A) * op(B) + beta * C with op(A) of size m x k and op(B) k x n.
template <typename T>
void gemm(Trans trans_a, Trans trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c,
          std::size_t ldc);

}  // namespace voxseg::detail
