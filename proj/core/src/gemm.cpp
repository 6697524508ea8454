#include "gemm.hpp"

#include <Eigen/Core>

#include "voxseg/threads.hpp"

namespace voxseg::detail {

namespace {

template <typename T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ColMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
using Stride = Eigen::OuterStride<>;

// A row-major (rows x cols) block with leading dimension ld, or its transpose
// viewed through the same memory as a column-major matrix.
template <typename T, typename Fn>
void with_operand(Trans t, const T* p, std::size_t rows, std::size_t cols, std::size_t ld,
                  Fn&& fn) {
  const auto r = static_cast<Eigen::Index>(rows);
  const auto c = static_cast<Eigen::Index>(cols);
  if (t == Trans::kNo) {
    fn(Eigen::Map<const RowMajor<T>, 0, Stride>(p, r, c, Stride(static_cast<Eigen::Index>(ld))));
  } else {
    fn(Eigen::Map<const ColMajor<T>, 0, Stride>(p, r, c, Stride(static_cast<Eigen::Index>(ld))));
  }
}

template <typename T>
void gemm_impl(Trans trans_a, Trans trans_b, std::size_t m, std::size_t n, std::size_t k,
               T alpha, const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c,
               std::size_t ldc) {
  Eigen::Map<RowMajor<T>, 0, Stride> out(c, static_cast<Eigen::Index>(m),
                                         static_cast<Eigen::Index>(n),
                                         Stride(static_cast<Eigen::Index>(ldc)));
  if (beta == T(0)) {
    out.setZero();
  } else if (beta != T(1)) {
    out *= beta;
  }
  if (k == 0) return;
  with_operand(trans_a, a, m, k, lda, [&](const auto& ma) {
    with_operand(trans_b, b, k, n, ldb, [&](const auto& mb) { out.noalias() += alpha * ma * mb; });
  });
}

}  // namespace

template <>
void gemm<float>(Trans trans_a, Trans trans_b, std::size_t m, std::size_t n, std::size_t k,
                 float alpha, const float* a, std::size_t lda, const float* b, std::size_t ldb,
                 float beta, float* c, std::size_t ldc) {
  gemm_impl(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

template <>
void gemm<double>(Trans trans_a, Trans trans_b, std::size_t m, std::size_t n, std::size_t k,
                  double alpha, const double* a, std::size_t lda, const double* b,
                  std::size_t ldb, double beta, double* c, std::size_t ldc) {
  gemm_impl(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

}  // namespace voxseg::detail

namespace voxseg {

// Eigen only parallelises when built with OpenMP; otherwise this is a no-op.
void set_num_threads(int threads) { Eigen::setNbThreads(threads < 1 ? 1 : threads); }

}  // namespace voxseg
