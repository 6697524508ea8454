// Differentiable operations. Each records its backward rule on the tape passed
// in; pass Tape<T>::inference() when no gradients are wanted.
#pragma once

#include <array>
#include <cstdint>
#include <span>

#include "voxseg/tensor.hpp"

namespace voxseg {

enum class Mode { kTrain, kEval };

// ---------------------------------------------------------------------------
// Element-wise and structural ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T factor);

/// Sum of all entries, shape [1].
template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& a);

/// Multiplies channel c of `features` (N, C, ...) by `weights` (N, C).
template <typename T>
Tensor<T> scale_channels(Tape<T>& tape, const Tensor<T>& features, const Tensor<T>& weights);

/// Concatenates (N, C1, ...) and (N, C2, ...) into (N, C1 + C2, ...).
template <typename T>
Tensor<T> concat_channels(Tape<T>& tape, const Tensor<T>& lo, const Tensor<T>& hi);

/// Channels [begin, begin + count) of a (N, C, ...) tensor.
template <typename T>
Tensor<T> slice_channels(Tape<T>& tape, const Tensor<T>& x, std::size_t begin, std::size_t count);

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x);

template <typename T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& x);

/// Logistic function in the overflow-free two-branch form.
template <typename T>
T stable_sigmoid(T x);

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Weights (C_out, C_in, L, M, N), bias (C_out) and sampling geometry.
///
/// Output voxel o reads input taps at o * stride - padding + dilation * t for
/// t in [0, K). With padding (K - 1) * dilation / 2 this is a centred kernel.
template <typename T>
struct Conv3dKernel {
  Tensor<T> weight;
  Tensor<T> bias;
  int dilation = 1;
  int stride = 1;
  std::array<int, 3> padding{0, 0, 0};

  /// Stride-1 kernel whose output has the input's spatial extents.
  /// Rejects even kernel sizes.
  static Conv3dKernel same(Tensor<T> weight, Tensor<T> bias, int dilation);
};

/// Padding that preserves extents at stride 1; throws for even kernels.
int same_padding(int kernel, int dilation);

/// Effective extent (K - 1) * r + 1 of a dilated kernel.
int effective_extent(int kernel, int dilation);

/// 3D atrous convolution over (N, C_in, D, H, W) with zero padding.
template <typename T>
Tensor<T> conv3d(Tape<T>& tape, const Tensor<T>& input, const Conv3dKernel<T>& kernel);

/// Transposed convolution with kernel 3, stride 2, padding 1 and output
/// padding 1: (N, C_in, D, H, W) -> (N, C_out, 2D, 2H, 2W). Weights are laid
/// out (C_in, C_out, 3, 3, 3), i.e. as the strided convolution it is the
/// adjoint of.
template <typename T>
Tensor<T> conv3d_transpose(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& weight,
                           const Tensor<T>& bias, int stride = 2);

/// 2x2x2 max pooling with stride 2. Ties resolve to the first tap in raster
/// order (x fastest).
template <typename T>
Tensor<T> max_pool3d(Tape<T>& tape, const Tensor<T>& input, int stride = 2);

// ---------------------------------------------------------------------------
// Normalisation, pooling, dense layers, loss
// ---------------------------------------------------------------------------

template <typename T>
struct BatchNormState {
  Tensor<T> gamma;         // (C), learned
  Tensor<T> beta;          // (C), learned
  Tensor<T> running_mean;  // (C)
  Tensor<T> running_var;   // (C)
  Tensor<T> tracked;       // (1): number of train-mode updates so far
  T momentum = T(0.9);
  T epsilon = T(1e-5);
  Mode mode = Mode::kTrain;

  explicit BatchNormState(std::size_t channels);
  std::size_t channels() const { return gamma.numel(); }
  bool has_statistics() const { return tracked.data()[0] > T(0); }
};

/// Per-channel batch normalisation over (N, C, D, H, W). In train mode the
/// batch statistics are used and folded into the running averages as
/// running = momentum * running + (1 - momentum) * batch; the first update
/// copies the batch statistics. Variances are biased (divide by count).
template <typename T>
Tensor<T> batch_norm3d(Tape<T>& tape, const Tensor<T>& input, BatchNormState<T>& state);

/// Spatial mean per channel: (N, C, ...) -> (N, C).
template <typename T>
Tensor<T> global_avg_pool(Tape<T>& tape, const Tensor<T>& input);

/// W * x + b for x of shape (N, in) or (in); W is (out, in), b is (out).
template <typename T>
Tensor<T> fully_connected(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& weight,
                          const Tensor<T>& bias);

/// Masked softmax cross-entropy over logits (N, K, D, H, W).
///
/// `labels` and `mask` hold one entry per voxel in (N, D, H, W) order. Labels
/// are 1-based and only read where mask is non-zero. The loss is the mean of
/// -log softmax(true label) over all masked voxels in the batch.
template <typename T>
Tensor<T> softmax_cross_entropy_masked(Tape<T>& tape, const Tensor<T>& logits,
                                       std::span<const std::int32_t> labels,
                                       std::span<const std::uint8_t> mask);

}  // namespace voxseg
