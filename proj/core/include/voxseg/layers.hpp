// Parameterised layers on top of ops.hpp. Each owns its tensors and exposes
// them through a visitor so models, optimisers and checkpoints can walk state
// by name.
#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>

#include "voxseg/ops.hpp"

namespace voxseg {

/// (name, tensor, trainable). Non-trainable entries are BN running state.
template <typename T>
using StateVisitor = std::function<void(const std::string&, Tensor<T>&, bool)>;

using Rng = std::mt19937_64;

/// He-normal initialisation, std = sqrt(2 / fan_in).
template <typename T>
Tensor<T> he_normal(const Shape& shape, std::size_t fan_in, Rng& rng);

template <typename T>
class Conv3d {
 public:
  /// Cubic kernel of side `kernel`, stride 1, "same" padding.
  Conv3d(std::size_t in_channels, std::size_t out_channels, int kernel, int dilation, Rng& rng);

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) const { return conv3d(tape, x, kernel_); }
  void visit(const std::string& prefix, const StateVisitor<T>& fn);

  Conv3dKernel<T>& kernel() { return kernel_; }
  const Conv3dKernel<T>& kernel() const { return kernel_; }
  std::size_t in_channels() const { return kernel_.weight.dim(1); }
  std::size_t out_channels() const { return kernel_.weight.dim(0); }

 private:
  Conv3dKernel<T> kernel_;
};

/// Kernel 3, stride 2 transposed convolution doubling each spatial extent.
template <typename T>
class ConvTranspose3d {
 public:
  ConvTranspose3d(std::size_t in_channels, std::size_t out_channels, Rng& rng);

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) const {
    return conv3d_transpose(tape, x, weight_, bias_, 2);
  }
  void visit(const std::string& prefix, const StateVisitor<T>& fn);

 private:
  Tensor<T> weight_;  // (C_in, C_out, 3, 3, 3)
  Tensor<T> bias_;
};

template <typename T>
class BatchNorm3d {
 public:
  explicit BatchNorm3d(std::size_t channels) : state_(channels) {}

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) { return batch_norm3d(tape, x, state_); }
  void visit(const std::string& prefix, const StateVisitor<T>& fn);

  BatchNormState<T>& state() { return state_; }
  const BatchNormState<T>& state() const { return state_; }

 private:
  BatchNormState<T> state_;
};

template <typename T>
class Linear {
 public:
  Linear(std::size_t in_features, std::size_t out_features, Rng& rng);

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) const {
    return fully_connected(tape, x, weight_, bias_);
  }
  void visit(const std::string& prefix, const StateVisitor<T>& fn);

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }
  const Tensor<T>& weight() const { return weight_; }
  const Tensor<T>& bias() const { return bias_; }

 private:
  Tensor<T> weight_;  // (out, in)
  Tensor<T> bias_;
};

/// conv -> batch norm -> relu, the recurring unit of every variant.
template <typename T>
class ConvBnRelu {
 public:
  ConvBnRelu(std::size_t in_channels, std::size_t out_channels, int kernel, int dilation, Rng& rng)
      : conv_(in_channels, out_channels, kernel, dilation, rng), bn_(out_channels) {}

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) {
    return relu(tape, bn_.forward(tape, conv_.forward(tape, x)));
  }
  void visit(const std::string& prefix, const StateVisitor<T>& fn) {
    conv_.visit(prefix + ".conv", fn);
    bn_.visit(prefix + ".bn", fn);
  }
  void for_each_batch_norm(const std::function<void(BatchNormState<T>&)>& fn) { fn(bn_.state()); }

  Conv3d<T>& conv() { return conv_; }
  const Conv3d<T>& conv() const { return conv_; }

 private:
  Conv3d<T> conv_;
  BatchNorm3d<T> bn_;
};

extern template class Conv3d<float>;
extern template class Conv3d<double>;
extern template class ConvTranspose3d<float>;
extern template class ConvTranspose3d<double>;
extern template class BatchNorm3d<float>;
extern template class BatchNorm3d<double>;
extern template class Linear<float>;
extern template class Linear<double>;

}  // namespace voxseg
