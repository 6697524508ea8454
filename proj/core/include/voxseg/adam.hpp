// Bias-corrected Adam.
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "voxseg/layers.hpp"

namespace voxseg {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  /// Requires 0 < beta1 < beta2 < 1 and positive learning rate and epsilon.
  void validate() const;
};

template <typename T>
class Adam {
 public:
  using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

  Adam(NamedTensors params, AdamConfig config);

  /// m <- b1 m + (1 - b1) g; v <- b2 v + (1 - b2) g^2;
  /// theta <- theta - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps).
  /// Throws std::runtime_error, before touching any state, if a parameter
  /// has no gradient or a non-finite one.
  void step();

  /// Releases every parameter gradient.
  void zero_grad();

  std::uint64_t step_count() const { return t_; }
  const AdamConfig& config() const { return config_; }
  const NamedTensors& parameters() const { return params_; }

  /// Moment buffers as "<param>.adam_m" / "<param>.adam_v".
  NamedTensors state() const;
  /// Restores moments written by state(); names and shapes must match.
  void restore(const NamedTensors& state, std::uint64_t step);

 private:
  NamedTensors params_;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
  AdamConfig config_;
  std::uint64_t t_ = 0;
};

extern template class Adam<float>;
extern template class Adam<double>;

}  // namespace voxseg
