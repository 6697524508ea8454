#include "voxseg/layers.hpp"

#include <cmath>

namespace voxseg {

template <typename T>
Tensor<T> he_normal(const Shape& shape, std::size_t fan_in, Rng& rng) {
  Tensor<T> t(shape, true);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
Conv3d<T>::Conv3d(std::size_t in_channels, std::size_t out_channels, int kernel, int dilation,
                  Rng& rng) {
  const auto k = static_cast<std::size_t>(kernel);
  auto weight = he_normal<T>({out_channels, in_channels, k, k, k}, in_channels * k * k * k, rng);
  Tensor<T> bias(Shape{out_channels}, true);
  kernel_ = Conv3dKernel<T>::same(std::move(weight), std::move(bias), dilation);
}

template <typename T>
void Conv3d<T>::visit(const std::string& prefix, const StateVisitor<T>& fn) {
  fn(prefix + ".weight", kernel_.weight, true);
  fn(prefix + ".bias", kernel_.bias, true);
}

template <typename T>
ConvTranspose3d<T>::ConvTranspose3d(std::size_t in_channels, std::size_t out_channels, Rng& rng)
    : weight_(he_normal<T>({in_channels, out_channels, 3, 3, 3}, in_channels * 27, rng)),
      bias_(Shape{out_channels}, true) {}

template <typename T>
void ConvTranspose3d<T>::visit(const std::string& prefix, const StateVisitor<T>& fn) {
  fn(prefix + ".weight", weight_, true);
  fn(prefix + ".bias", bias_, true);
}

template <typename T>
void BatchNorm3d<T>::visit(const std::string& prefix, const StateVisitor<T>& fn) {
  fn(prefix + ".gamma", state_.gamma, true);
  fn(prefix + ".beta", state_.beta, true);
  fn(prefix + ".running_mean", state_.running_mean, false);
  fn(prefix + ".running_var", state_.running_var, false);
  fn(prefix + ".tracked", state_.tracked, false);
}

template <typename T>
Linear<T>::Linear(std::size_t in_features, std::size_t out_features, Rng& rng)
    : weight_(he_normal<T>({out_features, in_features}, in_features, rng)),
      bias_(Shape{out_features}, true) {}

template <typename T>
void Linear<T>::visit(const std::string& prefix, const StateVisitor<T>& fn) {
  fn(prefix + ".weight", weight_, true);
  fn(prefix + ".bias", bias_, true);
}

template Tensor<float> he_normal<float>(const Shape&, std::size_t, Rng&);
template Tensor<double> he_normal<double>(const Shape&, std::size_t, Rng&);
template class Conv3d<float>;
template class Conv3d<double>;
template class ConvTranspose3d<float>;
template class ConvTranspose3d<double>;
template class BatchNorm3d<float>;
template class BatchNorm3d<double>;
template class Linear<float>;
template class Linear<double>;

}  // namespace voxseg
