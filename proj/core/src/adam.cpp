#include "voxseg/adam.hpp"

#include <cmath>
#include <map>
#include <stdexcept>

namespace voxseg {

void AdamConfig::validate() const {
  if (!(learning_rate > 0)) throw std::invalid_argument("learning rate must be positive");
  if (!(epsilon > 0)) throw std::invalid_argument("Adam epsilon must be positive");
  if (!(0 < beta1 && beta1 < beta2 && beta2 < 1)) {
    throw std::invalid_argument("Adam betas must satisfy 0 < beta1 < beta2 < 1");
  }
}

template <typename T>
Adam<T>::Adam(NamedTensors params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  config_.validate();
  for (const auto& [name, p] : params_) {
    m_.emplace_back(p.shape());
    v_.emplace_back(p.shape());
  }
}

template <typename T>
void Adam<T>::step() {
  for (const auto& [name, p] : params_) {
    if (!p.has_grad()) throw std::runtime_error("Adam: parameter " + name + " has no gradient");
    const auto g = p.grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!std::isfinite(static_cast<double>(g[i]))) {
        throw std::runtime_error("Adam: non-finite gradient " + std::to_string(g[i]) + " in " +
                                 name + " at entry " + std::to_string(i));
      }
    }
  }
  ++t_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto theta = params_[k].second.data();
    const auto g = params_[k].second.grad();
    auto m = m_[k].data();
    auto v = v_[k].data();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = g[i];
      const double mi = b1 * m[i] + (1.0 - b1) * gi;
      const double vi = b2 * v[i] + (1.0 - b2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double m_hat = mi / c1;
      const double v_hat = vi / c2;
      theta[i] = static_cast<T>(theta[i] - config_.learning_rate * m_hat / (std::sqrt(v_hat) + config_.epsilon));
    }
  }
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto& [name, p] : params_) p.zero_grad();
}

template <typename T>
typename Adam<T>::NamedTensors Adam<T>::state() const {
  NamedTensors out;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    out.emplace_back(params_[k].first + ".adam_m", m_[k]);
    out.emplace_back(params_[k].first + ".adam_v", v_[k]);
  }
  return out;
}

template <typename T>
void Adam<T>::restore(const NamedTensors& state, std::uint64_t step) {
  std::map<std::string, Tensor<T>> by_name;
  for (const auto& [name, t] : state) by_name.emplace(name, t);
  if (by_name.size() != 2 * params_.size()) {
    throw std::invalid_argument("optimizer state has " + std::to_string(by_name.size()) +
                                " tensors, expected " + std::to_string(2 * params_.size()));
  }
  for (std::size_t k = 0; k < params_.size(); ++k) {
    for (auto* dst : {&m_[k], &v_[k]}) {
      const std::string name = params_[k].first + (dst == &m_[k] ? ".adam_m" : ".adam_v");
      auto it = by_name.find(name);
      if (it == by_name.end()) throw std::invalid_argument("optimizer state lacks " + name);
      if (it->second.shape() != dst->shape()) {
        throw std::invalid_argument("optimizer state " + name + " has shape " +
                                    shape_str(it->second.shape()) + ", expected " +
                                    shape_str(dst->shape()));
      }
      *dst = it->second.detach();
    }
  }
  t_ = step;
}

template class Adam<float>;
template class Adam<double>;

}  // namespace voxseg
