#include "voxseg/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <stdexcept>
#include <utility>

namespace voxseg {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace {

void check_extents(const Shape& shape) {
  if (shape.empty()) throw std::invalid_argument("tensor shape must have at least one axis");
  for (auto extent : shape) {
    if (extent == 0) {
      throw std::invalid_argument("tensor extents must be positive, got " + shape_str(shape));
    }
  }
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, bool requires_grad) {
  check_extents(shape);
  impl_ = std::make_shared<detail::TensorImpl<T>>();
  impl_->data.assign(shape_numel(shape), T(0));
  impl_->shape = std::move(shape);
  impl_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad) {
  check_extents(shape);
  if (values.size() != shape_numel(shape)) {
    throw std::invalid_argument("tensor of shape " + shape_str(shape) + " needs " +
                                std::to_string(shape_numel(shape)) + " values, got " +
                                std::to_string(values.size()));
  }
  impl_ = std::make_shared<detail::TensorImpl<T>>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
  impl_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  Tensor t(std::move(shape));
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
detail::TensorImpl<T>& Tensor<T>::impl() const {
  if (!impl_) throw std::logic_error("use of an undefined tensor");
  return *impl_;
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  return impl().shape;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw std::out_of_range("axis " + std::to_string(axis) + " out of range for shape " +
                            shape_str(s));
  }
  return s[axis];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw std::invalid_argument("item() needs a single-element tensor, got " +
                                shape_str(shape()));
  }
  return impl().data[0];
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  if (impl().grad.empty()) throw std::logic_error("tensor has no gradient");
  return impl().grad;
}

template <typename T>
std::span<T> Tensor<T>::grad_buffer() const {
  auto& im = impl();
  if (im.grad.empty()) im.grad.assign(im.data.size(), T(0));
  return im.grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  auto& g = impl().grad;
  g.clear();
  g.shrink_to_fit();
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(impl().shape, impl().data, false);
}

namespace {

std::atomic<std::uint64_t> next_tape_id{1};

}  // namespace

template <typename T>
Tape<T>::Tape(bool recording) : id_(next_tape_id.fetch_add(1)), recording_(recording) {}

template <typename T>
Tape<T> Tape<T>::inference() {
  return Tape(false);
}

template <typename T>
void Tape<T>::record(std::string op, std::initializer_list<Tensor<T>> inputs, Tensor<T>& output,
                     BackwardFn backward) {
  if (!recording_) return;
  if (backward_done_) throw std::logic_error("cannot record onto a tape after backward()");
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return;

  auto& out = output.impl();
  out.requires_grad = true;
  out.producer = id_;
  out.producer_index = nodes_.size();
  nodes_.push_back(TapeNode<T>{std::move(op), std::vector<Tensor<T>>(inputs), output,
                               std::move(backward)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss, bool retain_intermediate) {
  if (backward_done_) {
    throw std::logic_error("backward() already ran on this tape; record a new forward pass");
  }
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward() needs a scalar loss, got shape " +
                                shape_str(loss.shape()));
  }
  const auto& li = loss.impl();
  if (!li.requires_grad || li.producer != id_) {
    throw std::invalid_argument("backward(): loss is not connected to any parameter on this tape");
  }

  for (std::size_t i = 0; i <= li.producer_index; ++i) {
    for (const auto& in : nodes_[i].inputs) {
      const auto& ii = in.impl();
      if (ii.requires_grad && ii.producer != id_ && !ii.grad.empty()) {
        throw std::logic_error(
            "leaf gradient already populated; call zero_grad() before another backward pass");
      }
    }
  }

  backward_done_ = true;
  Tensor<T> seed = loss;
  seed.grad_buffer()[0] = T(1);
  for (std::size_t i = li.producer_index + 1; i-- > 0;) {
    auto& node = nodes_[i];
    if (!node.output.has_grad()) continue;  // not on a path to the loss
    node.backward(node.output.grad());
    if (!retain_intermediate) node.output.zero_grad();
  }
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace voxseg
