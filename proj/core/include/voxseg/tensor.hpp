// Dense tensors with reverse-mode differentiation over a recorded tape.
//
// A Tensor is a cheap, shared handle to a contiguous buffer. Operations in
// ops.hpp compute their forward result eagerly and, when any input requires a
// gradient, append a TapeNode holding a backward closure to the caller's
// Tape. Tape::backward() replays those closures in reverse order.
//
// Feature maps use the layout (N, C, D, H, W) with W varying fastest.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace voxseg {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
class Tape;

namespace detail {

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty when no gradient has been populated
  bool requires_grad = false;
  std::uint64_t producer = 0;  // id of the tape that recorded this tensor; 0 for leaves
  std::size_t producer_index = 0;
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  /// Zero-filled tensor. Every extent must be positive.
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return impl().data.size(); }

  std::span<T> data() { return impl().data; }
  std::span<const T> data() const { return impl().data; }
  T item() const;

  bool requires_grad() const { return impl().requires_grad; }
  void set_requires_grad(bool value) { impl().requires_grad = value; }

  bool has_grad() const { return !impl().grad.empty(); }
  /// Throws when no gradient is present.
  std::span<const T> grad() const;
  /// Gradient storage, allocated as zeros on first use. Handles share state,
  /// so this is available through const handles.
  std::span<T> grad_buffer() const;
  /// Releases the gradient buffer.
  void zero_grad();

  /// Deep copy of the values only; the copy is a fresh leaf.
  Tensor detach() const;
  bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }

 private:
  friend class Tape<T>;

  detail::TensorImpl<T>& impl() const;

  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

template <typename T>
struct TapeNode {
  std::string op;
  std::vector<Tensor<T>> inputs;
  Tensor<T> output;
  std::function<void(std::span<const T>)> backward;
};

/// Records differentiable operations for one forward pass.
///
/// Confined to a single thread. A tape may be backpropagated exactly once;
/// gradients of leaf tensors must be cleared with zero_grad() between passes.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const T>)>;

  Tape() : Tape(true) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// A tape that never records; use for inference and finite-difference probes.
  static Tape inference();

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<TapeNode<T>>& nodes() const noexcept { return nodes_; }

  /// Appends a node when recording and any input requires a gradient.
  /// Marks `output` as requiring a gradient in that case.
  void record(std::string op, std::initializer_list<Tensor<T>> inputs, Tensor<T>& output,
              BackwardFn backward);

  /// Populates gradients of every tensor on a path to `loss`. With
  /// `retain_intermediate = false` the gradients of recorded outputs are
  /// released once consumed, leaving only leaf gradients.
  void backward(const Tensor<T>& loss, bool retain_intermediate = true);

 private:
  explicit Tape(bool recording);

  std::vector<TapeNode<T>> nodes_;
  std::uint64_t id_;
  bool recording_ = true;
  bool backward_done_ = false;
};

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace voxseg
