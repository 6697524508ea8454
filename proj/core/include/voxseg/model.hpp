// Building blocks (atrous residual block, spatial dense extraction stage,
// attention feature aggregation) and the five segmentation networks.
#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "voxseg/arch_spec.hpp"
#include "voxseg/layers.hpp"
#include "voxseg/voxel.hpp"

namespace voxseg {

template <typename T>
using BatchNormFn = std::function<void(BatchNormState<T>&)>;

/// Bottleneck residual block: 1x1x1 (C -> b) + BN + ReLU, 3x3x3 at rate r
/// (b -> b) + BN + ReLU, 1x1x1 (b -> C), add the input, ReLU.
template <typename T>
class AtrousResidualBlock {
 public:
  AtrousResidualBlock(std::size_t channels, std::size_t bottleneck, int dilation, Rng& rng);

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x);
  void visit(const std::string& prefix, const StateVisitor<T>& fn);
  void for_each_batch_norm(const BatchNormFn<T>& fn);

  std::size_t channels() const { return expand_.out_channels(); }
  int dilation() const { return atrous_.conv().kernel().dilation; }
  /// Final 1x1x1 convolution of the residual branch.
  Conv3d<T>& expand() { return expand_; }

 private:
  ConvBnRelu<T> reduce_;
  ConvBnRelu<T> atrous_;
  Conv3d<T> expand_;
};

/// One residual block per dilation rate, applied in schedule order.
template <typename T>
class SpatialDenseExtraction {
 public:
  /// Throws std::invalid_argument, carrying the planner's reason, for an
  /// infeasible schedule.
  SpatialDenseExtraction(const StageSpec& stage, std::size_t channels, std::size_t bottleneck,
                         Rng& rng);

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x);
  void visit(const std::string& prefix, const StateVisitor<T>& fn);
  void for_each_batch_norm(const BatchNormFn<T>& fn);

  const DilationSchedule& schedule() const { return schedule_; }
  std::vector<AtrousResidualBlock<T>>& blocks() { return blocks_; }

 private:
  DilationSchedule schedule_;
  std::vector<AtrousResidualBlock<T>> blocks_;
};

/// Channel-attention fusion parameters. fc1 maps the pooled concatenation
/// (C_lo + C_hi) to C_lo; fc2 maps C_lo to C_lo.
template <typename T>
struct AfaUnit {
  Linear<T> fc1;
  Linear<T> fc2;

  AfaUnit(std::size_t lo_channels, std::size_t hi_channels, Rng& rng)
      : fc1(lo_channels + hi_channels, lo_channels, rng), fc2(lo_channels, lo_channels, rng) {}

  void visit(const std::string& prefix, const StateVisitor<T>& fn) {
    fc1.visit(prefix + ".fc1", fn);
    fc2.visit(prefix + ".fc2", fn);
  }
};

template <typename T>
struct AfaOutput {
  Tensor<T> output;     // f_lo * a + f_hi
  Tensor<T> attention;  // (N, C_lo), entries in (0, 1)
};

/// z = spatial mean of [f_lo, f_hi]; a = sigmoid(W2 relu(W1 z + b1) + b2);
/// returns f_lo scaled channel-wise by a, plus f_hi.
template <typename T>
AfaOutput<T> afa_forward(Tape<T>& tape, const Tensor<T>& f_lo, const Tensor<T>& f_hi,
                         const AfaUnit<T>& unit);

template <typename T>
struct ForwardResult {
  Tensor<T> logits;      // (N, K, R, R, R)
  Tensor<T> head_input;  // features entering the 1x1x1 prediction head
  std::vector<std::pair<std::string, Tensor<T>>> stages;
  std::vector<std::pair<std::string, Tensor<T>>> attention;

  /// Throws std::invalid_argument naming the available stages.
  const Tensor<T>& stage(const std::string& name) const;
};

template <typename T>
class Network;

template <typename T>
class Model {
 public:
  /// Validates the spec and initialises parameters from `seed`.
  Model(const ArchitectureSpec& spec, std::uint64_t seed);
  ~Model();
  Model(Model&&) noexcept;
  Model& operator=(Model&&) noexcept;

  const ArchitectureSpec& spec() const { return spec_; }

  /// `input` is (N, 1, R, R, R) occupancy.
  ForwardResult<T> forward(Tape<T>& tape, const Tensor<T>& input);

  void set_mode(Mode mode);
  Mode mode() const { return mode_; }

  /// Every named tensor: trainable parameters and batch-norm running state.
  void visit_state(const StateVisitor<T>& fn);
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters();
  std::size_t parameter_count();
  std::vector<std::string> stage_names();

  /// Attention units in fusion order, for inspection and weight surgery.
  std::vector<AfaUnit<T>*> afa_units();

 private:
  ArchitectureSpec spec_;
  std::unique_ptr<Network<T>> net_;
  Mode mode_ = Mode::kTrain;
};

/// Stacks occupancy grids into an (N, 1, R, R, R) tensor.
template <typename T>
Tensor<T> occupancy_tensor(std::span<const VoxelGrid* const> grids);

template <typename T>
struct Segmentation {
  Tensor<T> logits;                   // (1, K, R, R, R)
  Tensor<T> head_input;               // (1, C', R, R, R)
  std::vector<std::uint8_t> labels;   // R^3, argmax + 1 at occupied voxels, 0 elsewhere
};

/// Eval-mode forward pass on one grid; the model's mode is restored after.
/// Throws on resolution mismatch or untrained batch norm.
template <typename T>
Segmentation<T> forward_segment(Model<T>& model, const VoxelGrid& grid);

/// One R^3 volume per channel of the named stage output (eval mode).
template <typename T>
std::vector<std::vector<float>> export_activations(Model<T>& model, const VoxelGrid& grid,
                                                   const std::string& stage);

extern template class Model<float>;
extern template class Model<double>;

}  // namespace voxseg
