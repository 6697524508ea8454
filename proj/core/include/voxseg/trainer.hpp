// Mini-batch training of a segmentation model on labeled point clouds.
#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "voxseg/adam.hpp"
#include "voxseg/model.hpp"

namespace voxseg {

struct TrainConfig {
  AdamConfig adam;
  std::size_t batch_size = 4;
  std::size_t epochs = 1;
  // Draw one of the 12 upright rotations per sample and epoch.
  bool augment = false;
  // Instead, train on all 12 rotations of every shape each epoch.
  bool expand_rotations = false;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double loss = 0;        // mean over every occupied voxel of the epoch
  double voxel_accuracy = 0;
};

/// Network input, 1-based labels and occupancy mask for a stack of grids.
template <typename T>
struct BatchData {
  Tensor<T> input;
  std::vector<std::int32_t> labels;
  std::vector<std::uint8_t> mask;
};

template <typename T>
BatchData<T> make_batch(std::span<const VoxelGrid* const> grids);

/// Masked loss of a batch on the given tape.
template <typename T>
Tensor<T> batch_loss(Tape<T>& tape, Model<T>& model, const BatchData<T>& batch);

template <typename T>
class Trainer {
 public:
  /// `shapes` must be normalized, non-empty and share one category.
  Trainer(Model<T>& model, std::vector<LabeledPointCloud> shapes, TrainConfig config);

  /// One pass over the (shuffled) data. Throws std::runtime_error naming the
  /// batch's shape ids if the loss becomes non-finite.
  EpochStats run_epoch();

  /// Runs config.epochs epochs, calling `on_epoch` after each.
  std::vector<EpochStats> run(const std::function<void(const EpochStats&)>& on_epoch = {});

  Adam<T>& optimizer() { return optimizer_; }
  std::size_t epochs_completed() const { return epochs_; }

 private:
  Model<T>& model_;
  std::vector<LabeledPointCloud> shapes_;
  std::vector<VoxelGrid> cached_;  // unrotated grids
  TrainConfig config_;
  Adam<T> optimizer_;
  std::mt19937_64 rng_;
  std::size_t epochs_ = 0;
};

extern template class Trainer<float>;
extern template class Trainer<double>;

}  // namespace voxseg
