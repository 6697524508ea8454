#include "voxseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace voxseg {

void TrainConfig::validate() const {
  adam.validate();
  if (batch_size < 1) throw std::invalid_argument("batch size must be positive");
  if (augment && expand_rotations) {
    throw std::invalid_argument("choose either random rotation augmentation or the 12x expansion");
  }
}

template <typename T>
BatchData<T> make_batch(std::span<const VoxelGrid* const> grids) {
  BatchData<T> b;
  b.input = occupancy_tensor<T>(grids);
  for (const VoxelGrid* g : grids) {
    if (!g->has_labels()) throw std::invalid_argument("training grids need voxel labels");
    b.labels.insert(b.labels.end(), g->labels.begin(), g->labels.end());
    b.mask.insert(b.mask.end(), g->occupancy.begin(), g->occupancy.end());
  }
  return b;
}

template <typename T>
Tensor<T> batch_loss(Tape<T>& tape, Model<T>& model, const BatchData<T>& batch) {
  auto out = model.forward(tape, batch.input);
  return softmax_cross_entropy_masked(tape, out.logits, std::span<const std::int32_t>(batch.labels),
                                      std::span<const std::uint8_t>(batch.mask));
}

template <typename T>
Trainer<T>::Trainer(Model<T>& model, std::vector<LabeledPointCloud> shapes, TrainConfig config)
    : model_(model),
      shapes_(std::move(shapes)),
      config_(config),
      optimizer_(model.named_parameters(), config.adam),
      rng_(config.seed) {
  config_.validate();
  if (shapes_.empty()) throw std::invalid_argument("training set is empty");
  for (const auto& s : shapes_) {
    if (s.category != shapes_.front().category) {
      throw std::invalid_argument("training shapes mix categories \"" + shapes_.front().category +
                                  "\" and \"" + s.category + "\"");
    }
    for (int l : s.labels) {
      if (l > model.spec().labels) {
        throw std::invalid_argument("shape " + s.shape_id + " has label " + std::to_string(l) +
                                    " but the model predicts " + std::to_string(model.spec().labels));
      }
    }
  }
  if (!config_.augment && !config_.expand_rotations) {
    for (const auto& s : shapes_) cached_.push_back(voxelize(s, model.spec().resolution));
  }
}

template <typename T>
EpochStats Trainer<T>::run_epoch() {
  model_.set_mode(Mode::kTrain);
  const int res = model_.spec().resolution;

  // (shape, rotation) samples for this epoch.
  std::vector<std::pair<std::size_t, int>> samples;
  for (std::size_t i = 0; i < shapes_.size(); ++i) {
    if (config_.expand_rotations) {
      for (int n = 0; n < 12; ++n) samples.emplace_back(i, n);
    } else {
      samples.emplace_back(i, 0);
    }
  }
  std::shuffle(samples.begin(), samples.end(), rng_);
  if (config_.augment) {
    std::uniform_int_distribution<int> pick(0, 11);
    for (auto& s : samples) s.second = pick(rng_);
  }

  double loss_sum = 0;
  std::size_t voxels = 0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < samples.size(); start += config_.batch_size) {
    const std::size_t stop = std::min(samples.size(), start + config_.batch_size);
    std::vector<VoxelGrid> owned;
    std::vector<const VoxelGrid*> grids;
    owned.reserve(stop - start);
    for (std::size_t k = start; k < stop; ++k) {
      const auto [idx, rot] = samples[k];
      if (cached_.empty()) {
        owned.push_back(voxelize(rotate_cloud(shapes_[idx], rot), res));
        grids.push_back(&owned.back());
      } else {
        grids.push_back(&cached_[idx]);
      }
    }
    const BatchData<T> batch = make_batch<T>(grids);

    Tape<T> tape;
    auto out = model_.forward(tape, batch.input);
    Tensor<T> loss = softmax_cross_entropy_masked(tape, out.logits,
                                                  std::span<const std::int32_t>(batch.labels),
                                                  std::span<const std::uint8_t>(batch.mask));
    const double value = loss.item();
    if (!std::isfinite(value)) {
      std::string ids;
      for (std::size_t k = start; k < stop; ++k) {
        ids += (ids.empty() ? "" : ", ") + shapes_[samples[k].first].shape_id;
      }
      throw std::runtime_error("non-finite training loss in batch with shapes [" + ids + "]");
    }
    tape.backward(loss, false);
    optimizer_.step();
    optimizer_.zero_grad();

    const std::size_t vol = batch.mask.size() / grids.size();
    const std::size_t k = out.logits.dim(1);
    auto z = out.logits.data();
    std::size_t m = 0;
    for (std::size_t v = 0; v < batch.mask.size(); ++v) {
      if (!batch.mask[v]) continue;
      ++m;
      const std::size_t n = v / vol;
      const std::size_t s = v % vol;
      const T* base = z.data() + n * k * vol + s;
      std::size_t best = 0;
      for (std::size_t j = 1; j < k; ++j) {
        if (base[j * vol] > base[best * vol]) best = j;
      }
      if (static_cast<std::int32_t>(best + 1) == batch.labels[v]) ++correct;
    }
    loss_sum += value * static_cast<double>(m);
    voxels += m;
  }

  ++epochs_;
  EpochStats stats;
  stats.epoch = epochs_;
  stats.loss = loss_sum / static_cast<double>(voxels);
  stats.voxel_accuracy = static_cast<double>(correct) / static_cast<double>(voxels);
  return stats;
}

template <typename T>
std::vector<EpochStats> Trainer<T>::run(const std::function<void(const EpochStats&)>& on_epoch) {
  std::vector<EpochStats> log;
  for (std::size_t e = 0; e < config_.epochs; ++e) {
    log.push_back(run_epoch());
    if (on_epoch) on_epoch(log.back());
  }
  return log;
}

template BatchData<float> make_batch<float>(std::span<const VoxelGrid* const>);
template BatchData<double> make_batch<double>(std::span<const VoxelGrid* const>);
template Tensor<float> batch_loss(Tape<float>&, Model<float>&, const BatchData<float>&);
template Tensor<double> batch_loss(Tape<double>&, Model<double>&, const BatchData<double>&);
template class Trainer<float>;
template class Trainer<double>;

}  // namespace voxseg
