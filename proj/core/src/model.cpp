#include "voxseg/model.hpp"

#include <algorithm>
#include <stdexcept>

namespace voxseg {

namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw std::invalid_argument(message);
}

std::size_t to_size(int v) { return static_cast<std::size_t>(v); }

}  // namespace

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

template <typename T>
AtrousResidualBlock<T>::AtrousResidualBlock(std::size_t channels, std::size_t bottleneck,
                                            int dilation, Rng& rng)
    : reduce_(channels, bottleneck, 1, 1, rng),
      atrous_(bottleneck, bottleneck, 3, dilation, rng),
      expand_(bottleneck, channels, 1, 1, rng) {}

template <typename T>
Tensor<T> AtrousResidualBlock<T>::forward(Tape<T>& tape, const Tensor<T>& x) {
  require(x.rank() == 5 && x.dim(1) == channels(),
          "atrous residual block expects " + std::to_string(channels()) +
              " input channels for the residual path, got " + shape_str(x.shape()));
  Tensor<T> h = reduce_.forward(tape, x);
  h = atrous_.forward(tape, h);
  h = expand_.forward(tape, h);
  return relu(tape, add(tape, h, x));
}

template <typename T>
void AtrousResidualBlock<T>::visit(const std::string& prefix, const StateVisitor<T>& fn) {
  reduce_.visit(prefix + ".reduce", fn);
  atrous_.visit(prefix + ".atrous", fn);
  expand_.visit(prefix + ".expand", fn);
}

template <typename T>
void AtrousResidualBlock<T>::for_each_batch_norm(const BatchNormFn<T>& fn) {
  reduce_.for_each_batch_norm(fn);
  atrous_.for_each_batch_norm(fn);
}

template <typename T>
SpatialDenseExtraction<T>::SpatialDenseExtraction(const StageSpec& stage, std::size_t channels,
                                                  std::size_t bottleneck, Rng& rng)
    : schedule_(validate_schedule(stage.rates, stage.kernel)) {
  if (!schedule_.feasible) {
    throw std::invalid_argument("infeasible dilation schedule [" + join_ints(schedule_.rates) +
                                "]: " + schedule_.reason);
  }
  if (stage.kernel != 3) {
    throw std::invalid_argument("residual blocks use 3x3x3 atrous kernels, got kernel " +
                                std::to_string(stage.kernel));
  }
  blocks_.reserve(stage.rates.size());
  for (int r : stage.rates) blocks_.emplace_back(channels, bottleneck, r, rng);
}

template <typename T>
Tensor<T> SpatialDenseExtraction<T>::forward(Tape<T>& tape, const Tensor<T>& x) {
  Tensor<T> h = x;
  for (auto& b : blocks_) h = b.forward(tape, h);
  return h;
}

template <typename T>
void SpatialDenseExtraction<T>::visit(const std::string& prefix, const StateVisitor<T>& fn) {
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    blocks_[i].visit(prefix + ".arb" + std::to_string(i + 1), fn);
  }
}

template <typename T>
void SpatialDenseExtraction<T>::for_each_batch_norm(const BatchNormFn<T>& fn) {
  for (auto& b : blocks_) b.for_each_batch_norm(fn);
}

template <typename T>
AfaOutput<T> afa_forward(Tape<T>& tape, const Tensor<T>& f_lo, const Tensor<T>& f_hi,
                         const AfaUnit<T>& unit) {
  require(f_lo.rank() == 5 && f_hi.rank() == 5,
          "afa_forward: expected (N, C, D, H, W) inputs, got " + shape_str(f_lo.shape()) +
              " and " + shape_str(f_hi.shape()));
  Shape a = f_lo.shape();
  Shape b = f_hi.shape();
  a[1] = b[1] = 0;
  require(a == b, "afa_forward: spatial extents differ: " + shape_str(f_lo.shape()) + " vs " +
                      shape_str(f_hi.shape()));
  require(f_lo.dim(1) == f_hi.dim(1),
          "afa_forward: element-wise sum needs equal channel widths, got " +
              std::to_string(f_lo.dim(1)) + " and " + std::to_string(f_hi.dim(1)));
  Tensor<T> z = global_avg_pool(tape, concat_channels(tape, f_lo, f_hi));
  Tensor<T> u1 = unit.fc1.forward(tape, z);
  Tensor<T> u2 = unit.fc2.forward(tape, relu(tape, u1));
  Tensor<T> attention = sigmoid(tape, u2);
  Tensor<T> out = add(tape, scale_channels(tape, f_lo, attention), f_hi);
  return {out, attention};
}

template <typename T>
const Tensor<T>& ForwardResult<T>::stage(const std::string& name) const {
  std::string known;
  for (const auto& [n, t] : stages) {
    if (n == name) return t;
    known += known.empty() ? n : ", " + n;
  }
  throw std::invalid_argument("unknown stage \"" + name + "\" (available: " + known + ")");
}

// ---------------------------------------------------------------------------
// Networks
// ---------------------------------------------------------------------------

template <typename T>
class Network {
 public:
  virtual ~Network() = default;
  virtual ForwardResult<T> forward(Tape<T>& tape, const Tensor<T>& input) = 0;
  virtual void visit(const StateVisitor<T>& fn) = 0;
  virtual void for_each_batch_norm(const BatchNormFn<T>& fn) = 0;
  virtual std::vector<std::string> stage_names() const = 0;
  virtual std::vector<AfaUnit<T>*> afa_units() { return {}; }
};

namespace {

/// 1x1x1 MLP applied per voxel: in -> C -> C -> K.
template <typename T>
class PredictionHead {
 public:
  PredictionHead(std::size_t in, std::size_t channels, std::size_t labels, Rng& rng)
      : fc1_(in, channels, 1, 1, rng), fc2_(channels, channels, 1, 1, rng),
        out_(channels, labels, 1, 1, rng) {}

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) {
    return out_.forward(tape, fc2_.forward(tape, fc1_.forward(tape, x)));
  }
  void visit(const std::string& prefix, const StateVisitor<T>& fn) {
    fc1_.visit(prefix + ".fc1", fn);
    fc2_.visit(prefix + ".fc2", fn);
    out_.visit(prefix + ".out", fn);
  }
  void for_each_batch_norm(const BatchNormFn<T>& fn) {
    fc1_.for_each_batch_norm(fn);
    fc2_.for_each_batch_norm(fn);
  }

 private:
  ConvBnRelu<T> fc1_;
  ConvBnRelu<T> fc2_;
  Conv3d<T> out_;
};

// Stem, SDE stages, then either progressive attention fusion from the deepest
// pair downwards (voxsegnet, sde_afa2) or channel concatenation (sde_concat).
template <typename T>
class SdeNetwork final : public Network<T> {
 public:
  SdeNetwork(const ArchitectureSpec& spec, Rng& rng)
      : concat_(spec.variant == Variant::kSdeConcat),
        stem_(1, to_size(spec.channels), 3, 1, rng),
        head_(to_size(spec.channels) * (concat_ ? spec.stages.size() : 1), to_size(spec.channels),
              to_size(spec.labels), rng) {
    const std::size_t c = to_size(spec.channels);
    for (const auto& stage : spec.stages) {
      stages_.emplace_back(stage, c, to_size(spec.bottleneck), rng);
    }
    if (!concat_) {
      for (std::size_t i = 0; i + 1 < stages_.size(); ++i) afa_.emplace_back(c, c, rng);
    }
  }

  ForwardResult<T> forward(Tape<T>& tape, const Tensor<T>& input) override {
    ForwardResult<T> r;
    Tensor<T> h = stem_.forward(tape, input);
    r.stages.emplace_back("stem", h);
    std::vector<Tensor<T>> features;
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      h = stages_[i].forward(tape, h);
      features.push_back(h);
      r.stages.emplace_back("sde" + std::to_string(i + 1), h);
    }
    Tensor<T> g = features.back();
    if (concat_) {
      g = features[0];
      for (std::size_t i = 1; i < features.size(); ++i) g = concat_channels(tape, g, features[i]);
      r.stages.emplace_back("concat", g);
    } else {
      // afa_[i] fuses stage i + 1 (low) into the running result from above.
      for (std::size_t i = features.size() - 1; i-- > 0;) {
        auto fused = afa_forward(tape, features[i], g, afa_[i]);
        g = fused.output;
        const std::string name = "afa" + std::to_string(i + 1);
        r.stages.emplace_back(name, g);
        r.attention.emplace_back(name, fused.attention);
      }
    }
    r.head_input = g;
    r.stages.emplace_back("head_input", g);
    r.logits = head_.forward(tape, g);
    return r;
  }

  void visit(const StateVisitor<T>& fn) override {
    stem_.visit("stem", fn);
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      stages_[i].visit("sde" + std::to_string(i + 1), fn);
    }
    for (std::size_t i = 0; i < afa_.size(); ++i) afa_[i].visit("afa" + std::to_string(i + 1), fn);
    head_.visit("head", fn);
  }

  void for_each_batch_norm(const BatchNormFn<T>& fn) override {
    stem_.for_each_batch_norm(fn);
    for (auto& s : stages_) s.for_each_batch_norm(fn);
    head_.for_each_batch_norm(fn);
  }

  std::vector<std::string> stage_names() const override {
    std::vector<std::string> names{"stem"};
    for (std::size_t i = 0; i < stages_.size(); ++i) names.push_back("sde" + std::to_string(i + 1));
    if (concat_) {
      names.push_back("concat");
    } else {
      for (std::size_t i = stages_.size() - 1; i-- > 0;) names.push_back("afa" + std::to_string(i + 1));
    }
    names.push_back("head_input");
    return names;
  }

  std::vector<AfaUnit<T>*> afa_units() override {
    std::vector<AfaUnit<T>*> out;
    for (std::size_t i = afa_.size(); i-- > 0;) out.push_back(&afa_[i]);
    return out;
  }

 private:
  bool concat_;
  ConvBnRelu<T> stem_;
  std::vector<SpatialDenseExtraction<T>> stages_;
  std::vector<AfaUnit<T>> afa_;
  PredictionHead<T> head_;
};

// Three single residual blocks at rates 2, 3, 4, then three fusion blocks
// that merge the running result with the matching earlier feature map.
template <typename T>
class Atrous3dCnn final : public Network<T> {
 public:
  Atrous3dCnn(const ArchitectureSpec& spec, Rng& rng)
      : stem_(1, to_size(spec.channels), 3, 1, rng),
        head_(to_size(spec.channels), to_size(spec.channels), to_size(spec.labels), rng) {
    const std::size_t c = to_size(spec.channels);
    const std::size_t b = to_size(spec.bottleneck);
    for (int r : {2, 3, 4}) encoders_.emplace_back(c, b, r, rng);
    for (int i = 0; i < 3; ++i) {
      merges_.emplace_back(2 * c, c, 1, 1, rng);
      fusions_.emplace_back(c, b, 1, rng);
    }
  }

  ForwardResult<T> forward(Tape<T>& tape, const Tensor<T>& input) override {
    ForwardResult<T> r;
    Tensor<T> stem = stem_.forward(tape, input);
    r.stages.emplace_back("stem", stem);
    std::vector<Tensor<T>> e;
    Tensor<T> h = stem;
    for (std::size_t i = 0; i < encoders_.size(); ++i) {
      h = encoders_[i].forward(tape, h);
      e.push_back(h);
      r.stages.emplace_back("enc" + std::to_string(i + 1), h);
    }
    const Tensor<T> skips[3] = {e[1], e[0], stem};
    for (std::size_t i = 0; i < 3; ++i) {
      h = merges_[i].forward(tape, concat_channels(tape, h, skips[i]));
      h = fusions_[i].forward(tape, h);
      r.stages.emplace_back("fuse" + std::to_string(i + 1), h);
    }
    r.head_input = h;
    r.stages.emplace_back("head_input", h);
    r.logits = head_.forward(tape, h);
    return r;
  }

  void visit(const StateVisitor<T>& fn) override {
    stem_.visit("stem", fn);
    for (std::size_t i = 0; i < encoders_.size(); ++i) {
      encoders_[i].visit("enc" + std::to_string(i + 1), fn);
    }
    for (std::size_t i = 0; i < merges_.size(); ++i) {
      merges_[i].visit("fuse" + std::to_string(i + 1) + ".merge", fn);
      fusions_[i].visit("fuse" + std::to_string(i + 1) + ".arb", fn);
    }
    head_.visit("head", fn);
  }

  void for_each_batch_norm(const BatchNormFn<T>& fn) override {
    stem_.for_each_batch_norm(fn);
    for (auto& b : encoders_) b.for_each_batch_norm(fn);
    for (std::size_t i = 0; i < merges_.size(); ++i) {
      merges_[i].for_each_batch_norm(fn);
      fusions_[i].for_each_batch_norm(fn);
    }
    head_.for_each_batch_norm(fn);
  }

  std::vector<std::string> stage_names() const override {
    return {"stem", "enc1", "enc2", "enc3", "fuse1", "fuse2", "fuse3", "head_input"};
  }

 private:
  ConvBnRelu<T> stem_;
  std::vector<AtrousResidualBlock<T>> encoders_;
  std::vector<ConvBnRelu<T>> merges_;
  std::vector<AtrousResidualBlock<T>> fusions_;
  PredictionHead<T> head_;
};

template <typename T>
class DeconvBnRelu {
 public:
  DeconvBnRelu(std::size_t in, std::size_t out, Rng& rng) : deconv_(in, out, rng), bn_(out) {}

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) {
    return relu(tape, bn_.forward(tape, deconv_.forward(tape, x)));
  }
  void visit(const std::string& prefix, const StateVisitor<T>& fn) {
    deconv_.visit(prefix + ".deconv", fn);
    bn_.visit(prefix + ".bn", fn);
  }
  void for_each_batch_norm(const BatchNormFn<T>& fn) { fn(bn_.state()); }

 private:
  ConvTranspose3d<T> deconv_;
  BatchNorm3d<T> bn_;
};

template <typename T>
class UNet3d final : public Network<T> {
 public:
  UNet3d(const ArchitectureSpec& spec, Rng& rng)
      : head_(2 * to_size(spec.channels), to_size(spec.channels), to_size(spec.labels), rng) {
    const std::size_t c = to_size(spec.channels);
    encoders_.emplace_back(1, c, 3, 1, rng);
    encoders_.emplace_back(c, c, 3, 1, rng);
    encoders_.emplace_back(c, c, 3, 1, rng);
    decoders_.emplace_back(c, c, rng);
    decoders_.emplace_back(2 * c, c, rng);
    decoders_.emplace_back(2 * c, c, rng);
  }

  ForwardResult<T> forward(Tape<T>& tape, const Tensor<T>& input) override {
    ForwardResult<T> r;
    std::vector<Tensor<T>> skips;
    Tensor<T> h = input;
    for (std::size_t i = 0; i < encoders_.size(); ++i) {
      h = encoders_[i].forward(tape, h);
      skips.push_back(h);
      r.stages.emplace_back("enc" + std::to_string(i + 1), h);
      h = max_pool3d(tape, h, 2);
    }
    r.stages.emplace_back("bottleneck", h);
    for (std::size_t i = 0; i < decoders_.size(); ++i) {
      h = decoders_[i].forward(tape, h);
      h = concat_channels(tape, h, skips[skips.size() - 1 - i]);
      r.stages.emplace_back("dec" + std::to_string(decoders_.size() - i), h);
    }
    r.head_input = h;
    r.stages.emplace_back("head_input", h);
    r.logits = head_.forward(tape, h);
    return r;
  }

  void visit(const StateVisitor<T>& fn) override {
    for (std::size_t i = 0; i < encoders_.size(); ++i) {
      encoders_[i].visit("enc" + std::to_string(i + 1), fn);
    }
    for (std::size_t i = 0; i < decoders_.size(); ++i) {
      decoders_[i].visit("dec" + std::to_string(decoders_.size() - i), fn);
    }
    head_.visit("head", fn);
  }

  void for_each_batch_norm(const BatchNormFn<T>& fn) override {
    for (auto& e : encoders_) e.for_each_batch_norm(fn);
    for (auto& d : decoders_) d.for_each_batch_norm(fn);
    head_.for_each_batch_norm(fn);
  }

  std::vector<std::string> stage_names() const override {
    return {"enc1", "enc2", "enc3", "bottleneck", "dec3", "dec2", "dec1", "head_input"};
  }

 private:
  std::vector<ConvBnRelu<T>> encoders_;
  std::vector<DeconvBnRelu<T>> decoders_;
  PredictionHead<T> head_;
};

}  // namespace

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

template <typename T>
Model<T>::Model(const ArchitectureSpec& spec, std::uint64_t seed) : spec_(spec) {
  spec_.validate();
  Rng rng(seed);
  switch (spec_.variant) {
    case Variant::kVoxSegNet:
    case Variant::kSdeAfa2:
    case Variant::kSdeConcat:
      net_ = std::make_unique<SdeNetwork<T>>(spec_, rng);
      break;
    case Variant::kAtrous3dCnn:
      net_ = std::make_unique<Atrous3dCnn<T>>(spec_, rng);
      break;
    case Variant::kUNet3d:
      net_ = std::make_unique<UNet3d<T>>(spec_, rng);
      break;
  }
}

template <typename T>
Model<T>::~Model() = default;
template <typename T>
Model<T>::Model(Model&&) noexcept = default;
template <typename T>
Model<T>& Model<T>::operator=(Model&&) noexcept = default;

template <typename T>
ForwardResult<T> Model<T>::forward(Tape<T>& tape, const Tensor<T>& input) {
  const auto r = to_size(spec_.resolution);
  require(input.rank() == 5 && input.dim(1) == 1 && input.dim(2) == r && input.dim(3) == r &&
              input.dim(4) == r,
          "model expects (N, 1, " + std::to_string(r) + ", " + std::to_string(r) + ", " +
              std::to_string(r) + ") input, got " + shape_str(input.shape()));
  return net_->forward(tape, input);
}

template <typename T>
void Model<T>::set_mode(Mode mode) {
  mode_ = mode;
  net_->for_each_batch_norm([mode](BatchNormState<T>& s) { s.mode = mode; });
}

template <typename T>
void Model<T>::visit_state(const StateVisitor<T>& fn) {
  net_->visit(fn);
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> Model<T>::named_parameters() {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  net_->visit([&](const std::string& name, Tensor<T>& t, bool trainable) {
    if (trainable) out.emplace_back(name, t);
  });
  return out;
}

template <typename T>
std::size_t Model<T>::parameter_count() {
  std::size_t n = 0;
  for (const auto& [name, t] : named_parameters()) n += t.numel();
  return n;
}

template <typename T>
std::vector<std::string> Model<T>::stage_names() {
  return net_->stage_names();
}

template <typename T>
std::vector<AfaUnit<T>*> Model<T>::afa_units() {
  return net_->afa_units();
}

template <typename T>
Tensor<T> occupancy_tensor(std::span<const VoxelGrid* const> grids) {
  require(!grids.empty(), "occupancy_tensor: no grids");
  const auto r = to_size(grids[0]->resolution);
  const std::size_t vol = r * r * r;
  Tensor<T> out({grids.size(), 1, r, r, r});
  auto d = out.data();
  for (std::size_t i = 0; i < grids.size(); ++i) {
    require(to_size(grids[i]->resolution) == r, "occupancy_tensor: mixed resolutions in batch");
    const auto& occ = grids[i]->occupancy;
    for (std::size_t v = 0; v < vol; ++v) d[i * vol + v] = occ[v] ? T(1) : T(0);
  }
  return out;
}

template <typename T>
Segmentation<T> forward_segment(Model<T>& model, const VoxelGrid& grid) {
  require(grid.resolution == model.spec().resolution,
          "grid resolution " + std::to_string(grid.resolution) + " does not match model resolution " +
              std::to_string(model.spec().resolution));
  const Mode saved = model.mode();
  model.set_mode(Mode::kEval);
  ForwardResult<T> fr;
  try {
    const VoxelGrid* batch[] = {&grid};
    auto tape = Tape<T>::inference();
    fr = model.forward(tape, occupancy_tensor<T>(batch));
  } catch (...) {
    model.set_mode(saved);
    throw;
  }
  model.set_mode(saved);

  Segmentation<T> seg;
  seg.logits = fr.logits;
  seg.head_input = fr.head_input;
  const std::size_t vol = grid.voxel_count();
  const std::size_t k = fr.logits.dim(1);
  seg.labels.assign(vol, 0);
  auto z = fr.logits.data();
  for (std::size_t v = 0; v < vol; ++v) {
    if (!grid.occupancy[v]) continue;
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (z[j * vol + v] > z[best * vol + v]) best = j;
    }
    seg.labels[v] = static_cast<std::uint8_t>(best + 1);
  }
  return seg;
}

template <typename T>
std::vector<std::vector<float>> export_activations(Model<T>& model, const VoxelGrid& grid,
                                                   const std::string& stage) {
  const auto names = model.stage_names();
  if (std::find(names.begin(), names.end(), stage) == names.end()) {
    std::string known;
    for (const auto& n : names) known += known.empty() ? n : ", " + n;
    throw std::invalid_argument("unknown stage \"" + stage + "\" (available: " + known + ")");
  }
  require(grid.resolution == model.spec().resolution,
          "grid resolution " + std::to_string(grid.resolution) + " does not match model resolution " +
              std::to_string(model.spec().resolution));
  const Mode saved = model.mode();
  model.set_mode(Mode::kEval);
  ForwardResult<T> fr;
  try {
    const VoxelGrid* batch[] = {&grid};
    auto tape = Tape<T>::inference();
    fr = model.forward(tape, occupancy_tensor<T>(batch));
  } catch (...) {
    model.set_mode(saved);
    throw;
  }
  model.set_mode(saved);

  const Tensor<T>& t = fr.stage(stage);
  const std::size_t c = t.dim(1);
  const std::size_t vol = t.numel() / c;
  std::vector<std::vector<float>> out(c, std::vector<float>(vol));
  auto d = t.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t v = 0; v < vol; ++v) out[ch][v] = static_cast<float>(d[ch * vol + v]);
  }
  return out;
}

#define VOXSEG_INSTANTIATE_MODEL(T)                                                            \
  template class AtrousResidualBlock<T>;                                                       \
  template class SpatialDenseExtraction<T>;                                                    \
  template AfaOutput<T> afa_forward(Tape<T>&, const Tensor<T>&, const Tensor<T>&,              \
                                    const AfaUnit<T>&);                                        \
  template struct ForwardResult<T>;                                                            \
  template class Model<T>;                                                                     \
  template Tensor<T> occupancy_tensor<T>(std::span<const VoxelGrid* const>);                   \
  template Segmentation<T> forward_segment(Model<T>&, const VoxelGrid&);                       \
  template std::vector<std::vector<float>> export_activations(Model<T>&, const VoxelGrid&,     \
                                                              const std::string&);

VOXSEG_INSTANTIATE_MODEL(float)
VOXSEG_INSTANTIATE_MODEL(double)

#undef VOXSEG_INSTANTIATE_MODEL

}  // namespace voxseg
