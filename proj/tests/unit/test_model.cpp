#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "test_util.hpp"
#include "voxseg/gradcheck.hpp"
#include "voxseg/model.hpp"

using namespace voxseg;
using testutil::random_tensor;

namespace {

oracle::Volume5 to_volume(const Tensor<double>& t) {
  oracle::Volume5 v(t.dim(0), t.dim(1), t.dim(2), t.dim(3), t.dim(4));
  std::copy(t.data().begin(), t.data().end(), v.v.begin());
  return v;
}

std::vector<double> values(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

ArchitectureSpec small_spec(Variant v, int res, int labels, int c = 4, int b = 2) {
  auto s = ArchitectureSpec::make(v, res, labels);
  s.channels = c;
  s.bottleneck = b;
  return s;
}

VoxelGrid random_grid(int r, std::mt19937& rng, double density = 0.3) {
  VoxelGrid g;
  g.resolution = r;
  g.occupancy.assign(static_cast<std::size_t>(r) * r * r, 0);
  std::bernoulli_distribution occ(density);
  for (auto& o : g.occupancy) o = occ(rng);
  g.occupancy[0] = 1;
  return g;
}

template <typename T>
void warm_up_statistics(Model<T>& model, const VoxelGrid& grid) {
  const VoxelGrid* ptr = &grid;
  auto tape = Tape<T>::inference();
  model.set_mode(Mode::kTrain);
  model.forward(tape, occupancy_tensor<T>(std::span<const VoxelGrid* const>(&ptr, 1)));
}

Tensor<double> probe(Tape<double>& tape, const Tensor<double>& y, std::uint32_t seed) {
  std::mt19937 rng(seed);
  return sum(tape, mul(tape, y, random_tensor(y.shape(), rng)));
}

}  // namespace

// ---------------------------------------------------------------------------
// Atrous residual block and dense extraction stage

TEST(ResidualBlock, PreservesShapeForAnyRate) {
  Rng rng(1);
  std::mt19937 r2(1);
  auto x = random_tensor({1, 4, 5, 6, 7}, r2);
  for (int r = 1; r <= 6; ++r) {
    AtrousResidualBlock<double> block(4, 2, r, rng);
    auto tape = Tape<double>::inference();
    EXPECT_EQ(block.forward(tape, x).shape(), x.shape());
    EXPECT_EQ(block.dilation(), r);
  }
}

TEST(ResidualBlock, ZeroExpandGivesReluOfInput) {
  Rng rng(2);
  std::mt19937 r2(2);
  AtrousResidualBlock<double> block(3, 2, 2, rng);
  for (auto& v : block.expand().kernel().weight.data()) v = 0;
  for (auto& v : block.expand().kernel().bias.data()) v = 0;
  auto x = random_tensor({2, 3, 4, 4, 4}, r2);
  auto tape = Tape<double>::inference();
  auto y = block.forward(tape, x);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], std::max(0.0, x.data()[i]));
}

TEST(ResidualBlock, GradientCheck) {
  Rng rng(3);
  std::mt19937 r2(3);
  AtrousResidualBlock<double> block(3, 2, 2, rng);
  auto x = random_tensor({2, 3, 4, 4, 4}, r2, true);
  std::vector<Tensor<double>> params = {x};
  block.visit("b", [&](const std::string&, Tensor<double>& t, bool tr) {
    if (tr) params.push_back(t);
  });
  auto errs = finite_difference_check(
      [&](Tape<double>& t) { return probe(t, block.forward(t, x), 4); }, params);
  for (double e : errs) EXPECT_LT(e, 1e-4);
}

TEST(DenseExtraction, ShapeAndSchedule) {
  Rng rng(4);
  SpatialDenseExtraction<float> sde({{1, 3, 5}, 3}, 4, 2, rng);
  EXPECT_EQ(sde.blocks().size(), 3u);
  EXPECT_EQ(sde.schedule().m, (std::vector<int>{1, 3, 5}));
  auto x = Tensor<float>::full({1, 4, 48, 48, 48}, 0.5f);
  auto tape = Tape<float>::inference();
  EXPECT_EQ(sde.forward(tape, x).shape(), x.shape());
  EXPECT_THROW(SpatialDenseExtraction<float>({{2, 4, 8}, 3}, 4, 2, rng), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Attention feature aggregation

TEST(Afa, ZeroWeightsGiveHalf) {
  Rng rng(5);
  std::mt19937 r2(5);
  AfaUnit<double> unit(3, 3, rng);
  unit.visit("a", [](const std::string&, Tensor<double>& t, bool) {
    for (auto& v : t.data()) v = 0;
  });
  auto lo = random_tensor({2, 3, 3, 3, 3}, r2);
  auto hi = random_tensor({2, 3, 3, 3, 3}, r2);
  auto tape = Tape<double>::inference();
  auto r = afa_forward(tape, lo, hi, unit);
  for (double a : r.attention.data()) EXPECT_EQ(a, 0.5);
  for (std::size_t i = 0; i < lo.numel(); ++i) {
    EXPECT_EQ(r.output.data()[i], 0.5 * lo.data()[i] + hi.data()[i]);
  }
}

TEST(Afa, ZeroLowFeaturesPassHighThrough) {
  Rng rng(6);
  std::mt19937 r2(6);
  AfaUnit<double> unit(2, 2, rng);
  auto hi = random_tensor({1, 2, 3, 3, 3}, r2);
  auto tape = Tape<double>::inference();
  auto r = afa_forward(tape, Tensor<double>({1, 2, 3, 3, 3}), hi, unit);
  for (std::size_t i = 0; i < hi.numel(); ++i) EXPECT_EQ(r.output.data()[i], hi.data()[i]);
}

TEST(Afa, SaturatedAttentionBySurgery) {
  Rng rng(7);
  std::mt19937 r2(7);
  AfaUnit<double> unit(2, 2, rng);
  auto lo = random_tensor({1, 2, 3, 3, 3}, r2);
  auto hi = random_tensor({1, 2, 3, 3, 3}, r2);
  for (auto& v : unit.fc2.weight().data()) v = 0;
  for (double bias : {1e4, -1e4}) {
    for (auto& v : unit.fc2.bias().data()) v = bias;
    auto tape = Tape<double>::inference();
    auto r = afa_forward(tape, lo, hi, unit);
    for (std::size_t i = 0; i < lo.numel(); ++i) {
      const double expect = bias > 0 ? lo.data()[i] + hi.data()[i] : hi.data()[i];
      EXPECT_EQ(r.output.data()[i], expect);
    }
  }
}

TEST(Afa, MatchesScalarTranscription) {
  Rng rng(8);
  std::mt19937 r2(8);
  std::uniform_int_distribution<int> cd(1, 4), sd(1, 4), nd(1, 2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t cl = cd(r2), ch = cd(r2), n = nd(r2);
    const std::size_t d = sd(r2), h = sd(r2), w = sd(r2);
    AfaUnit<double> unit(cl, ch, rng);
    for (auto& v : unit.fc1.bias().data()) v = std::uniform_real_distribution<double>(-1, 1)(r2);
    for (auto& v : unit.fc2.bias().data()) v = std::uniform_real_distribution<double>(-1, 1)(r2);
    auto lo = random_tensor({n, cl, d, h, w}, r2);
    auto hi = random_tensor({n, ch, d, h, w}, r2);
    if (cl != ch) {
      auto tape = Tape<double>::inference();
      EXPECT_THROW(afa_forward(tape, lo, hi, unit), std::invalid_argument);
      continue;
    }
    auto tape = Tape<double>::inference();
    auto r = afa_forward(tape, lo, hi, unit);
    auto ref = oracle::afa(to_volume(lo), to_volume(hi), values(unit.fc1.weight()),
                           values(unit.fc1.bias()), values(unit.fc2.weight()),
                           values(unit.fc2.bias()));
    for (std::size_t i = 0; i < r.output.numel(); ++i) {
      ASSERT_NEAR(r.output.data()[i], ref.out.v[i], 1e-12);
    }
    for (std::size_t i = 0; i < ref.attention.size(); ++i) {
      EXPECT_NEAR(r.attention.data()[i], ref.attention[i], 1e-12);
      EXPECT_GT(r.attention.data()[i], 0.0);
      EXPECT_LT(r.attention.data()[i], 1.0);
    }
  }
}

TEST(Afa, GradientCheck) {
  Rng rng(9);
  std::mt19937 r2(9);
  AfaUnit<double> unit(3, 3, rng);
  auto lo = random_tensor({2, 3, 2, 3, 2}, r2, true);
  auto hi = random_tensor({2, 3, 2, 3, 2}, r2, true);
  std::vector<Tensor<double>> params = {lo, hi, unit.fc1.weight(), unit.fc1.bias(),
                                        unit.fc2.weight(), unit.fc2.bias()};
  auto errs = finite_difference_check(
      [&](Tape<double>& t) { return probe(t, afa_forward(t, lo, hi, unit).output, 10); }, params);
  for (double e : errs) EXPECT_LT(e, 1e-4);
}

TEST(Afa, SpatialMismatchRejected) {
  Rng rng(10);
  AfaUnit<double> unit(2, 2, rng);
  auto tape = Tape<double>::inference();
  EXPECT_THROW(
      afa_forward(tape, Tensor<double>({1, 2, 2, 2, 2}), Tensor<double>({1, 2, 3, 3, 3}), unit),
      std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Full networks

TEST(Model, EveryVariantPreservesResolution) {
  std::mt19937 rng(11);
  auto grid = random_grid(16, rng);
  const VoxelGrid* ptr = &grid;
  auto input = occupancy_tensor<float>(std::span<const VoxelGrid* const>(&ptr, 1));
  for (auto v : all_variants()) {
    Model<float> model(small_spec(v, 16, 3), 1);
    auto tape = Tape<float>::inference();
    auto r = model.forward(tape, input);
    EXPECT_EQ(r.logits.shape(), (Shape{1, 3, 16, 16, 16})) << variant_name(v);
    std::vector<std::string> names;
    for (const auto& [n, t] : r.stages) {
      names.push_back(n);
      if (v != Variant::kUNet3d) EXPECT_EQ(t.dim(2), 16u) << n;
    }
    EXPECT_EQ(names, model.stage_names()) << variant_name(v);
    EXPECT_TRUE(r.head_input.same_storage(r.stage("head_input")));
    EXPECT_THROW((void)r.stage("nope"), std::invalid_argument);
  }
}

TEST(Model, UNetBottleneckAt48) {
  std::mt19937 rng(12);
  auto grid = random_grid(48, rng, 0.05);
  const VoxelGrid* ptr = &grid;
  Model<float> model(small_spec(Variant::kUNet3d, 48, 2, 2, 1), 3);
  auto tape = Tape<float>::inference();
  auto r = model.forward(tape, occupancy_tensor<float>(std::span<const VoxelGrid* const>(&ptr, 1)));
  const auto& b = r.stage("bottleneck");
  EXPECT_EQ(b.dim(2), 6u);
  EXPECT_EQ(b.dim(3), 6u);
  EXPECT_EQ(b.dim(4), 6u);
}

TEST(Model, DeterministicConstruction) {
  auto spec = small_spec(Variant::kVoxSegNet, 8, 2);
  Model<float> a(spec, 42), b(spec, 42), c(spec, 43);
  EXPECT_EQ(a.parameter_count(), b.parameter_count());
  auto pa = a.named_parameters(), pb = b.named_parameters(), pc = c.named_parameters();
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].first, pb[i].first);
    for (std::size_t j = 0; j < pa[i].second.numel(); ++j) {
      EXPECT_EQ(pa[i].second.data()[j], pb[i].second.data()[j]);
      any_diff = any_diff || pa[i].second.data()[j] != pc[i].second.data()[j];
    }
  }
  EXPECT_TRUE(any_diff);
}

TEST(Model, AfaUnitsInFusionOrder) {
  Model<float> model(small_spec(Variant::kVoxSegNet, 8, 2), 1);
  auto units = model.afa_units();
  ASSERT_EQ(units.size(), 2u);
  std::string first_name;
  model.visit_state([&](const std::string& name, Tensor<float>& t, bool) {
    if (t.same_storage(units[0]->fc1.weight())) first_name = name;
  });
  EXPECT_EQ(first_name, "afa2.fc1.weight");
  EXPECT_EQ(Model<float>(small_spec(Variant::kSdeConcat, 8, 2), 1).afa_units().size(), 0u);
}

TEST(Model, RejectsWrongInput) {
  Model<float> model(small_spec(Variant::kVoxSegNet, 8, 2), 1);
  auto tape = Tape<float>::inference();
  EXPECT_THROW(model.forward(tape, Tensor<float>({1, 1, 4, 4, 4})), std::invalid_argument);
  EXPECT_THROW(model.forward(tape, Tensor<float>({1, 2, 8, 8, 8})), std::invalid_argument);
}

TEST(Model, SegmentationContract) {
  std::mt19937 rng(13);
  auto grid = random_grid(8, rng);
  Model<double> model(small_spec(Variant::kVoxSegNet, 8, 3), 5);
  EXPECT_THROW(forward_segment(model, grid), std::logic_error);
  warm_up_statistics(model, grid);
  auto s1 = forward_segment(model, grid);
  auto s2 = forward_segment(model, grid);
  EXPECT_EQ(model.mode(), Mode::kTrain);
  EXPECT_EQ(s1.labels, s2.labels);
  const std::size_t vox = 512;
  for (std::size_t v = 0; v < vox; ++v) {
    EXPECT_EQ(s1.labels[v] != 0, grid.occupancy[v] != 0);
    if (!grid.occupancy[v]) continue;
    // Argmax is unchanged by a per-voxel constant shift of all logits.
    const double shift = std::uniform_real_distribution<double>(-50, 50)(rng);
    int best = 0;
    for (int k = 1; k < 3; ++k) {
      if (s1.logits.data()[k * vox + v] + shift > s1.logits.data()[best * vox + v] + shift) best = k;
    }
    EXPECT_EQ(s1.labels[v], best + 1);
  }
  VoxelGrid wrong = random_grid(16, rng);
  EXPECT_THROW(forward_segment(model, wrong), std::invalid_argument);
}

TEST(Model, ActivationExport) {
  std::mt19937 rng(14);
  auto grid = random_grid(8, rng);
  Model<float> model(small_spec(Variant::kVoxSegNet, 8, 2), 6);
  warm_up_statistics(model, grid);
  auto maps = export_activations(model, grid, "sde1");
  ASSERT_EQ(maps.size(), 4u);
  for (const auto& m : maps) EXPECT_EQ(m.size(), 512u);
  EXPECT_THROW(export_activations(model, grid, "sde9"), std::invalid_argument);

}

TEST(Model, ZeroInputGivesConstantInterior) {
  // Zero padding makes the border differ; voxels whose receptive field stays
  // inside the grid see only the bias/BN offsets and agree exactly.
  std::mt19937 rng(16);
  const int r = 16;
  auto grid = random_grid(r, rng);
  Model<float> model(small_spec(Variant::kVoxSegNet, r, 2), 6);
  warm_up_statistics(model, grid);
  VoxelGrid empty = grid;
  std::fill(empty.occupancy.begin(), empty.occupancy.end(), 0);
  const int h = 4;  // stage-1 receptive field is 7
  const std::size_t centre = empty.index(r / 2, r / 2, r / 2);
  for (const auto& m : export_activations(model, empty, "sde1")) {
    for (int z = h; z < r - h; ++z)
      for (int y = h; y < r - h; ++y)
        for (int x = h; x < r - h; ++x) EXPECT_EQ(m[empty.index(x, y, z)], m[centre]);
  }
}

TEST(Model, EndToEndGradientChecks) {
  std::mt19937 rng(15);
  for (auto v : all_variants()) {
    Model<double> model(small_spec(v, 8, 2, 3, 2), 7);
    auto x = random_tensor({1, 1, 8, 8, 8}, rng, false, 0, 1);
    std::vector<std::int32_t> labels(512);
    std::vector<std::uint8_t> mask(512);
    for (std::size_t i = 0; i < 512; ++i) {
      labels[i] = 1 + static_cast<int>(i % 2);
      mask[i] = (i % 3) != 0;
    }
    std::vector<Tensor<double>> params;
    std::uniform_real_distribution<double> jitter(-0.1, 0.1);
    for (auto& [name, t] : model.named_parameters()) {
      // Zero-initialised biases put exact zeros on ReLU kinks (zero branch plus
      // zero skip), where central differences read a slope of 1/2.
      if (name.ends_with(".bias"))
        for (auto& b : t.data()) b = jitter(rng);
      params.push_back(t);
    }
    GradCheckOptions opt;
    opt.max_entries_per_param = 12;
    auto errs = finite_difference_check(
        [&](Tape<double>& t) {
          return softmax_cross_entropy_masked<double>(t, model.forward(t, x).logits, labels, mask);
        },
        params, opt);
    for (std::size_t i = 0; i < errs.size(); ++i) {
      EXPECT_LT(errs[i], 1e-4) << variant_name(v) << " parameter " << i;
    }
  }
}
