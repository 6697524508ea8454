// Central-difference verification of analytic gradients (64-bit only).
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "voxseg/tensor.hpp"

namespace voxseg {

struct GradCheckOptions {
  double epsilon = 1e-6;
  // 0 probes every entry; otherwise a seeded random subset of this size.
  std::size_t max_entries_per_param = 0;
  std::uint64_t seed = 1;
};

using LossBuilder = std::function<Tensor<double>(Tape<double>&)>;

/// For each tensor in `params`, the max over probed entries of
/// |analytic - numeric| / max(1, |numeric|). The builder is called once on a
/// recording tape and twice per probed entry on an inference tape. Leaves the
/// parameters unchanged and their gradients cleared.
///
/// Throws std::invalid_argument for epsilon outside [1e-7, 1e-3] and
/// std::runtime_error if the loss becomes non-finite while probing.
std::vector<double> finite_difference_check(const LossBuilder& build_loss,
                                            std::span<Tensor<double>> params,
                                            const GradCheckOptions& options = {});

}  // namespace voxseg
