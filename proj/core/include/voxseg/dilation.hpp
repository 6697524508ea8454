// Dilation-rate planning for stacks of atrous convolutions: the worst-case
// gap recurrence, feasibility of a schedule, brute-force coverage of the
// composed kernel support, and receptive-field arithmetic.
#pragma once

#include <span>
#include <string>
#include <vector>

namespace voxseg {

struct DilationSchedule {
  std::vector<int> rates;
  int kernel = 3;
  // Maximum distance between active weights seen from layer l:
  // m[n-1] = r_n, m[l] = max(|m[l+1] - 2 r_l|, r_l).
  std::vector<int> m;
  bool feasible = false;
  std::string reason;  // empty when feasible
};

/// Throws std::invalid_argument for an empty rate list, a non-positive rate,
/// or an even / non-positive kernel size.
///
/// A schedule is feasible when its rates are non-decreasing, start at 1 and
/// m[1] <= kernel. A single layer is feasible iff its rate is 1. Schedules that
/// decrease yet still cover their support are reported with a distinct reason.
DilationSchedule validate_schedule(std::span<const int> rates, int kernel);

struct SupportSet {
  std::vector<int> offsets;  // sorted, distinct; symmetric about 0
  int extent = 0;            // sum of r_l * (K - 1) / 2
  bool fully_covered = false;
};

/// All 1-D offsets sum_l r_l * t_l with |t_l| <= (K - 1) / 2. The 3-D support is
/// the product of three copies, so per-axis coverage decides 3-D coverage.
SupportSet support_coverage(std::span<const int> rates, int kernel);

struct LayerDescriptor {
  int kernel = 3;
  int dilation = 1;
  int stride = 1;
};

/// 1 + sum over layers of (K - 1) * r * (product of earlier strides).
long receptive_field(std::span<const LayerDescriptor> layers);

std::string join_ints(std::span<const int> values, char sep = ',');

}  // namespace voxseg
