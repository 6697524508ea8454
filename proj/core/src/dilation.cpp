#include "voxseg/dilation.hpp"

#include <algorithm>
#include <cstdlib>
#include <stdexcept>

namespace voxseg {

namespace {

void check_inputs(std::span<const int> rates, int kernel) {
  if (rates.empty()) throw std::invalid_argument("dilation schedule needs at least one rate");
  for (int r : rates) {
    if (r < 1) throw std::invalid_argument("dilation rates must be positive, got " + std::to_string(r));
  }
  if (kernel < 1 || kernel % 2 == 0) {
    throw std::invalid_argument("kernel size must be odd and positive, got " + std::to_string(kernel));
  }
}

}  // namespace

std::string join_ints(std::span<const int> values, char sep) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += sep;
    out += std::to_string(values[i]);
  }
  return out;
}

DilationSchedule validate_schedule(std::span<const int> rates, int kernel) {
  check_inputs(rates, kernel);
  DilationSchedule s;
  s.rates.assign(rates.begin(), rates.end());
  s.kernel = kernel;
  const std::size_t n = rates.size();
  s.m.assign(n, 0);
  s.m[n - 1] = rates[n - 1];
  for (std::size_t l = n - 1; l-- > 0;) {
    s.m[l] = std::max(std::abs(s.m[l + 1] - 2 * rates[l]), rates[l]);
  }

  std::size_t drop = 0;
  for (std::size_t l = 0; l + 1 < n; ++l) {
    if (rates[l] > rates[l + 1]) {
      drop = l + 1;
      break;
    }
  }

  if (drop != 0) {
    if (support_coverage(rates, kernel).fully_covered) {
      s.reason = "covers its support but violates the non-decreasing rate ordering (r_" +
                 std::to_string(drop) + " > r_" + std::to_string(drop + 1) + ")";
    } else {
      s.reason = "rates must be non-decreasing (r_" + std::to_string(drop) + " > r_" +
                 std::to_string(drop + 1) + ")";
    }
  } else if (rates[0] != 1) {
    // Only a rate-1 bottom layer fills the gaps left by the layers above it.
    s.reason = "r_1 = " + std::to_string(rates[0]) + " leaves holes; the first rate must be 1";
  } else if (n > 1 && s.m[1] > kernel) {
    s.reason = "M_2 = " + std::to_string(s.m[1]) + " exceeds the kernel size " +
               std::to_string(kernel);
  }
  s.feasible = s.reason.empty();
  return s;
}

SupportSet support_coverage(std::span<const int> rates, int kernel) {
  check_inputs(rates, kernel);
  const int half = (kernel - 1) / 2;
  SupportSet out;
  for (int r : rates) out.extent += r * half;

  // reachable[i] <=> offset i - extent is a sum of taps.
  std::vector<char> reachable(2 * out.extent + 1, 0);
  reachable[out.extent] = 1;
  int span = 0;
  for (int r : rates) {
    std::vector<char> next(reachable.size(), 0);
    for (int i = -span; i <= span; ++i) {
      if (!reachable[i + out.extent]) continue;
      for (int t = -half; t <= half; ++t) next[i + r * t + out.extent] = 1;
    }
    span += r * half;
    reachable.swap(next);
  }
  for (int i = -out.extent; i <= out.extent; ++i) {
    if (reachable[i + out.extent]) out.offsets.push_back(i);
  }
  out.fully_covered = out.offsets.size() == reachable.size();
  return out;
}

long receptive_field(std::span<const LayerDescriptor> layers) {
  long rf = 1;
  long jump = 1;
  for (const auto& d : layers) {
    rf += static_cast<long>(d.kernel - 1) * d.dilation * jump;
    jump *= d.stride;
  }
  return rf;
}

}  // namespace voxseg
