#include "voxseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>

namespace voxseg {

namespace {

double probe(const LossBuilder& build_loss) {
  auto tape = Tape<double>::inference();
  const double value = build_loss(tape).item();
  if (!std::isfinite(value)) {
    throw std::runtime_error("finite_difference_check: non-finite loss while probing");
  }
  return value;
}

std::vector<std::size_t> pick_entries(std::size_t n, std::size_t limit, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (limit == 0 || limit >= n) return idx;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(limit);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

std::vector<double> finite_difference_check(const LossBuilder& build_loss,
                                            std::span<Tensor<double>> params,
                                            const GradCheckOptions& options) {
  const double eps = options.epsilon;
  if (!(eps >= 1e-7 && eps <= 1e-3)) {
    throw std::invalid_argument("finite_difference_check: epsilon must lie in [1e-7, 1e-3], got " +
                                std::to_string(eps));
  }
  for (auto& p : params) p.zero_grad();

  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    Tensor<double> loss = build_loss(tape);
    if (!std::isfinite(loss.item())) {
      throw std::runtime_error("finite_difference_check: non-finite loss");
    }
    tape.backward(loss, false);
    for (auto& p : params) {
      if (p.has_grad()) {
        analytic.emplace_back(p.grad().begin(), p.grad().end());
      } else {
        analytic.emplace_back(p.numel(), 0.0);
      }
      p.zero_grad();
    }
  }

  std::mt19937_64 rng(options.seed);
  std::vector<double> worst(params.size(), 0.0);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto values = params[k].data();
    for (std::size_t i : pick_entries(values.size(), options.max_entries_per_param, rng)) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = probe(build_loss);
      values[i] = saved - eps;
      const double down = probe(build_loss);
      values[i] = saved;
      const double numeric = (up - down) / (2 * eps);
      const double err = std::abs(analytic[k][i] - numeric) / std::max(1.0, std::abs(numeric));
      worst[k] = std::max(worst[k], err);
    }
  }
  return worst;
}

}  // namespace voxseg
