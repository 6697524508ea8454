#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "voxseg/tensor.hpp"

namespace testutil {

template <typename T = double>
voxseg::Tensor<T> random_tensor(voxseg::Shape shape, std::mt19937& rng, bool grad = false,
                                double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  voxseg::Tensor<T> t(std::move(shape), grad);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("voxseg_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testutil
