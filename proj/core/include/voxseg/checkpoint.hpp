// VSGC1 checkpoints:
//   "VSGC1" | u32 spec-JSON length | spec JSON | u32 tensor count | tensors |
//   u32 optimizer tensor count | optimizer tensors | u64 step counter
// Each tensor: u16 name length, name, u8 dtype (0 = f32, 1 = f64), u8 rank,
// u32 dims[rank], little-endian payload.
#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "voxseg/adam.hpp"
#include "voxseg/model.hpp"

namespace voxseg {

/// Writes model state (parameters and batch-norm running statistics), the
/// optimizer moments and step counter (empty and 0 without an optimizer).
/// `config_hash`, when given, is stored inside the spec JSON.
template <typename T>
void save_checkpoint(const std::string& path, Model<T>& model, const Adam<T>* optimizer = nullptr,
                     const std::optional<std::string>& config_hash = std::nullopt);

template <typename T>
struct LoadedCheckpoint {
  Model<T> model;
  typename Adam<T>::NamedTensors optimizer_state;
  std::uint64_t step = 0;
  std::optional<std::string> config_hash;
};

/// Throws std::runtime_error on a wrong magic, truncation or trailing bytes,
/// and when stored tensors do not match the architecture (missing, extra or
/// misshapen). Values stored in the other precision are converted.
template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path);

extern template void save_checkpoint<float>(const std::string&, Model<float>&, const Adam<float>*,
                                            const std::optional<std::string>&);
extern template void save_checkpoint<double>(const std::string&, Model<double>&,
                                             const Adam<double>*, const std::optional<std::string>&);
extern template LoadedCheckpoint<float> load_checkpoint<float>(const std::string&);
extern template LoadedCheckpoint<double> load_checkpoint<double>(const std::string&);

}  // namespace voxseg
