// VSGV1 volume files: "VSGV1" | u32 R | u8 flags | R^3 occupancy bytes |
// [R^3 label bytes if flags & 1] | [R^3 f32 values if flags & 2], all
// little-endian, x fastest.
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>

#include "voxseg/voxel.hpp"

namespace voxseg {

namespace {

constexpr char kMagic[5] = {'V', 'S', 'G', 'V', '1'};
constexpr std::uint8_t kHasLabels = 1;
constexpr std::uint8_t kHasValues = 2;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out += static_cast<char>((v >> (8 * i)) & 0xff);
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

}  // namespace

void write_volume(const std::string& path, const VoxelGrid& grid, std::span<const float> values) {
  const auto r = static_cast<std::size_t>(grid.resolution);
  const std::size_t n = r * r * r;
  if (grid.resolution < 1 || grid.occupancy.size() != n) {
    throw std::invalid_argument("write_volume: occupancy does not match resolution");
  }
  if (grid.has_labels() && grid.labels.size() != n) {
    throw std::invalid_argument("write_volume: label volume does not match resolution");
  }
  if (!values.empty() && values.size() != n) {
    throw std::invalid_argument("write_volume: value volume does not match resolution");
  }
  std::string out(kMagic, sizeof kMagic);
  put_u32(out, static_cast<std::uint32_t>(grid.resolution));
  out += static_cast<char>((grid.has_labels() ? kHasLabels : 0) | (values.empty() ? 0 : kHasValues));
  out.append(reinterpret_cast<const char*>(grid.occupancy.data()), n);
  if (grid.has_labels()) out.append(reinterpret_cast<const char*>(grid.labels.data()), n);
  for (float v : values) put_u32(out, std::bit_cast<std::uint32_t>(v));

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("failed writing " + path);
}

Volume read_volume(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open volume " + path);
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 10 || std::memcmp(p, kMagic, sizeof kMagic) != 0) {
    throw std::runtime_error(path + ": not a volume file (expected magic \"VSGV1\")");
  }
  const std::uint32_t r = get_u32(p + 5);
  const std::uint8_t flags = p[9];
  if (r == 0 || r > 1024) throw std::runtime_error(path + ": implausible resolution " + std::to_string(r));
  if (flags & ~(kHasLabels | kHasValues)) {
    throw std::runtime_error(path + ": unknown flag bits " + std::to_string(flags));
  }
  const std::size_t n = static_cast<std::size_t>(r) * r * r;
  const std::size_t expected = 10 + n + ((flags & kHasLabels) ? n : 0) + ((flags & kHasValues) ? 4 * n : 0);
  if (bytes.size() != expected) {
    throw std::runtime_error(path + ": expected " + std::to_string(expected) + " bytes, found " +
                             std::to_string(bytes.size()) + " (truncated or trailing data)");
  }
  Volume vol;
  vol.grid.resolution = static_cast<int>(r);
  const unsigned char* q = p + 10;
  vol.grid.occupancy.assign(q, q + n);
  q += n;
  if (flags & kHasLabels) {
    vol.grid.labels.assign(q, q + n);
    q += n;
  }
  if (flags & kHasValues) {
    vol.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) vol.values[i] = std::bit_cast<float>(get_u32(q + 4 * i));
  }
  return vol;
}

}  // namespace voxseg
