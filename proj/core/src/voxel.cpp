#include "voxseg/voxel.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "voxseg/metrics.hpp"

namespace voxseg {

namespace {

constexpr double kUnitTolerance = 1e-9;

void check_cloud(const LabeledPointCloud& cloud) {
  if (cloud.points.empty()) throw std::invalid_argument("point cloud is empty");
  if (cloud.labels.size() != cloud.points.size()) {
    throw std::invalid_argument("point cloud has " + std::to_string(cloud.points.size()) +
                                " points but " + std::to_string(cloud.labels.size()) + " labels");
  }
}

void check_normalized(const LabeledPointCloud& cloud) {
  for (std::size_t i = 0; i < cloud.points.size(); ++i) {
    for (double c : cloud.points[i]) {
      if (!(std::abs(c) <= 1.0 + kUnitTolerance)) {
        throw std::invalid_argument("point " + std::to_string(i) +
                                    " lies outside the unit cube; normalize the cloud first");
      }
    }
  }
}

// Sorts point indices by key and returns, per point, the majority label of
// its key group (ties to the smaller label).
template <typename Key>
std::vector<int> majority_by_key(const std::vector<Key>& keys, const std::vector<int>& labels) {
  std::vector<std::size_t> order(keys.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return keys[a] != keys[b] ? keys[a] < keys[b] : labels[a] < labels[b];
  });
  std::vector<int> out(keys.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    int best = labels[order[i]];
    std::size_t best_count = 0;
    while (j < order.size() && keys[order[j]] == keys[order[i]]) {
      std::size_t k = j;
      while (k < order.size() && keys[order[k]] == keys[order[i]] &&
             labels[order[k]] == labels[order[j]]) {
        ++k;
      }
      // Runs arrive in increasing label order, so strict > keeps the smaller label on ties.
      if (k - j > best_count) {
        best_count = k - j;
        best = labels[order[j]];
      }
      j = k;
    }
    for (std::size_t t = i; t < j; ++t) out[order[t]] = best;
    i = j;
  }
  return out;
}

std::uint64_t sparse_key(const Point3& p, int resolution) {
  const auto r = static_cast<std::uint64_t>(resolution);
  const auto x = static_cast<std::uint64_t>(voxel_coordinate(p[0], resolution));
  const auto y = static_cast<std::uint64_t>(voxel_coordinate(p[1], resolution));
  const auto z = static_cast<std::uint64_t>(voxel_coordinate(p[2], resolution));
  return (z * r + y) * r + x;
}

void check_sparse_resolution(int resolution) {
  if (resolution < 2) throw std::invalid_argument("resolution must be at least 2");
  if (resolution > (1 << 21)) throw std::invalid_argument("resolution too large for 64-bit keys");
}

}  // namespace

std::size_t VoxelGrid::occupied_count() const {
  return static_cast<std::size_t>(std::count(occupancy.begin(), occupancy.end(), 1));
}

LabeledPointCloud normalize_cloud(const LabeledPointCloud& cloud) {
  if (cloud.points.empty()) throw std::invalid_argument("cannot normalize an empty cloud");
  Point3 c{0, 0, 0};
  for (const auto& p : cloud.points) {
    for (int a = 0; a < 3; ++a) c[a] += p[a];
  }
  for (int a = 0; a < 3; ++a) c[a] /= static_cast<double>(cloud.points.size());
  double radius = 0;
  for (const auto& p : cloud.points) {
    radius = std::max(radius, std::hypot(p[0] - c[0], p[1] - c[1], p[2] - c[2]));
  }
  if (!(radius > 1e-9)) {
    throw std::invalid_argument("degenerate cloud: all points coincide (radius " +
                                std::to_string(radius) + ")");
  }
  LabeledPointCloud out = cloud;
  for (auto& p : out.points) {
    for (int a = 0; a < 3; ++a) p[a] = (p[a] - c[a]) / radius;
  }
  return out;
}

int voxel_coordinate(double c, int resolution) {
  const double f = std::floor((c + 1.0) / 2.0 * resolution);
  if (f < 0) return 0;
  if (f > resolution - 1) return resolution - 1;
  return static_cast<int>(f);
}

VoxelGrid voxelize(const LabeledPointCloud& cloud, int resolution) {
  if (resolution < 2) {
    throw std::invalid_argument("voxel resolution must be at least 2, got " +
                                std::to_string(resolution));
  }
  if (resolution > 1024) {
    throw std::invalid_argument("dense voxel resolution above 1024 is not supported");
  }
  check_cloud(cloud);
  check_normalized(cloud);
  for (int l : cloud.labels) {
    if (l < 1 || l > 255) {
      throw std::invalid_argument("point labels must lie in 1..255, got " + std::to_string(l));
    }
  }

  VoxelGrid g;
  g.resolution = resolution;
  const auto r = static_cast<std::size_t>(resolution);
  g.occupancy.assign(r * r * r, 0);
  g.labels.assign(r * r * r, 0);
  g.point_voxel.resize(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.points[i];
    g.point_voxel[i] = g.index(voxel_coordinate(p[0], resolution), voxel_coordinate(p[1], resolution),
                               voxel_coordinate(p[2], resolution));
    g.occupancy[g.point_voxel[i]] = 1;
  }
  const auto majority = majority_by_key(g.point_voxel, cloud.labels);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    g.labels[g.point_voxel[i]] = static_cast<std::uint8_t>(majority[i]);
  }
  return g;
}

std::vector<int> project_labels_to_points(const VoxelGrid& grid, const LabeledPointCloud& cloud) {
  if (cloud.points.empty()) throw std::invalid_argument("point cloud is empty");
  const auto r = static_cast<std::size_t>(grid.resolution);
  if (grid.resolution < 2 || grid.labels.size() != r * r * r) {
    throw std::invalid_argument("grid carries no per-voxel labels at resolution " +
                                std::to_string(grid.resolution));
  }
  if (!grid.point_voxel.empty() && grid.point_voxel.size() != cloud.size()) {
    throw std::invalid_argument("grid was built from a cloud of " +
                                std::to_string(grid.point_voxel.size()) + " points, got " +
                                std::to_string(cloud.size()));
  }

  std::vector<std::size_t> labeled;
  for (std::size_t v = 0; v < grid.labels.size(); ++v) {
    if (grid.labels[v] != 0) labeled.push_back(v);
  }
  if (labeled.empty()) throw std::invalid_argument("prediction mask is empty: no labeled voxel");

  std::vector<int> out(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.points[i];
    const int x = voxel_coordinate(p[0], grid.resolution);
    const int y = voxel_coordinate(p[1], grid.resolution);
    const int z = voxel_coordinate(p[2], grid.resolution);
    const std::size_t v = grid.index(x, y, z);
    if (!grid.point_voxel.empty() && grid.point_voxel[i] != v) {
      throw std::invalid_argument("point " + std::to_string(i) +
                                  " maps to a different voxel than the grid recorded; resolution "
                                  "or normalization mismatch");
    }
    if (grid.labels[v] != 0) {
      out[i] = grid.labels[v];
      continue;
    }
    // Nearest labeled voxel centre; `labeled` is in increasing index order, so
    // strict < keeps the smaller index on ties.
    long best_d = std::numeric_limits<long>::max();
    std::size_t best = labeled[0];
    for (std::size_t u : labeled) {
      const long ux = static_cast<long>(u % r);
      const long uy = static_cast<long>((u / r) % r);
      const long uz = static_cast<long>(u / (r * r));
      const long d = (ux - x) * (ux - x) + (uy - y) * (uy - y) + (uz - z) * (uz - z);
      if (d < best_d) {
        best_d = d;
        best = u;
      }
    }
    out[i] = grid.labels[best];
  }
  return out;
}

LabeledPointCloud rotate_cloud(const LabeledPointCloud& cloud, int n) {
  if (n < 0 || n > 11) {
    throw std::invalid_argument("rotation index must lie in 0..11, got " + std::to_string(n));
  }
  double c = 0;
  double s = 0;
  switch (n) {  // exact values on the axes
    case 0: c = 1; s = 0; break;
    case 3: c = 0; s = 1; break;
    case 6: c = -1; s = 0; break;
    case 9: c = 0; s = -1; break;
    default: {
      const double angle = n * std::numbers::pi / 6.0;
      c = std::cos(angle);
      s = std::sin(angle);
    }
  }
  LabeledPointCloud out = cloud;
  for (auto& p : out.points) {
    const double x = p[0];
    const double z = p[2];
    p[0] = x * c + z * s;
    p[2] = -x * s + z * c;
  }
  return out;
}

double quantization_upper_bound(const LabeledPointCloud& cloud, int resolution, int part_count) {
  check_sparse_resolution(resolution);
  check_cloud(cloud);
  check_normalized(cloud);
  std::vector<std::uint64_t> keys(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) keys[i] = sparse_key(cloud.points[i], resolution);
  // Each point lands in its own (occupied) voxel, so the projection is the
  // voxel's majority label.
  const auto projected = majority_by_key(keys, cloud.labels);
  return shape_iou(projected, cloud.labels, part_count);
}

std::size_t distinct_voxel_count(const LabeledPointCloud& cloud, int resolution) {
  check_sparse_resolution(resolution);
  std::vector<std::uint64_t> keys;
  keys.reserve(cloud.size());
  for (const auto& p : cloud.points) keys.push_back(sparse_key(p, resolution));
  std::sort(keys.begin(), keys.end());
  return static_cast<std::size_t>(std::unique(keys.begin(), keys.end()) - keys.begin());
}

int first_distinct_resolution(const LabeledPointCloud& cloud, int max_resolution) {
  check_cloud(cloud);
  std::unordered_set<std::uint64_t> seen;
  seen.reserve(cloud.size() * 2);
  for (int r = 2; r <= max_resolution; ++r) {
    seen.clear();
    bool distinct = true;
    for (const auto& p : cloud.points) {
      if (!seen.insert(sparse_key(p, r)).second) {
        distinct = false;
        break;
      }
    }
    if (distinct) return r;
  }
  return 0;
}

std::string format_point_cloud(const LabeledPointCloud& cloud) {
  check_cloud(cloud);
  std::string out;
  out.reserve(cloud.size() * 64);
  char buf[32];
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (double c : cloud.points[i]) {
      auto res = std::to_chars(buf, buf + sizeof buf, c);
      out.append(buf, res.ptr);
      out += ' ';
    }
    out += std::to_string(cloud.labels[i]);
    out += '\n';
  }
  return out;
}

void write_point_cloud(const std::string& path, const LabeledPointCloud& cloud) {
  const std::string text = format_point_cloud(cloud);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path);
}

LabeledPointCloud read_point_cloud(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open point cloud " + path);
  LabeledPointCloud cloud;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const char* p = line.data();
    const char* end = p + line.size();
    auto skip = [&] {
      while (p < end && (*p == ' ' || *p == '\t' || *p == '\r')) ++p;
    };
    skip();
    if (p == end) continue;
    auto bad = [&](const char* what) {
      return std::runtime_error(path + ":" + std::to_string(line_no) + ": " + what);
    };
    Point3 pt{};
    for (double& c : pt) {
      skip();
      auto res = std::from_chars(p, end, c);
      if (res.ec != std::errc()) throw bad("expected \"x y z label\"");
      p = res.ptr;
    }
    skip();
    int label = 0;
    auto res = std::from_chars(p, end, label);
    if (res.ec != std::errc()) throw bad("expected an integer label");
    p = res.ptr;
    skip();
    if (p != end) throw bad("trailing characters");
    if (label < 1) throw bad("labels must be positive");
    cloud.points.push_back(pt);
    cloud.labels.push_back(label);
  }
  if (cloud.points.empty()) throw std::runtime_error(path + ": no points");
  return cloud;
}

}  // namespace voxseg
