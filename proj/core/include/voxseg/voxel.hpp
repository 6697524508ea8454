// Labeled point clouds, occupancy grids and the conversions between them.
//
// Grids are R^3 with x varying fastest: index = (z * R + y) * R + x. Mapped
// onto (D, H, W) feature maps this puts z on D, y on H and x on W.
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace voxseg {

using Point3 = std::array<double, 3>;

struct LabeledPointCloud {
  std::vector<Point3> points;
  std::vector<int> labels;  // 1-based part ids, one per point
  std::string category;
  std::string shape_id;

  std::size_t size() const { return points.size(); }
};

struct VoxelGrid {
  int resolution = 0;
  std::vector<std::uint8_t> occupancy;  // R^3, 0 or 1
  std::vector<std::uint8_t> labels;     // R^3 when present; 0 exactly where unoccupied
  std::vector<std::size_t> point_voxel; // voxel index of each source point (may be empty)

  std::size_t voxel_count() const { return occupancy.size(); }
  std::size_t occupied_count() const;
  bool has_labels() const { return !labels.empty(); }
  std::size_t index(int x, int y, int z) const {
    return (static_cast<std::size_t>(z) * resolution + y) * resolution + x;
  }
};

/// Centroid to the origin, farthest point at distance 1. Throws for an empty
/// cloud or one whose points all coincide (radius below 1e-9).
LabeledPointCloud normalize_cloud(const LabeledPointCloud& cloud);

/// Per-axis voxel coordinate clamp(floor((c + 1) / 2 * R), 0, R - 1).
int voxel_coordinate(double c, int resolution);

/// Occupancy, majority-vote labels (ties to the smaller id) and per-point
/// provenance. Throws when R < 2, the cloud is empty, or any coordinate has
/// magnitude above 1 + 1e-9.
VoxelGrid voxelize(const LabeledPointCloud& cloud, int resolution);

/// Label of each point's voxel under `grid.labels` (a predicted or ground
/// truth labeling). Points whose voxel carries no label take the label of the
/// nearest labeled voxel centre, ties to the smaller linear index. Throws when
/// the grid has no labeled voxel.
std::vector<int> project_labels_to_points(const VoxelGrid& grid, const LabeledPointCloud& cloud);

/// Rotation by n * pi / 6 about +y: x' = x cos + z sin, z' = -x sin + z cos.
/// Throws unless 0 <= n <= 11.
LabeledPointCloud rotate_cloud(const LabeledPointCloud& cloud, int n);

/// Mean part IoU (percent) of ground-truth voxel labels projected back to the
/// points: the best point-level score any voxel labeling at R can reach.
/// Uses sparse voxel storage, so large R is cheap.
double quantization_upper_bound(const LabeledPointCloud& cloud, int resolution, int part_count);

/// Number of distinct occupied voxels at resolution R, counted sparsely.
std::size_t distinct_voxel_count(const LabeledPointCloud& cloud, int resolution);

/// Smallest R in [2, max_resolution] at which every point has its own voxel,
/// or 0 if none (e.g. duplicate points).
int first_distinct_resolution(const LabeledPointCloud& cloud, int max_resolution);

/// Text format: one "x y z label" line per point. Blank lines are skipped.
LabeledPointCloud read_point_cloud(const std::string& path);
void write_point_cloud(const std::string& path, const LabeledPointCloud& cloud);
std::string format_point_cloud(const LabeledPointCloud& cloud);

/// VSGV1 volume file: occupancy, optional labels, optional float payload.
struct Volume {
  VoxelGrid grid;
  std::vector<float> values;  // R^3 when present
};

void write_volume(const std::string& path, const VoxelGrid& grid,
                  std::span<const float> values = {});
Volume read_volume(const std::string& path);

}  // namespace voxseg
