// Procedural labeled shapes (tables, chairs, lamps) assembled from boxes and
// upright cylinders, and on-disk datasets in the point-cloud text format.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "voxseg/voxel.hpp"

namespace voxseg {

struct Primitive {
  enum class Kind { kBox, kCylinder };
  Kind kind = Kind::kBox;
  Point3 center{};
  // Box: half extents along x, y, z. Cylinder (axis +y): radius, half height, unused.
  Point3 size{};
  int label = 1;

  double area() const;
  /// Unsigned distance from p to the primitive's surface.
  double surface_distance(const Point3& p) const;
};

struct ShapeRecipe {
  std::string category;
  std::vector<Primitive> parts;
  double density = 0;  // points per unit area
  std::uint64_t seed = 0;
};

struct GeneratedShape {
  ShapeRecipe recipe;
  LabeledPointCloud cloud;
  std::vector<std::size_t> primitive_index;  // generating primitive of each point
};

/// Deterministic in (category, seed). Categories: "table" (top, leg), "chair"
/// (back, seat, leg, and arms with probability 1/2), "lamp" (base, pole,
/// shade). Every part holds at least 1% of the points.
GeneratedShape generate_shape(const std::string& category, std::uint64_t seed);

/// True when the recipe has a part with the given label.
bool recipe_has_label(const ShapeRecipe& recipe, int label);

/// Seed of the i-th shape of a dataset; distinct for distinct i.
std::uint64_t dataset_shape_seed(std::uint64_t seed, std::size_t index);

struct DatasetManifest {
  std::string category;
  std::vector<std::string> train;
  std::vector<std::string> test;
};

/// Writes <dir>/<id>.txt for n_train + n_test shapes and <dir>/manifest.json.
DatasetManifest make_dataset(const std::string& category, std::size_t n_train, std::size_t n_test,
                             std::uint64_t seed, const std::string& dir);

struct Dataset {
  DatasetManifest manifest;
  std::vector<LabeledPointCloud> train;
  std::vector<LabeledPointCloud> test;
};

/// Reads manifest.json and the listed clouds; each cloud gets the manifest
/// category and its id as shape_id. Coordinates are returned as stored.
Dataset load_dataset(const std::string& dir);

}  // namespace voxseg
