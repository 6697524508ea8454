// Category tables: the synthetic desk-scale categories and the 16 ShapeNet-part
// categories with their global (50-part) label offsets.
#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace voxseg {

struct CategoryInfo {
  std::string name;
  std::vector<std::string> parts;  // part id p is parts[p - 1]
  int part_count() const { return static_cast<int>(parts.size()); }
};

/// table (top, leg), chair (back, seat, leg, arm), lamp (base, pole, shade).
const std::vector<CategoryInfo>& synthetic_categories();
const std::vector<CategoryInfo>& shapenet_categories();

/// Exact-name lookup over synthetic then ShapeNet categories.
const CategoryInfo& find_category(std::string_view name);

/// Offset of a ShapeNet category's first part in the global 0-based labeling.
int shapenet_label_offset(std::string_view name);
int shapenet_total_parts();

}  // namespace voxseg
