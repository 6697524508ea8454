#include "voxseg/categories.hpp"

#include <stdexcept>

namespace voxseg {

const std::vector<CategoryInfo>& synthetic_categories() {
  static const std::vector<CategoryInfo> table = {
      {"table", {"top", "leg"}},
      {"chair", {"back", "seat", "leg", "arm"}},
      {"lamp", {"base", "pole", "shade"}},
  };
  return table;
}

const std::vector<CategoryInfo>& shapenet_categories() {
  static const std::vector<CategoryInfo> table = {
      {"Airplane", {"body", "wing", "tail", "engine"}},
      {"Bag", {"handle", "body"}},
      {"Cap", {"panels", "peak"}},
      {"Car", {"roof", "hood", "wheel", "body"}},
      {"Chair", {"back", "seat", "leg", "arm"}},
      {"Earphone", {"earphone", "headband", "data wire"}},
      {"Guitar", {"head", "body", "neck"}},
      {"Knife", {"blade", "handle"}},
      {"Lamp", {"base", "lampshade", "canopy", "tube"}},
      {"Laptop", {"keyboard", "screen"}},
      {"Motorbike", {"gas tank", "seat", "wheel", "handle", "light", "body"}},
      {"Mug", {"handle", "body"}},
      {"Pistol", {"barrel", "handle", "trigger"}},
      {"Rocket", {"body", "fin", "nose"}},
      {"Skateboard", {"wheel", "deck", "belt"}},
      {"Table", {"desktop", "leg", "support"}},
  };
  return table;
}

const CategoryInfo& find_category(std::string_view name) {
  std::string known;
  for (const auto* list : {&synthetic_categories(), &shapenet_categories()}) {
    for (const auto& c : *list) {
      if (c.name == name) return c;
      known += known.empty() ? c.name : ", " + c.name;
    }
  }
  throw std::invalid_argument("unknown category \"" + std::string(name) + "\" (known: " + known + ")");
}

int shapenet_label_offset(std::string_view name) {
  int offset = 0;
  for (const auto& c : shapenet_categories()) {
    if (c.name == name) return offset;
    offset += c.part_count();
  }
  throw std::invalid_argument("unknown ShapeNet category \"" + std::string(name) + "\"");
}

int shapenet_total_parts() {
  int n = 0;
  for (const auto& c : shapenet_categories()) n += c.part_count();
  return n;
}

}  // namespace voxseg
