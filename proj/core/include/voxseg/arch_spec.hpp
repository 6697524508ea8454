// Declarative model description, serialised as JSON:
//   {"variant","resolution","labels","channels","bottleneck",
//    "stages":[{"rates":[..],"kernel":3},..]}
#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "voxseg/dilation.hpp"

namespace voxseg {

enum class Variant { kVoxSegNet, kSdeAfa2, kSdeConcat, kAtrous3dCnn, kUNet3d };

std::string variant_name(Variant v);
/// Throws std::invalid_argument listing the known names.
Variant parse_variant(std::string_view name);
std::vector<Variant> all_variants();

struct StageSpec {
  std::vector<int> rates;
  int kernel = 3;
  bool operator==(const StageSpec&) const = default;
};

struct ArchitectureSpec {
  Variant variant = Variant::kVoxSegNet;
  int resolution = 48;
  int labels = 2;
  int channels = 64;
  int bottleneck = 32;
  // SDE stages; empty for atrous3dcnn and unet3d, whose layouts are fixed.
  std::vector<StageSpec> stages;

  bool operator==(const ArchitectureSpec&) const = default;

  /// Spec with the variant's default stages: [1,1,1],[1,3,5],[1,3,5] for
  /// voxsegnet, the first two of those for the two-stage ablations.
  static ArchitectureSpec make(Variant variant, int resolution, int labels);
  static std::vector<StageSpec> default_stages(Variant variant);

  /// Throws std::invalid_argument on any inconsistency, including infeasible
  /// stage schedules (with the planner's reason).
  void validate() const;

  /// Deterministic JSON text.
  std::string to_json() const;
  /// Missing "stages" selects the variant default; other missing keys take
  /// the member defaults. Unknown keys are rejected, except "config_hash".
  static ArchitectureSpec from_json(std::string_view text);
  static ArchitectureSpec load(const std::string& path);
};

/// Convolution path whose receptive field is reported for the variant. The
/// channel-lifting stem is not counted; 1x1x1 layers contribute nothing.
std::vector<LayerDescriptor> receptive_field_path(const ArchitectureSpec& spec);
long receptive_field(const ArchitectureSpec& spec);

}  // namespace voxseg
