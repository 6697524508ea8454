// Point-level part segmentation metrics. Part ids are 1..part_count.
// Scores are percentages unless stated otherwise.
#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace voxseg {

/// Per-part IoU as a fraction; nullopt where prediction and truth are both
/// empty. Throws on length mismatch, empty input or a label outside the range.
std::vector<std::optional<double>> part_ious(std::span<const int> pred, std::span<const int> gt,
                                             int part_count);

/// Mean part IoU x 100. Parts absent from both sides score 1, or are left out
/// of the mean when `strict`.
double shape_iou(std::span<const int> pred, std::span<const int> gt, int part_count,
                 bool strict = false);

struct PrecisionRecall {
  std::vector<double> precision;  // per part, fraction; 0/0 counts as 1
  std::vector<double> recall;
  double macro_precision = 0;     // percent, mean over parts
  double macro_recall = 0;
};

PrecisionRecall precision_recall(std::span<const int> pred, std::span<const int> gt,
                                 int part_count);

struct ShapeEval {
  std::string category;
  std::string shape_id;
  int part_count = 0;
  double iou = 0;
  double precision = 0;
  double recall = 0;
};

ShapeEval evaluate_shape(const std::string& category, const std::string& shape_id,
                         std::span<const int> pred, std::span<const int> gt, int part_count,
                         bool strict = false);

struct CategorySummary {
  std::string category;
  std::size_t count = 0;
  double miou = 0;
  // Reported only for categories with more than three parts.
  std::optional<double> precision;
  std::optional<double> recall;
};

struct EvalReport {
  std::vector<CategorySummary> categories;  // sorted by name
  double overall_iou = 0;                   // shape-count weighted mean of category means
  std::optional<double> overall_precision;
  std::optional<double> overall_recall;
  std::size_t shape_count = 0;
  bool strict = false;
};

/// Throws std::invalid_argument for an empty input. The result does not
/// depend on the order of `shapes`.
EvalReport aggregate(std::span<const ShapeEval> shapes, bool strict = false);

/// Category means with the count-weighted overall mean.
double weighted_overall(std::span<const std::size_t> counts, std::span<const double> means);

/// CSV with header category,count,miou,precision,recall and a TOTAL row.
std::string report_csv(const EvalReport& report);

}  // namespace voxseg
