#include "voxseg/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <stdexcept>

namespace voxseg {

namespace {

struct Counts {
  std::vector<std::size_t> tp, fp, fn;
};

Counts count_parts(std::span<const int> pred, std::span<const int> gt, int part_count) {
  if (pred.size() != gt.size()) {
    throw std::invalid_argument("prediction has " + std::to_string(pred.size()) +
                                " labels but ground truth has " + std::to_string(gt.size()));
  }
  if (pred.empty()) throw std::invalid_argument("cannot score an empty shape");
  if (part_count < 1) throw std::invalid_argument("part count must be positive");
  const auto n = static_cast<std::size_t>(part_count);
  Counts c{std::vector<std::size_t>(n, 0), std::vector<std::size_t>(n, 0),
           std::vector<std::size_t>(n, 0)};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    for (int l : {pred[i], gt[i]}) {
      if (l < 1 || l > part_count) {
        throw std::invalid_argument("label " + std::to_string(l) + " at point " +
                                    std::to_string(i) + " is outside parts 1.." +
                                    std::to_string(part_count));
      }
    }
    const auto p = static_cast<std::size_t>(pred[i] - 1);
    const auto g = static_cast<std::size_t>(gt[i] - 1);
    if (p == g) {
      ++c.tp[p];
    } else {
      ++c.fp[p];
      ++c.fn[g];
    }
  }
  return c;
}

double ratio_or_one(std::size_t num, std::size_t den) {
  return den == 0 ? 1.0 : static_cast<double>(num) / static_cast<double>(den);
}

double sorted_mean(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  double s = 0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

}  // namespace

std::vector<std::optional<double>> part_ious(std::span<const int> pred, std::span<const int> gt,
                                             int part_count) {
  const Counts c = count_parts(pred, gt, part_count);
  std::vector<std::optional<double>> out(c.tp.size());
  for (std::size_t p = 0; p < out.size(); ++p) {
    const std::size_t uni = c.tp[p] + c.fp[p] + c.fn[p];
    if (uni > 0) out[p] = static_cast<double>(c.tp[p]) / static_cast<double>(uni);
  }
  return out;
}

double shape_iou(std::span<const int> pred, std::span<const int> gt, int part_count, bool strict) {
  double sum = 0;
  std::size_t used = 0;
  for (const auto& iou : part_ious(pred, gt, part_count)) {
    if (iou) {
      sum += *iou;
      ++used;
    } else if (!strict) {
      sum += 1.0;
      ++used;
    }
  }
  return 100.0 * sum / static_cast<double>(used);
}

PrecisionRecall precision_recall(std::span<const int> pred, std::span<const int> gt,
                                 int part_count) {
  const Counts c = count_parts(pred, gt, part_count);
  PrecisionRecall pr;
  for (std::size_t p = 0; p < c.tp.size(); ++p) {
    pr.precision.push_back(ratio_or_one(c.tp[p], c.tp[p] + c.fp[p]));
    pr.recall.push_back(ratio_or_one(c.tp[p], c.tp[p] + c.fn[p]));
  }
  double sp = 0;
  double sr = 0;
  for (std::size_t p = 0; p < c.tp.size(); ++p) {
    sp += pr.precision[p];
    sr += pr.recall[p];
  }
  pr.macro_precision = 100.0 * sp / static_cast<double>(c.tp.size());
  pr.macro_recall = 100.0 * sr / static_cast<double>(c.tp.size());
  return pr;
}

ShapeEval evaluate_shape(const std::string& category, const std::string& shape_id,
                         std::span<const int> pred, std::span<const int> gt, int part_count,
                         bool strict) {
  ShapeEval e;
  e.category = category;
  e.shape_id = shape_id;
  e.part_count = part_count;
  e.iou = shape_iou(pred, gt, part_count, strict);
  const auto pr = precision_recall(pred, gt, part_count);
  e.precision = pr.macro_precision;
  e.recall = pr.macro_recall;
  return e;
}

double weighted_overall(std::span<const std::size_t> counts, std::span<const double> means) {
  if (counts.size() != means.size() || counts.empty()) {
    throw std::invalid_argument("weighted_overall: need matching, non-empty counts and means");
  }
  double num = 0;
  double den = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    num += static_cast<double>(counts[i]) * means[i];
    den += static_cast<double>(counts[i]);
  }
  if (den == 0) throw std::invalid_argument("weighted_overall: total count is zero");
  return num / den;
}

EvalReport aggregate(std::span<const ShapeEval> shapes, bool strict) {
  if (shapes.empty()) throw std::invalid_argument("aggregate: no shapes to report");
  struct Acc {
    int parts = 0;
    std::vector<double> iou, precision, recall;
  };
  std::map<std::string, Acc> by_cat;
  for (const auto& s : shapes) {
    auto& a = by_cat[s.category];
    a.parts = s.part_count;
    a.iou.push_back(s.iou);
    a.precision.push_back(s.precision);
    a.recall.push_back(s.recall);
  }

  EvalReport r;
  r.strict = strict;
  r.shape_count = shapes.size();
  std::vector<std::size_t> counts;
  std::vector<double> means;
  std::vector<std::size_t> pr_counts;
  std::vector<double> precisions, recalls;
  for (auto& [name, a] : by_cat) {
    CategorySummary c;
    c.category = name;
    c.count = a.iou.size();
    c.miou = sorted_mean(a.iou);
    if (a.parts > 3) {
      c.precision = sorted_mean(a.precision);
      c.recall = sorted_mean(a.recall);
      pr_counts.push_back(c.count);
      precisions.push_back(*c.precision);
      recalls.push_back(*c.recall);
    }
    counts.push_back(c.count);
    means.push_back(c.miou);
    r.categories.push_back(std::move(c));
  }
  r.overall_iou = weighted_overall(counts, means);
  if (!pr_counts.empty()) {
    r.overall_precision = weighted_overall(pr_counts, precisions);
    r.overall_recall = weighted_overall(pr_counts, recalls);
  }
  return r;
}

std::string report_csv(const EvalReport& report) {
  std::string out = "category,count,miou,precision,recall\n";
  auto opt = [](const std::optional<double>& v) { return v ? fmt(*v) : std::string(); };
  for (const auto& c : report.categories) {
    out += c.category + "," + std::to_string(c.count) + "," + fmt(c.miou) + "," + opt(c.precision) +
           "," + opt(c.recall) + "\n";
  }
  out += "TOTAL," + std::to_string(report.shape_count) + "," + fmt(report.overall_iou) + "," +
         opt(report.overall_precision) + "," + opt(report.overall_recall) + "\n";
  return out;
}

}  // namespace voxseg
