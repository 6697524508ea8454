#include "voxseg/part_features.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>


namespace voxseg {

namespace {

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

void check_lengths(std::span<const std::vector<double>> features) {
  for (const auto& f : features) {
    if (f.size() != features[0].size()) {
      throw std::invalid_argument("feature vectors differ in length: " +
                                  std::to_string(features[0].size()) + " vs " +
                                  std::to_string(f.size()));
    }
  }
}

std::vector<std::size_t> ranked(std::span<const std::vector<double>> features,
                                std::span<const double> query, std::size_t skip) {
  check_lengths(features);
  if (!features.empty() && query.size() != features[0].size()) {
    throw std::invalid_argument("query length " + std::to_string(query.size()) +
                                " does not match feature length " +
                                std::to_string(features[0].size()));
  }
  std::vector<std::pair<double, std::size_t>> d;
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (i != skip) d.emplace_back(squared_distance(features[i], query), i);
  }
  std::sort(d.begin(), d.end());
  std::vector<std::size_t> out;
  for (const auto& [dist, i] : d) out.push_back(i);
  return out;
}

}  // namespace

template <typename T>
PartFeature part_feature_from_maps(const Tensor<T>& features, std::span<const std::uint8_t> predicted,
                                   int part_count) {
  if (features.rank() != 5 || features.dim(0) != 1) {
    throw std::invalid_argument("part features need a single (1, C, R, R, R) feature map, got " +
                                shape_str(features.shape()));
  }
  const std::size_t c = features.dim(1);
  const std::size_t vol = features.numel() / c;
  if (predicted.size() != vol) {
    throw std::invalid_argument("label volume has " + std::to_string(predicted.size()) +
                                " voxels but the feature map has " + std::to_string(vol));
  }
  const auto parts = static_cast<std::size_t>(part_count);
  PartFeature pf;
  pf.channels = c;
  pf.presence.assign(parts, false);
  pf.values.assign(parts * c, 0.0);
  std::vector<std::size_t> counts(parts, 0);
  for (std::uint8_t l : predicted) {
    if (l == 0) continue;
    if (l > parts) {
      throw std::invalid_argument("predicted label " + std::to_string(l) + " exceeds part count " +
                                  std::to_string(parts));
    }
    ++counts[l - 1];
  }
  auto f = features.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* plane = f.data() + ch * vol;
    for (std::size_t v = 0; v < vol; ++v) {
      if (predicted[v]) pf.values[(predicted[v] - 1) * c + ch] += plane[v];
    }
  }
  for (std::size_t p = 0; p < parts; ++p) {
    pf.presence[p] = counts[p] > 0;
    if (!counts[p]) continue;
    for (std::size_t ch = 0; ch < c; ++ch) pf.values[p * c + ch] /= static_cast<double>(counts[p]);
  }
  return pf;
}

template <typename T>
PartFeature extract_part_feature(Model<T>& model, const VoxelGrid& grid) {
  const auto seg = forward_segment(model, grid);
  return part_feature_from_maps(seg.head_input, seg.labels, model.spec().labels);
}

double euclidean_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("feature vectors differ in length: " + std::to_string(a.size()) +
                                " vs " + std::to_string(b.size()));
  }
  return std::sqrt(squared_distance(a, b));
}

std::vector<std::vector<double>> pairwise_distances(std::span<const std::vector<double>> features) {
  check_lengths(features);
  const std::size_t n = features.size();
  std::vector<std::vector<double>> d(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      d[i][j] = d[j][i] = euclidean_distance(features[i], features[j]);
    }
  }
  return d;
}

std::vector<std::size_t> knn(std::span<const std::vector<double>> features,
                             std::span<const double> query, std::size_t k) {
  if (k > features.size()) {
    throw std::invalid_argument("k = " + std::to_string(k) + " exceeds the collection size " +
                                std::to_string(features.size()));
  }
  auto order = ranked(features, query, features.size());
  order.resize(k);
  return order;
}

std::vector<std::size_t> knn_of(std::span<const std::vector<double>> features, std::size_t index,
                                std::size_t k) {
  if (index >= features.size()) throw std::out_of_range("feature index out of range");
  if (k + 1 > features.size()) {
    throw std::invalid_argument("k = " + std::to_string(k) + " exceeds the " +
                                std::to_string(features.size() - 1) + " other features");
  }
  auto order = ranked(features, features[index], index);
  order.resize(k);
  return order;
}

KMeansResult kmeans(std::span<const std::vector<double>> features, std::size_t k,
                    std::uint64_t seed, std::size_t max_iterations) {
  check_lengths(features);
  if (k == 0) throw std::invalid_argument("k must be positive");
  if (k > features.size()) {
    throw std::invalid_argument("k = " + std::to_string(k) + " exceeds the collection size " +
                                std::to_string(features.size()));
  }
  const std::size_t n = features.size();

  KMeansResult r;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t i : order) {
    if (r.centroids.size() == k) break;
    const bool duplicate = std::any_of(r.centroids.begin(), r.centroids.end(),
                                       [&](const auto& c) { return c == features[i]; });
    if (!duplicate) r.centroids.push_back(features[i]);
  }
  if (r.centroids.size() < k) {
    throw std::invalid_argument("only " + std::to_string(r.centroids.size()) +
                                " distinct points for k = " + std::to_string(k));
  }

  r.assignments.assign(n, k);  // k marks "unassigned"
  for (r.iterations = 0; r.iterations < max_iterations; ++r.iterations) {
    bool changed = false;
    double objective = 0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double d = squared_distance(features[i], r.centroids[c]);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      changed = changed || r.assignments[i] != best;
      r.assignments[i] = best;
      objective += best_d;
    }
    r.objective.push_back(objective);
    if (!changed) {
      r.converged = true;
      break;
    }
    // Empty clusters keep their previous centroid.
    std::vector<std::vector<double>> sums(k, std::vector<double>(features[0].size(), 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[r.assignments[i]];
      for (std::size_t d = 0; d < features[i].size(); ++d) sums[r.assignments[i]][d] += features[i][d];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (!counts[c]) continue;
      for (auto& v : sums[c]) v /= static_cast<double>(counts[c]);
      r.centroids[c] = std::move(sums[c]);
    }
  }
  return r;
}

double cluster_purity(std::span<const std::size_t> assignments, std::span<const int> groups) {
  if (assignments.size() != groups.size() || assignments.empty()) {
    throw std::invalid_argument("cluster_purity needs matching, non-empty assignments and groups");
  }
  std::map<std::size_t, std::map<int, std::size_t>> table;
  for (std::size_t i = 0; i < assignments.size(); ++i) ++table[assignments[i]][groups[i]];
  std::size_t agree = 0;
  for (const auto& [cluster, counts] : table) {
    std::size_t best = 0;
    for (const auto& [g, c] : counts) best = std::max(best, c);
    agree += best;
  }
  return static_cast<double>(agree) / static_cast<double>(assignments.size());
}

std::string features_csv(std::span<const PartFeature> features) {
  std::string out = "shape_id,part_presence_bits";
  const std::size_t dim = features.empty() ? 0 : features[0].values.size();
  for (std::size_t i = 0; i < dim; ++i) out += ",f_" + std::to_string(i);
  out += '\n';
  char buf[32];
  for (const auto& f : features) {
    if (f.values.size() != dim) throw std::invalid_argument("part features differ in length");
    out += f.shape_id + ",";
    for (bool b : f.presence) out += b ? '1' : '0';
    for (double v : f.values) {
      auto res = std::to_chars(buf, buf + sizeof buf, v);
      out += ',';
      out.append(buf, res.ptr);
    }
    out += '\n';
  }
  return out;
}

std::vector<FeatureRow> read_features_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open feature file " + path);
  std::string line;
  if (!std::getline(in, line) || line.rfind("shape_id,part_presence_bits", 0) != 0) {
    throw std::runtime_error(path + ": missing feature CSV header");
  }
  std::vector<FeatureRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() < 2) throw std::runtime_error(path + ":" + std::to_string(line_no) + ": too few columns");
    FeatureRow row{cells[0], cells[1], {}};
    for (std::size_t i = 2; i < cells.size(); ++i) {
      double v = 0;
      const char* b = cells[i].data();
      const char* e = b + cells[i].size();
      auto res = std::from_chars(b, e, v);
      if (res.ec != std::errc() || res.ptr != e) {
        throw std::runtime_error(path + ":" + std::to_string(line_no) + ": bad number \"" + cells[i] + "\"");
      }
      row.values.push_back(v);
    }
    if (!rows.empty() && row.values.size() != rows[0].values.size()) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": row length differs");
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

template PartFeature part_feature_from_maps(const Tensor<float>&, std::span<const std::uint8_t>, int);
template PartFeature part_feature_from_maps(const Tensor<double>&, std::span<const std::uint8_t>, int);
template PartFeature extract_part_feature(Model<float>&, const VoxelGrid&);
template PartFeature extract_part_feature(Model<double>&, const VoxelGrid&);

}  // namespace voxseg
