// Part-based shape descriptors from a segmentation network's pre-head
// features, plus distance, nearest-neighbour and k-means utilities.
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "voxseg/model.hpp"

namespace voxseg {

struct PartFeature {
  std::string category;
  std::string shape_id;
  std::size_t channels = 0;
  std::vector<bool> presence;   // one flag per part, in part-id order
  std::vector<double> values;   // parts x channels, block p = part p + 1
};

/// Block p is the per-channel mean of `features` (1, C, R, R, R) over voxels
/// whose predicted label is p + 1; zeros and presence false when none are.
template <typename T>
PartFeature part_feature_from_maps(const Tensor<T>& features, std::span<const std::uint8_t> predicted,
                                   int part_count);

/// Segments `grid` and pools the prediction head's input by predicted part.
template <typename T>
PartFeature extract_part_feature(Model<T>& model, const VoxelGrid& grid);

double euclidean_distance(std::span<const double> a, std::span<const double> b);

std::vector<std::vector<double>> pairwise_distances(std::span<const std::vector<double>> features);

/// Indices of the k nearest features to `query`, nearest first, ties to the
/// smaller index. Throws if k exceeds the collection size.
std::vector<std::size_t> knn(std::span<const std::vector<double>> features,
                             std::span<const double> query, std::size_t k);

/// As knn, for the feature at `index`, leaving that feature out.
std::vector<std::size_t> knn_of(std::span<const std::vector<double>> features, std::size_t index,
                                std::size_t k);

struct KMeansResult {
  std::vector<std::size_t> assignments;
  std::vector<std::vector<double>> centroids;
  std::vector<double> objective;  // within-cluster sum of squares per iteration
  std::size_t iterations = 0;
  bool converged = false;
};

/// Lloyd iteration from k distinct seeded samples; stops when assignments
/// repeat or after `max_iterations`. Throws when fewer than k distinct
/// points exist.
KMeansResult kmeans(std::span<const std::vector<double>> features, std::size_t k,
                    std::uint64_t seed, std::size_t max_iterations = 100);

/// Fraction of items whose cluster's majority group matches their group.
double cluster_purity(std::span<const std::size_t> assignments, std::span<const int> groups);

/// CSV rows "shape_id,part_presence_bits,f_0,...,f_{D-1}" with a header.
std::string features_csv(std::span<const PartFeature> features);

struct FeatureRow {
  std::string shape_id;
  std::string presence;
  std::vector<double> values;
};

std::vector<FeatureRow> read_features_csv(const std::string& path);

}  // namespace voxseg
