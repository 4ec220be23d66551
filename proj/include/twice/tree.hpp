#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "twice/features.hpp"

namespace twice {

struct TreeFitConfig {
  std::size_t max_leaves = 31;
  double min_leaf_size = 30;  // total weight
  std::size_t max_depth = 15;
  std::size_t numeric_candidate_quantiles = 255;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TreeNode {
  std::int32_t left = -1;  // -1 on leaves
  std::int32_t right = -1;
  std::uint32_t feature = 0;
  FeatureKind kind = FeatureKind::numeric;
  double threshold = 0;                   // numeric: x < threshold goes left
  std::vector<std::uint32_t> left_levels;  // categorical, sorted
  std::vector<std::uint32_t> right_levels;
  bool default_left = true;  // route for levels in neither set
  double value = 0;          // weighted mean of the training target at this node
  double weight = 0;
  double gain = 0;  // weighted SSE reduction of the split
  std::uint32_t depth = 0;
  std::int32_t leaf_index = -1;

  bool is_leaf() const noexcept { return left < 0; }
};

class RegressionTree {
 public:
  RegressionTree() = default;
  RegressionTree(std::vector<FeatureInfo> features, std::vector<TreeNode> nodes);

  const std::vector<FeatureInfo>& features() const noexcept { return features_; }
  const std::vector<TreeNode>& nodes() const noexcept { return nodes_; }
  std::size_t leaf_count() const noexcept { return leaf_nodes_.size(); }
  // Node id of each leaf, in leaf_index order (left to right).
  const std::vector<std::uint32_t>& leaf_nodes() const noexcept { return leaf_nodes_; }

  // Maps the tree's features to columns of `x` by name; throws SchemaMismatch.
  std::vector<std::size_t> resolve(const FeatureView& x) const;

  std::uint32_t leaf_node(const FeatureView& x, std::span<const std::size_t> cols, std::size_t row) const;
  double predict(const FeatureView& x, std::size_t row) const;
  std::vector<double> predict(const FeatureView& x) const;
  std::int32_t leaf_of(const FeatureView& x, std::size_t row) const;
  std::vector<std::int32_t> leaf_of(const FeatureView& x) const;

  nlohmann::json to_json() const;
  static RegressionTree from_json(const nlohmann::json& j);

 private:
  std::vector<FeatureInfo> features_;
  std::vector<TreeNode> nodes_;
  std::vector<std::uint32_t> leaf_nodes_;
};

// Features discretised once against candidate thresholds. Numeric bin b holds
// values with exactly b thresholds at or below them, so "bin <= s" is the same
// as "x < threshold[s]". Categorical bins are the level codes.
struct BinnedFeatures {
  std::vector<FeatureInfo> info;
  std::vector<std::vector<double>> thresholds;
  std::vector<std::vector<std::uint16_t>> bins;  // [feature][row]
  std::vector<std::uint32_t> bin_count;
  std::size_t rows = 0;
};

// Candidate thresholds are computed from `fit_rows` only (with their weights);
// every row of `x` is binned.
BinnedFeatures bin_features(const FeatureView& x, std::span<const std::uint32_t> fit_rows,
                            std::span<const double> weights, std::size_t max_candidates);

// Fits on the listed rows (ascending). Targets and weights are indexed by row.
// When `row_leaf` is given it receives the leaf index of every fit row.
RegressionTree fit_tree_binned(const BinnedFeatures& x, std::span<const std::uint32_t> rows,
                               std::span<const double> targets, std::span<const double> weights,
                               const TreeFitConfig& config, std::vector<std::int32_t>* row_leaf = nullptr);

// Node id reached by row `row` of binned data the tree was fit on.
std::uint32_t route_binned(const RegressionTree& tree, const BinnedFeatures& x, std::size_t row);

RegressionTree fit_tree(const FeatureView& x, std::span<const double> targets, std::span<const double> weights,
                        const TreeFitConfig& config);

}  // namespace twice
