#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "twice/features.hpp"
#include "twice/tree.hpp"

namespace twice {

struct BoostConfig {
  double learning_rate = 0.08;
  std::size_t early_stop_patience = 80;
  std::size_t max_depth = 15;
  double min_leaf_size = 30;
  std::size_t max_leaves = 31;
  std::size_t max_rounds = 2000;
  // Share of groups (workers) held out for early stopping when no explicit
  // validation rows are given. Zero disables early stopping.
  double validation_fraction = 0.1;
  std::size_t numeric_candidate_quantiles = 255;
  std::uint64_t seed = 0;

  void validate() const;
  TreeFitConfig tree_config() const;
  nlohmann::json to_json() const;
  static BoostConfig from_json(const nlohmann::json& j);
};

struct RoundLog {
  std::size_t round = 0;
  double train_mse = 0;
  double valid_mse = 0;  // NaN without validation rows
};

class BoostedEnsemble {
 public:
  BoostedEnsemble() = default;
  BoostedEnsemble(std::vector<FeatureInfo> features, double base, double learning_rate,
                  std::vector<RegressionTree> trees, std::size_t best_round);

  double base_prediction() const noexcept { return base_; }
  double learning_rate() const noexcept { return learning_rate_; }
  const std::vector<RegressionTree>& trees() const noexcept { return trees_; }
  std::size_t rounds_used() const noexcept { return trees_.size(); }
  std::size_t best_round() const noexcept { return best_round_; }
  const std::vector<FeatureInfo>& features() const noexcept { return features_; }
  const std::vector<RoundLog>& history() const noexcept { return history_; }
  void set_history(std::vector<RoundLog> h) { history_ = std::move(h); }

  // Uses trees 1..best_round only.
  std::vector<double> predict(const FeatureView& x) const;
  double predict(const FeatureView& x, std::size_t row) const;

  // Training SSE reduction attributed to each feature over the used trees.
  std::vector<double> feature_gain() const;
  // Features with positive gain, normalised to sum to one, largest first;
  // ties keep feature order.
  std::vector<std::pair<std::string, double>> variable_importance() const;

  nlohmann::json to_json() const;
  static BoostedEnsemble from_json(const nlohmann::json& j);

 private:
  std::vector<FeatureInfo> features_;
  double base_ = 0;
  double learning_rate_ = 1;
  std::vector<RegressionTree> trees_;
  std::size_t best_round_ = 0;
  std::vector<RoundLog> history_;
};

// Explicit train and validation rows (indices into x). Empty validation rows
// disable early stopping.
BoostedEnsemble fit_boosted(const FeatureView& x, std::span<const double> y, std::span<const std::uint32_t> train,
                            std::span<const std::uint32_t> valid, const BoostConfig& config);

// Holds out `config.validation_fraction` of the groups (for example worker
// ids) for early stopping; all rows are used otherwise.
BoostedEnsemble fit_boosted(const FeatureView& x, std::span<const double> y, std::span<const std::uint32_t> groups,
                            const BoostConfig& config);

struct RowSplit {
  std::vector<std::uint32_t> train, valid;
};

RowSplit split_by_group(std::span<const std::uint32_t> groups, double fraction, std::uint64_t seed);

}  // namespace twice
