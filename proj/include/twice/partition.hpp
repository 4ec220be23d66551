#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "twice/boost.hpp"
#include "twice/panel.hpp"
#include "twice/tree.hpp"

namespace twice {

enum class FirmTargetKind : std::uint8_t { mean, median, residual };

const char* to_string(FirmTargetKind kind);
FirmTargetKind firm_target_from_string(std::string_view s);

struct PartitionConfig {
  // max_leaves is replaced by K or L.
  TreeFitConfig tree;
  FirmTargetKind firm_target = FirmTargetKind::mean;
  // Weight firm-year records by their row counts in the firm tree.
  bool weight_firm_years = true;
  // Worker-only model and worker-block count for the residual target.
  BoostConfig residual_model;
  std::size_t residual_folds = 5;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
};

// Aggregated records a partition tree is trained on.
struct TrainingRecords {
  FeatureTable features;
  std::vector<double> target;
  std::vector<double> weight;
};

// One record per firm-year: firm columns (numeric mean, categorical mode) and
// the calendar year, sorted by (firm id, year).
TrainingRecords firm_year_records(const Panel& panel, std::span<const double> row_target,
                                  FirmTargetKind aggregate, bool weighted);
// One record per worker: mean wage, means of numeric worker columns and modes
// of categorical ones, sorted by worker id. No calendar year.
TrainingRecords worker_records(const Panel& panel);

// Worker-side model residuals, cross-fitted over blocks of worker ids.
std::vector<double> worker_only_residuals(const Panel& panel, const PartitionConfig& config);

RegressionTree build_firm_partition(const Panel& panel, std::size_t K, const PartitionConfig& config);
RegressionTree build_worker_partition(const Panel& panel, std::size_t L, const PartitionConfig& config);

class PartitionPair {
 public:
  PartitionPair() = default;
  PartitionPair(RegressionTree firm_tree, RegressionTree worker_tree);

  const RegressionTree& firm_tree() const noexcept { return firm_tree_; }
  const RegressionTree& worker_tree() const noexcept { return worker_tree_; }
  std::size_t K() const noexcept { return firm_tree_.leaf_count(); }
  std::size_t L() const noexcept { return worker_tree_.leaf_count(); }

  // 0-based dense cell ids in left-to-right leaf order.
  std::vector<std::uint32_t> worker_cells(const FeatureView& x) const;
  std::vector<std::uint32_t> firm_cells(const FeatureView& x) const;

  nlohmann::json to_json() const;
  static PartitionPair from_json(const nlohmann::json& j);

 private:
  RegressionTree firm_tree_;
  RegressionTree worker_tree_;
};

PartitionPair build_partitions(const Panel& panel, std::size_t K, std::size_t L, const PartitionConfig& config);

struct CellAssignment {
  std::size_t L = 0;
  std::size_t K = 0;
  std::vector<std::uint32_t> worker_cell;  // per row, 0-based
  std::vector<std::uint32_t> firm_cell;
};

CellAssignment assign_cells(const Panel& panel, const PartitionPair& pair);

// worker_id, firm_id, year, worker_cell, firm_cell with 1-based cells.
void write_assignment_csv(const Panel& panel, const CellAssignment& cells, std::ostream& out);

struct RuleCondition {
  enum class Op : std::uint8_t { less, greater_equal, in, not_in };
  std::string feature;
  Op op = Op::less;
  double threshold = 0;
  std::vector<std::uint32_t> levels;  // sorted codes for in / not_in

  bool holds(double value) const;
  std::string text(const ColumnSchema* schema = nullptr) const;
};

struct CellRule {
  ColumnSide side = ColumnSide::worker;
  std::uint32_t cell = 0;  // 0-based
  std::vector<RuleCondition> conditions;
  double weight = 0;       // training weight that reached the leaf
  double mean_target = 0;  // leaf value
  // Conditions joined by " and "; "all" for a single-leaf tree.
  std::string text(const ColumnSchema* schema = nullptr) const;
};

// Rules for all firm cells then all worker cells. Level names in the text
// forms come from the schema when given.
std::vector<CellRule> describe_cells(const PartitionPair& pair);
std::vector<CellRule> describe_tree(const RegressionTree& tree, ColumnSide side);
void write_rules_text(const std::vector<CellRule>& rules, std::ostream& out, const ColumnSchema* schema = nullptr);
nlohmann::json rules_to_json(const std::vector<CellRule>& rules, const ColumnSchema* schema = nullptr);

}  // namespace twice
