#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <memory>
#include <span>
#include <vector>

#include "json.hpp"
#include "twice/boost.hpp"
#include "twice/panel.hpp"
#include "twice/partition.hpp"

namespace twice {

// B x B layout of worker-id blocks and firm-id blocks. Blocks are 0-based;
// cell (a, b) has index a * B + b.
struct FoldPlan {
  std::size_t B = 0;
  std::vector<std::uint32_t> worker_block;  // per panel worker index
  std::vector<std::uint32_t> firm_block;    // per panel firm index
  std::vector<std::uint32_t> row_cell;

  std::size_t cell_count() const noexcept { return B * B; }
  std::vector<std::uint32_t> cell_rows(std::size_t cell) const;
  // Rows whose worker is outside block a and whose firm is outside block b.
  std::vector<std::uint32_t> training_rows(std::size_t cell, const Panel& panel) const;

  // Blocks keyed by id names so the plan can be reapplied to the same panel.
  nlohmann::json to_json(const Panel& panel) const;
  static FoldPlan from_json(const nlohmann::json& j, const Panel& panel);
};

FoldPlan make_fold_plan(const Panel& panel, std::size_t B, std::uint64_t seed);

// A fitted predictor of log wages from the panel's base features.
class WageModel {
 public:
  virtual ~WageModel() = default;
  virtual std::vector<double> predict(const FeatureView& x) const = 0;
  virtual nlohmann::json to_json() const = 0;
};

class WageLearner {
 public:
  virtual ~WageLearner() = default;
  virtual std::unique_ptr<WageModel> fit(const Panel& panel, std::span<const std::uint32_t> rows) const = 0;
};

// Training-row mean.
class MeanLearner : public WageLearner {
 public:
  std::unique_ptr<WageModel> fit(const Panel& panel, std::span<const std::uint32_t> rows) const override;
};

// Boosted trees on the base features only.
class BoostLearner : public WageLearner {
 public:
  explicit BoostLearner(BoostConfig config) : config_(config) {}
  std::unique_ptr<WageModel> fit(const Panel& panel, std::span<const std::uint32_t> rows) const override;

 private:
  BoostConfig config_;
};

inline constexpr const char* kWorkerCellFeature = "worker_cell";
inline constexpr const char* kFirmCellFeature = "firm_cell";

// Partitions with K firm and L worker leaves, then boosted trees on the base
// features plus both cell indicators.
class TwiceModel : public WageModel {
 public:
  TwiceModel(PartitionPair partitions, BoostedEnsemble ensemble)
      : partitions_(std::move(partitions)), ensemble_(std::move(ensemble)) {}

  const PartitionPair& partitions() const noexcept { return partitions_; }
  const BoostedEnsemble& ensemble() const noexcept { return ensemble_; }

  // x with worker_cell and firm_cell appended (backed by `storage`).
  FeatureView with_cells(const FeatureView& x, std::vector<std::vector<double>>& storage) const;
  std::vector<double> predict(const FeatureView& x) const override;
  nlohmann::json to_json() const override;
  static TwiceModel from_json(const nlohmann::json& j);

 private:
  PartitionPair partitions_;
  BoostedEnsemble ensemble_;
};

class TwiceLearner : public WageLearner {
 public:
  TwiceLearner(std::size_t K, std::size_t L, PartitionConfig partition, BoostConfig boost)
      : K_(K), L_(L), partition_(std::move(partition)), boost_(boost) {}

  std::unique_ptr<WageModel> fit(const Panel& panel, std::span<const std::uint32_t> rows) const override;
  TwiceModel fit_twice(const Panel& panel, std::span<const std::uint32_t> rows) const;

 private:
  std::size_t K_, L_;
  PartitionConfig partition_;
  BoostConfig boost_;
};

// Rows sorted by (worker id, year), so fits do not depend on storage order.
std::vector<std::uint32_t> canonical_rows(const Panel& panel, std::span<const std::uint32_t> rows);

struct CrossFitResult {
  std::vector<double> oof;  // per row
  // One model per cell in a-major order; null where the cell has no rows.
  std::vector<std::unique_ptr<WageModel>> models;
  std::size_t empty_cells = 0;
};

CrossFitResult crossfit_predict(const Panel& panel, const FoldPlan& plan, const WageLearner& learner);

struct BlockedRisk {
  std::vector<double> cell_mse;  // NaN for cells without rows
  std::vector<std::size_t> cell_rows;
  double loss = 0;
  std::size_t cells_used = 0;
  std::size_t cells_empty = 0;
  // Row-weighted pooled MSE, for diagnostics.
  double pooled_mse = 0;
};

BlockedRisk blocked_risk(std::span<const double> actual, std::span<const double> predicted, const FoldPlan& plan);

struct LossEntry {
  std::size_t K = 0;
  std::size_t L = 0;
  double loss = 0;
  std::size_t cells_used = 0;
};

struct TuneResult {
  std::size_t K = 0;
  std::size_t L = 0;
  double loss = 0;
  std::vector<LossEntry> table;  // K-major, grids in the given order

  void write_csv(std::ostream& out) const;
  nlohmann::json to_json() const;
  static TuneResult from_json(const nlohmann::json& j);
};

struct TuneConfig {
  PartitionConfig partition;
  BoostConfig boost;
};

TuneResult tune_grid(const Panel& panel, std::span<const std::size_t> K_grid, std::span<const std::size_t> L_grid,
                     const FoldPlan& plan, const TuneConfig& config);

}  // namespace twice
