#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "json.hpp"
#include "twice/features.hpp"

namespace twice {

enum class ColumnSide : std::uint8_t { worker, firm };

const char* to_string(ColumnSide side);
ColumnSide column_side_from_string(std::string_view s);

struct Column {
  std::string name;
  FeatureKind kind = FeatureKind::numeric;
  ColumnSide side = ColumnSide::worker;
  // Declared upper bound on the number of levels; 0 leaves it open.
  std::size_t cardinality = 0;
};

// Covariate columns plus the per-column category dictionaries. Codes are
// assigned in first-seen order and never change once assigned, so a schema
// persisted with a model aligns train and test levels.
class ColumnSchema {
 public:
  ColumnSchema() = default;
  explicit ColumnSchema(std::vector<Column> columns);

  const std::vector<Column>& columns() const noexcept { return columns_; }
  std::size_t size() const noexcept { return columns_.size(); }
  const Column& column(std::size_t j) const { return columns_.at(j); }
  std::optional<std::size_t> find(std::string_view name) const;
  std::size_t index_of(std::string_view name) const;  // throws SchemaMismatch
  std::vector<std::size_t> side_columns(ColumnSide side) const;

  std::uint32_t intern(std::size_t col, std::string_view level);
  std::optional<std::uint32_t> code_of(std::size_t col, std::string_view level) const;
  const std::string& level_name(std::size_t col, std::uint32_t code) const;
  const std::vector<std::string>& levels(std::size_t col) const { return levels_.at(col); }
  std::uint32_t level_count(std::size_t col) const {
    return static_cast<std::uint32_t>(levels_.at(col).size());
  }

  nlohmann::json to_json() const;
  static ColumnSchema from_json(const nlohmann::json& j);

 private:
  std::vector<Column> columns_;
  std::vector<std::vector<std::string>> levels_;
  std::vector<std::unordered_map<std::string, std::uint32_t>> codes_;
};

struct Observation {
  std::string worker_id;
  std::string firm_id;
  int year = 0;
  double log_wage = 0.0;
  std::vector<double> worker_covariates;  // worker-side columns, schema order
  std::vector<double> firm_covariates;    // firm-side columns, schema order (firm-year values)
};

// Immutable matched worker-firm-year panel. Worker and firm ids are interned
// to dense indices in first-appearance order.
class Panel {
 public:
  Panel() = default;

  std::size_t size() const noexcept { return wages_.size(); }
  bool empty() const noexcept { return wages_.empty(); }
  const ColumnSchema& schema() const noexcept { return schema_; }

  std::uint32_t worker(std::size_t row) const { return workers_[row]; }
  std::uint32_t firm(std::size_t row) const { return firms_[row]; }
  int year(std::size_t row) const { return years_[row]; }
  double log_wage(std::size_t row) const { return wages_[row]; }
  double covariate(std::size_t row, std::size_t col) const { return covariates_[col][row]; }

  std::span<const double> log_wages() const noexcept { return wages_; }
  std::span<const int> years() const noexcept { return years_; }
  std::span<const std::uint32_t> workers() const noexcept { return workers_; }
  std::span<const std::uint32_t> firms() const noexcept { return firms_; }
  std::span<const double> column(std::size_t col) const { return covariates_.at(col); }

  std::size_t worker_count() const noexcept { return worker_names_.size(); }
  std::size_t firm_count() const noexcept { return firm_names_.size(); }
  const std::string& worker_name(std::uint32_t w) const { return worker_names_.at(w); }
  const std::string& firm_name(std::uint32_t f) const { return firm_names_.at(f); }
  std::optional<std::uint32_t> find_worker(std::string_view id) const;
  std::optional<std::uint32_t> find_firm(std::string_view id) const;
  std::span<const std::uint32_t> rows_of_worker(std::uint32_t w) const { return worker_rows_.at(w); }
  std::span<const std::uint32_t> rows_of_firm(std::uint32_t f) const { return firm_rows_.at(f); }

  Observation observation(std::size_t row) const;

  // Rows in the given order, ids re-interned in order of appearance.
  Panel select(std::span<const std::size_t> rows) const;

  // Row order sorted by (worker id, year); independent of storage order.
  std::vector<std::size_t> canonical_order() const;

  // Covariates in schema order followed by the numeric calendar "year".
  FeatureView base_features() const;

 private:
  friend class PanelBuilder;
  void build_indexes();

  ColumnSchema schema_;
  std::vector<std::uint32_t> workers_;
  std::vector<std::uint32_t> firms_;
  std::vector<int> years_;
  std::vector<double> year_values_;
  std::vector<double> wages_;
  std::vector<std::vector<double>> covariates_;
  std::vector<std::string> worker_names_;
  std::vector<std::string> firm_names_;
  std::unordered_map<std::string, std::uint32_t> worker_lookup_;
  std::unordered_map<std::string, std::uint32_t> firm_lookup_;
  std::vector<std::vector<std::uint32_t>> worker_rows_;
  std::vector<std::vector<std::uint32_t>> firm_rows_;
};

class PanelBuilder {
 public:
  explicit PanelBuilder(ColumnSchema schema);

  // Covariates in schema column order.
  void add(std::string_view worker_id, std::string_view firm_id, int year, double log_wage,
           std::span<const double> covariates);
  void add(const Observation& obs);
  ColumnSchema& schema() noexcept { return panel_.schema_; }
  std::size_t size() const noexcept { return panel_.size(); }

  Panel build() &&;

 private:
  std::uint32_t intern_worker(std::string_view id);
  std::uint32_t intern_firm(std::string_view id);

  Panel panel_;
  std::unordered_set<std::uint64_t> seen_worker_year_;
  std::vector<std::size_t> worker_cols_;
  std::vector<std::size_t> firm_cols_;
};

inline constexpr const char* kYearFeature = "year";

Panel ingest_csv(const std::string& path, ColumnSchema schema);
Panel ingest_csv(std::istream& in, ColumnSchema schema);
void emit_csv(const Panel& panel, std::ostream& out);
void emit_csv(const Panel& panel, const std::string& path);

struct HoldoutSplit {
  Panel train;
  Panel test;
};

HoldoutSplit holdout_split(const Panel& panel, double firm_fraction, double worker_fraction,
                           std::uint64_t seed);

struct YearSummary {
  int year = 0;
  std::size_t firms = 0;
  std::size_t workers = 0;
  std::size_t rows = 0;
  double mean_log_wage = 0.0;
};

struct PanelSummary {
  std::size_t rows = 0;
  std::size_t workers = 0;
  std::size_t firms = 0;
  double mean_log_wage = 0.0;
  std::vector<YearSummary> years;
};

PanelSummary summarize(const Panel& panel);
void write_summary_csv(const PanelSummary& summary, std::ostream& out);

}  // namespace twice
