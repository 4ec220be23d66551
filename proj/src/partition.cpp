#include "twice/partition.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <ostream>

#include "twice/error.hpp"
#include "twice/util.hpp"

namespace twice {

const char* to_string(FirmTargetKind kind) {
  switch (kind) {
    case FirmTargetKind::mean: return "mean";
    case FirmTargetKind::median: return "median";
    case FirmTargetKind::residual: return "residual";
  }
  return "mean";
}

FirmTargetKind firm_target_from_string(std::string_view s) {
  if (s == "mean") return FirmTargetKind::mean;
  if (s == "median") return FirmTargetKind::median;
  if (s == "residual") return FirmTargetKind::residual;
  throw InvalidArgument("unknown firm target '" + std::string(s) + "'");
}

nlohmann::json PartitionConfig::to_json() const {
  return {{"max_depth", tree.max_depth},
          {"min_leaf_size", tree.min_leaf_size},
          {"numeric_candidate_quantiles", tree.numeric_candidate_quantiles},
          {"firm_target", to_string(firm_target)},
          {"weight_firm_years", weight_firm_years},
          {"residual_model", residual_model.to_json()},
          {"residual_folds", residual_folds},
          {"seed", seed}};
}

namespace {

FeatureInfo info_of(const ColumnSchema& schema, std::size_t col) {
  const Column& c = schema.column(col);
  return {c.name, c.kind, c.kind == FeatureKind::categorical ? schema.level_count(col) : 0U};
}

// Most frequent code; ties go to the smallest code, which is the level
// interned first.
double mode_of(const std::vector<double>& codes) {
  std::map<double, std::size_t> counts;
  for (double c : codes) ++counts[c];
  double best = codes.front();
  std::size_t best_n = 0;
  for (const auto& [code, n] : counts) {
    if (n > best_n) {
      best = code;
      best_n = n;
    }
  }
  return best;
}

double summarize_column(const Panel& panel, std::size_t col, std::span<const std::uint32_t> rows,
                        std::vector<double>& scratch) {
  scratch.clear();
  for (auto r : rows) scratch.push_back(panel.covariate(r, col));
  if (panel.schema().column(col).kind == FeatureKind::categorical) return mode_of(scratch);
  return mean(scratch);
}

std::vector<std::uint32_t> sorted_ids(std::size_t n, const std::function<const std::string&(std::uint32_t)>& name) {
  std::vector<std::uint32_t> ids(n);
  std::iota(ids.begin(), ids.end(), 0U);
  std::sort(ids.begin(), ids.end(), [&](std::uint32_t a, std::uint32_t b) { return name(a) < name(b); });
  return ids;
}

}  // namespace

TrainingRecords firm_year_records(const Panel& panel, std::span<const double> row_target,
                                  FirmTargetKind aggregate, bool weighted) {
  if (panel.empty()) throw EmptyInput("firm partition: empty panel");
  if (row_target.size() != panel.size()) throw LengthMismatch("firm partition: target length differs from rows");
  const auto firm_cols = panel.schema().side_columns(ColumnSide::firm);
  const auto firms = sorted_ids(panel.firm_count(), [&](std::uint32_t f) -> const std::string& {
    return panel.firm_name(f);
  });

  // Rows of each firm-year, rows within a group ordered by worker id.
  std::vector<std::vector<std::uint32_t>> groups;
  std::vector<int> group_year;
  for (auto f : firms) {
    std::vector<std::uint32_t> rows(panel.rows_of_firm(f).begin(), panel.rows_of_firm(f).end());
    std::sort(rows.begin(), rows.end(), [&](std::uint32_t a, std::uint32_t b) {
      if (panel.year(a) != panel.year(b)) return panel.year(a) < panel.year(b);
      return panel.worker_name(panel.worker(a)) < panel.worker_name(panel.worker(b));
    });
    for (std::size_t i = 0; i < rows.size();) {
      std::size_t j = i;
      while (j < rows.size() && panel.year(rows[j]) == panel.year(rows[i])) ++j;
      groups.emplace_back(rows.begin() + static_cast<std::ptrdiff_t>(i), rows.begin() + static_cast<std::ptrdiff_t>(j));
      group_year.push_back(panel.year(rows[i]));
      i = j;
    }
  }

  TrainingRecords rec;
  rec.features = FeatureTable(groups.size());
  std::vector<double> scratch;
  for (auto col : firm_cols) {
    std::vector<double> values(groups.size());
    for (std::size_t g = 0; g < groups.size(); ++g) values[g] = summarize_column(panel, col, groups[g], scratch);
    rec.features.add(info_of(panel.schema(), col), std::move(values));
  }
  std::vector<double> years(groups.size());
  for (std::size_t g = 0; g < groups.size(); ++g) years[g] = group_year[g];
  rec.features.add({kYearFeature, FeatureKind::numeric, 0}, std::move(years));

  rec.target.resize(groups.size());
  rec.weight.resize(groups.size());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    scratch.clear();
    for (auto r : groups[g]) scratch.push_back(row_target[r]);
    rec.target[g] = aggregate == FirmTargetKind::median ? median(scratch) : mean(scratch);
    rec.weight[g] = weighted ? static_cast<double>(groups[g].size()) : 1.0;
  }
  return rec;
}

TrainingRecords worker_records(const Panel& panel) {
  if (panel.empty()) throw EmptyInput("worker partition: empty panel");
  const auto worker_cols = panel.schema().side_columns(ColumnSide::worker);
  const auto workers = sorted_ids(panel.worker_count(), [&](std::uint32_t w) -> const std::string& {
    return panel.worker_name(w);
  });
  std::vector<std::vector<std::uint32_t>> rows(workers.size());
  for (std::size_t i = 0; i < workers.size(); ++i) {
    rows[i].assign(panel.rows_of_worker(workers[i]).begin(), panel.rows_of_worker(workers[i]).end());
    std::sort(rows[i].begin(), rows[i].end(), [&](std::uint32_t a, std::uint32_t b) { return panel.year(a) < panel.year(b); });
  }

  TrainingRecords rec;
  rec.features = FeatureTable(workers.size());
  std::vector<double> scratch;
  for (auto col : worker_cols) {
    std::vector<double> values(workers.size());
    for (std::size_t i = 0; i < workers.size(); ++i) values[i] = summarize_column(panel, col, rows[i], scratch);
    rec.features.add(info_of(panel.schema(), col), std::move(values));
  }
  rec.target.resize(workers.size());
  for (std::size_t i = 0; i < workers.size(); ++i) {
    scratch.clear();
    for (auto r : rows[i]) scratch.push_back(panel.log_wage(r));
    rec.target[i] = mean(scratch);
  }
  rec.weight.assign(workers.size(), 1.0);
  return rec;
}

std::vector<double> worker_only_residuals(const Panel& panel, const PartitionConfig& config) {
  const std::size_t folds = config.residual_folds;
  if (folds < 2) throw InvalidArgument("residual target needs at least 2 worker folds");
  if (panel.worker_count() < folds) throw InvalidArgument("residual target: fewer workers than folds");

  std::vector<std::string> names;
  for (auto col : panel.schema().side_columns(ColumnSide::worker)) names.push_back(panel.schema().column(col).name);
  names.emplace_back(kYearFeature);
  const FeatureView x = panel.base_features().select(names);

  auto ids = sorted_ids(panel.worker_count(), [&](std::uint32_t w) -> const std::string& {
    return panel.worker_name(w);
  });
  Rng rng(derive_seed(config.seed, "residual_folds"));
  rng.shuffle(ids);
  std::vector<std::uint32_t> fold_of(panel.worker_count());
  for (std::size_t i = 0; i < ids.size(); ++i) fold_of[ids[i]] = static_cast<std::uint32_t>(i % folds);

  const auto order = panel.canonical_order();
  std::vector<double> residual(panel.size());
  for (std::uint32_t f = 0; f < folds; ++f) {
    std::vector<std::uint32_t> train, train_groups, held;
    for (auto r : order) {
      if (fold_of[panel.worker(r)] == f) {
        held.push_back(static_cast<std::uint32_t>(r));
      } else {
        train.push_back(static_cast<std::uint32_t>(r));
        train_groups.push_back(panel.worker(r));
      }
    }
    const RowSplit split = split_by_group(train_groups, config.residual_model.validation_fraction,
                                          derive_seed(config.seed, "residual_validation_" + std::to_string(f)));
    std::vector<std::uint32_t> fit_rows, valid_rows;
    for (auto i : split.train) fit_rows.push_back(train[i]);
    for (auto i : split.valid) valid_rows.push_back(train[i]);
    const BoostedEnsemble m = fit_boosted(x, panel.log_wages(), fit_rows, valid_rows, config.residual_model);
    for (auto r : held) residual[r] = panel.log_wage(r) - m.predict(x, r);
  }
  return residual;
}

RegressionTree build_firm_partition(const Panel& panel, std::size_t K, const PartitionConfig& config) {
  if (K < 1) throw InvalidArgument("K must be at least 1");
  std::vector<double> target;
  FirmTargetKind aggregate = config.firm_target;
  if (config.firm_target == FirmTargetKind::residual) {
    target = worker_only_residuals(panel, config);
    aggregate = FirmTargetKind::mean;
  } else {
    target.assign(panel.log_wages().begin(), panel.log_wages().end());
  }
  const TrainingRecords rec = firm_year_records(panel, target, aggregate, config.weight_firm_years);
  TreeFitConfig cfg = config.tree;
  cfg.max_leaves = K;
  return fit_tree(rec.features.view(), rec.target, rec.weight, cfg);
}

RegressionTree build_worker_partition(const Panel& panel, std::size_t L, const PartitionConfig& config) {
  if (L < 1) throw InvalidArgument("L must be at least 1");
  const TrainingRecords rec = worker_records(panel);
  TreeFitConfig cfg = config.tree;
  cfg.max_leaves = L;
  return fit_tree(rec.features.view(), rec.target, rec.weight, cfg);
}

PartitionPair::PartitionPair(RegressionTree firm_tree, RegressionTree worker_tree)
    : firm_tree_(std::move(firm_tree)), worker_tree_(std::move(worker_tree)) {
  for (const auto& f : worker_tree_.features()) {
    if (f.name == kYearFeature) throw SchemaMismatch("the worker partition may not use the calendar year");
  }
}

namespace {

std::vector<std::uint32_t> cells_of(const RegressionTree& tree, const FeatureView& x) {
  const auto leaves = tree.leaf_of(x);
  return {leaves.begin(), leaves.end()};
}

}  // namespace

std::vector<std::uint32_t> PartitionPair::worker_cells(const FeatureView& x) const { return cells_of(worker_tree_, x); }

std::vector<std::uint32_t> PartitionPair::firm_cells(const FeatureView& x) const { return cells_of(firm_tree_, x); }

nlohmann::json PartitionPair::to_json() const {
  return {{"format", "twice.partitions"},
          {"version", 1},
          {"K", K()},
          {"L", L()},
          {"firm_tree", firm_tree_.to_json()},
          {"worker_tree", worker_tree_.to_json()}};
}

PartitionPair PartitionPair::from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "twice.partitions" || j.value("version", 0) != 1) {
    throw SchemaMismatch("not a version 1 partition document");
  }
  return {RegressionTree::from_json(j.at("firm_tree")), RegressionTree::from_json(j.at("worker_tree"))};
}

PartitionPair build_partitions(const Panel& panel, std::size_t K, std::size_t L, const PartitionConfig& config) {
  return {build_firm_partition(panel, K, config), build_worker_partition(panel, L, config)};
}

CellAssignment assign_cells(const Panel& panel, const PartitionPair& pair) {
  const FeatureView x = panel.base_features();
  CellAssignment a;
  a.L = pair.L();
  a.K = pair.K();
  a.worker_cell = pair.worker_cells(x);
  a.firm_cell = pair.firm_cells(x);
  return a;
}

void write_assignment_csv(const Panel& panel, const CellAssignment& cells, std::ostream& out) {
  out << "worker_id,firm_id,year,worker_cell,firm_cell\n";
  for (std::size_t r = 0; r < panel.size(); ++r) {
    out << csv_field(panel.worker_name(panel.worker(r))) << ',' << csv_field(panel.firm_name(panel.firm(r))) << ','
        << panel.year(r) << ',' << cells.worker_cell[r] + 1 << ',' << cells.firm_cell[r] + 1 << '\n';
  }
}

bool RuleCondition::holds(double value) const {
  switch (op) {
    case Op::less: return value < threshold;
    case Op::greater_equal: return !(value < threshold);
    case Op::in:
    case Op::not_in: {
      bool member = false;
      if (value >= 0 && value == std::floor(value) && value < 4294967296.0) {
        member = std::binary_search(levels.begin(), levels.end(), static_cast<std::uint32_t>(value));
      }
      return op == Op::in ? member : !member;
    }
  }
  return false;
}

std::string RuleCondition::text(const ColumnSchema* schema) const {
  if (op == Op::less) return feature + " < " + format_double(threshold);
  if (op == Op::greater_equal) return feature + " ≥ " + format_double(threshold);
  std::optional<std::size_t> col;
  if (schema) col = schema->find(feature);
  std::string s = feature + (op == Op::in ? " in {" : " not in {");
  for (std::size_t i = 0; i < levels.size(); ++i) {
    if (i) s += ", ";
    if (col && levels[i] < schema->level_count(*col)) {
      s += schema->level_name(*col, levels[i]);
    } else {
      s += '#' + std::to_string(levels[i]);
    }
  }
  return s + '}';
}

std::string CellRule::text(const ColumnSchema* schema) const {
  if (conditions.empty()) return "all";
  std::string s;
  for (std::size_t i = 0; i < conditions.size(); ++i) {
    if (i) s += " and ";
    s += conditions[i].text(schema);
  }
  return s;
}

std::vector<CellRule> describe_tree(const RegressionTree& tree, ColumnSide side) {
  std::vector<CellRule> rules(tree.leaf_count());
  const auto& nodes = tree.nodes();
  std::vector<RuleCondition> path;
  // Depth-first walk carrying the conditions along the current path.
  std::function<void(std::uint32_t)> walk = [&](std::uint32_t id) {
    const TreeNode& n = nodes[id];
    if (n.is_leaf()) {
      CellRule& r = rules[static_cast<std::size_t>(n.leaf_index)];
      r.side = side;
      r.cell = static_cast<std::uint32_t>(n.leaf_index);
      r.conditions = path;
      r.weight = n.weight;
      r.mean_target = n.value;
      return;
    }
    RuleCondition left, right;
    left.feature = right.feature = tree.features()[n.feature].name;
    if (n.kind == FeatureKind::numeric) {
      left.op = RuleCondition::Op::less;
      right.op = RuleCondition::Op::greater_equal;
      left.threshold = right.threshold = n.threshold;
    } else if (n.default_left) {
      left.op = RuleCondition::Op::not_in;
      right.op = RuleCondition::Op::in;
      left.levels = right.levels = n.right_levels;
    } else {
      left.op = RuleCondition::Op::in;
      right.op = RuleCondition::Op::not_in;
      left.levels = right.levels = n.left_levels;
    }
    path.push_back(left);
    walk(static_cast<std::uint32_t>(n.left));
    path.back() = right;
    walk(static_cast<std::uint32_t>(n.right));
    path.pop_back();
  };
  walk(0);
  return rules;
}

std::vector<CellRule> describe_cells(const PartitionPair& pair) {
  auto rules = describe_tree(pair.firm_tree(), ColumnSide::firm);
  auto worker = describe_tree(pair.worker_tree(), ColumnSide::worker);
  rules.insert(rules.end(), worker.begin(), worker.end());
  return rules;
}

void write_rules_text(const std::vector<CellRule>& rules, std::ostream& out, const ColumnSchema* schema) {
  for (const auto& r : rules) {
    out << to_string(r.side) << " cell " << r.cell + 1 << " (weight " << format_double(r.weight) << ", mean "
        << format_double(r.mean_target) << "): " << r.text(schema) << '\n';
  }
}

nlohmann::json rules_to_json(const std::vector<CellRule>& rules, const ColumnSchema* schema) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rules) {
    nlohmann::json conds = nlohmann::json::array();
    for (const auto& c : r.conditions) {
      nlohmann::json e = {{"feature", c.feature}};
      switch (c.op) {
        case RuleCondition::Op::less: e["op"] = "<"; e["threshold"] = c.threshold; break;
        case RuleCondition::Op::greater_equal: e["op"] = ">="; e["threshold"] = c.threshold; break;
        case RuleCondition::Op::in: e["op"] = "in"; e["levels"] = c.levels; break;
        case RuleCondition::Op::not_in: e["op"] = "not_in"; e["levels"] = c.levels; break;
      }
      conds.push_back(std::move(e));
    }
    out.push_back({{"side", to_string(r.side)},
                   {"cell", r.cell + 1},
                   {"rule", r.text(schema)},
                   {"conditions", std::move(conds)},
                   {"weight", r.weight},
                   {"mean_target", r.mean_target}});
  }
  return out;
}

}  // namespace twice
