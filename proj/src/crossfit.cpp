#include "twice/crossfit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>

#include "twice/error.hpp"
#include "twice/util.hpp"

namespace twice {

std::vector<std::uint32_t> FoldPlan::cell_rows(std::size_t cell) const {
  std::vector<std::uint32_t> out;
  for (std::size_t r = 0; r < row_cell.size(); ++r) {
    if (row_cell[r] == cell) out.push_back(static_cast<std::uint32_t>(r));
  }
  return out;
}

std::vector<std::uint32_t> FoldPlan::training_rows(std::size_t cell, const Panel& panel) const {
  const auto a = static_cast<std::uint32_t>(cell / B), b = static_cast<std::uint32_t>(cell % B);
  std::vector<std::uint32_t> out;
  for (std::size_t r = 0; r < panel.size(); ++r) {
    if (worker_block[panel.worker(r)] != a && firm_block[panel.firm(r)] != b) {
      out.push_back(static_cast<std::uint32_t>(r));
    }
  }
  return out;
}

nlohmann::json FoldPlan::to_json(const Panel& panel) const {
  nlohmann::json workers = nlohmann::json::object(), firms = nlohmann::json::object();
  for (std::size_t w = 0; w < worker_block.size(); ++w) {
    workers[panel.worker_name(static_cast<std::uint32_t>(w))] = worker_block[w] + 1;
  }
  for (std::size_t f = 0; f < firm_block.size(); ++f) {
    firms[panel.firm_name(static_cast<std::uint32_t>(f))] = firm_block[f] + 1;
  }
  return {{"format", "twice.fold_plan"}, {"version", 1}, {"B", B}, {"worker_blocks", workers}, {"firm_blocks", firms}};
}

FoldPlan FoldPlan::from_json(const nlohmann::json& j, const Panel& panel) {
  if (j.value("format", "") != "twice.fold_plan" || j.value("version", 0) != 1) {
    throw SchemaMismatch("not a version 1 fold plan document");
  }
  FoldPlan p;
  p.B = j.at("B").get<std::size_t>();
  if (p.B < 2) throw SchemaMismatch("fold plan with fewer than 2 blocks");
  const auto lookup = [&](const nlohmann::json& blocks, const std::string& name) {
    if (!blocks.contains(name)) throw SchemaMismatch("fold plan does not cover id '" + name + "'");
    const auto b = blocks.at(name).get<std::size_t>();
    if (b < 1 || b > p.B) throw SchemaMismatch("fold plan block out of range for id '" + name + "'");
    return static_cast<std::uint32_t>(b - 1);
  };
  p.worker_block.resize(panel.worker_count());
  for (std::uint32_t w = 0; w < panel.worker_count(); ++w) p.worker_block[w] = lookup(j.at("worker_blocks"), panel.worker_name(w));
  p.firm_block.resize(panel.firm_count());
  for (std::uint32_t f = 0; f < panel.firm_count(); ++f) p.firm_block[f] = lookup(j.at("firm_blocks"), panel.firm_name(f));
  p.row_cell.resize(panel.size());
  for (std::size_t r = 0; r < panel.size(); ++r) {
    p.row_cell[r] = static_cast<std::uint32_t>(p.worker_block[panel.worker(r)] * p.B + p.firm_block[panel.firm(r)]);
  }
  return p;
}

namespace {

std::vector<std::uint32_t> deal_blocks(std::size_t n, const std::function<const std::string&(std::uint32_t)>& name,
                                       std::size_t B, std::uint64_t seed) {
  std::vector<std::uint32_t> ids(n);
  std::iota(ids.begin(), ids.end(), 0U);
  std::sort(ids.begin(), ids.end(), [&](std::uint32_t a, std::uint32_t b) { return name(a) < name(b); });
  Rng rng(seed);
  rng.shuffle(ids);
  std::vector<std::uint32_t> block(n);
  for (std::size_t i = 0; i < n; ++i) block[ids[i]] = static_cast<std::uint32_t>(i % B);
  return block;
}

}  // namespace

FoldPlan make_fold_plan(const Panel& panel, std::size_t B, std::uint64_t seed) {
  if (B < 2) throw InvalidArgument("fold plan needs B >= 2");
  if (panel.empty()) throw EmptyInput("fold plan over an empty panel");
  FoldPlan p;
  p.B = B;
  p.worker_block = deal_blocks(
      panel.worker_count(), [&](std::uint32_t w) -> const std::string& { return panel.worker_name(w); }, B,
      derive_seed(seed, "worker_blocks"));
  p.firm_block = deal_blocks(
      panel.firm_count(), [&](std::uint32_t f) -> const std::string& { return panel.firm_name(f); }, B,
      derive_seed(seed, "firm_blocks"));
  p.row_cell.resize(panel.size());
  for (std::size_t r = 0; r < panel.size(); ++r) {
    p.row_cell[r] = static_cast<std::uint32_t>(p.worker_block[panel.worker(r)] * B + p.firm_block[panel.firm(r)]);
  }
  return p;
}

std::vector<std::uint32_t> canonical_rows(const Panel& panel, std::span<const std::uint32_t> rows) {
  std::vector<std::uint32_t> out(rows.begin(), rows.end());
  std::vector<std::uint32_t> rank(panel.worker_count());
  {
    std::vector<std::uint32_t> ids(panel.worker_count());
    std::iota(ids.begin(), ids.end(), 0U);
    std::sort(ids.begin(), ids.end(),
              [&](std::uint32_t a, std::uint32_t b) { return panel.worker_name(a) < panel.worker_name(b); });
    for (std::size_t i = 0; i < ids.size(); ++i) rank[ids[i]] = static_cast<std::uint32_t>(i);
  }
  std::sort(out.begin(), out.end(), [&](std::uint32_t a, std::uint32_t b) {
    if (rank[panel.worker(a)] != rank[panel.worker(b)]) return rank[panel.worker(a)] < rank[panel.worker(b)];
    return panel.year(a) < panel.year(b);
  });
  return out;
}

namespace {

class MeanModel : public WageModel {
 public:
  explicit MeanModel(double value) : value_(value) {}
  std::vector<double> predict(const FeatureView& x) const override { return std::vector<double>(x.rows, value_); }
  nlohmann::json to_json() const override { return {{"format", "twice.mean_model"}, {"version", 1}, {"value", value_}}; }

 private:
  double value_;
};

class BoostModel : public WageModel {
 public:
  explicit BoostModel(BoostedEnsemble e) : e_(std::move(e)) {}
  std::vector<double> predict(const FeatureView& x) const override { return e_.predict(x); }
  nlohmann::json to_json() const override { return e_.to_json(); }

 private:
  BoostedEnsemble e_;
};

Panel sub_panel(const Panel& panel, std::span<const std::uint32_t> rows) {
  const auto ordered = canonical_rows(panel, rows);
  std::vector<std::size_t> idx(ordered.begin(), ordered.end());
  return panel.select(idx);
}

}  // namespace

std::unique_ptr<WageModel> MeanLearner::fit(const Panel& panel, std::span<const std::uint32_t> rows) const {
  if (rows.empty()) throw EmptyInput("mean learner: no training rows");
  double s = 0;
  for (auto r : canonical_rows(panel, rows)) s += panel.log_wage(r);
  return std::make_unique<MeanModel>(s / static_cast<double>(rows.size()));
}

std::unique_ptr<WageModel> BoostLearner::fit(const Panel& panel, std::span<const std::uint32_t> rows) const {
  if (rows.empty()) throw EmptyInput("boost learner: no training rows");
  const Panel sub = sub_panel(panel, rows);
  return std::make_unique<BoostModel>(fit_boosted(sub.base_features(), sub.log_wages(), sub.workers(), config_));
}

FeatureView TwiceModel::with_cells(const FeatureView& x, std::vector<std::vector<double>>& storage) const {
  storage.assign(2, {});
  const auto w = partitions_.worker_cells(x);
  const auto f = partitions_.firm_cells(x);
  storage[0].assign(w.begin(), w.end());
  storage[1].assign(f.begin(), f.end());
  FeatureView v = x;
  v.append({kWorkerCellFeature, FeatureKind::categorical, static_cast<std::uint32_t>(partitions_.L())}, storage[0]);
  v.append({kFirmCellFeature, FeatureKind::categorical, static_cast<std::uint32_t>(partitions_.K())}, storage[1]);
  return v;
}

std::vector<double> TwiceModel::predict(const FeatureView& x) const {
  std::vector<std::vector<double>> storage;
  return ensemble_.predict(with_cells(x, storage));
}

nlohmann::json TwiceModel::to_json() const {
  return {{"format", "twice.model"},
          {"version", 1},
          {"partitions", partitions_.to_json()},
          {"ensemble", ensemble_.to_json()}};
}

TwiceModel TwiceModel::from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "twice.model" || j.value("version", 0) != 1) {
    throw SchemaMismatch("not a version 1 model document");
  }
  return {PartitionPair::from_json(j.at("partitions")), BoostedEnsemble::from_json(j.at("ensemble"))};
}

TwiceModel TwiceLearner::fit_twice(const Panel& panel, std::span<const std::uint32_t> rows) const {
  if (rows.empty()) throw EmptyInput("twice learner: no training rows");
  const Panel sub = sub_panel(panel, rows);
  PartitionPair pair = build_partitions(sub, K_, L_, partition_);
  // Temporary model to reuse the cell feature construction.
  const TwiceModel shell(pair, BoostedEnsemble{});
  std::vector<std::vector<double>> storage;
  const FeatureView x = shell.with_cells(sub.base_features(), storage);
  BoostedEnsemble e = fit_boosted(x, sub.log_wages(), sub.workers(), boost_);
  return {std::move(pair), std::move(e)};
}

std::unique_ptr<WageModel> TwiceLearner::fit(const Panel& panel, std::span<const std::uint32_t> rows) const {
  return std::make_unique<TwiceModel>(fit_twice(panel, rows));
}

CrossFitResult crossfit_predict(const Panel& panel, const FoldPlan& plan, const WageLearner& learner) {
  if (plan.row_cell.size() != panel.size() || plan.worker_block.size() != panel.worker_count() ||
      plan.firm_block.size() != panel.firm_count()) {
    throw InvalidArgument("fold plan was built over a different panel");
  }
  const std::size_t cells = plan.cell_count();
  std::vector<std::vector<std::uint32_t>> rows(cells), train(cells);
  for (std::size_t r = 0; r < panel.size(); ++r) rows[plan.row_cell[r]].push_back(static_cast<std::uint32_t>(r));
  for (std::size_t c = 0; c < cells; ++c) {
    train[c] = plan.training_rows(c, panel);
    if (train[c].empty()) throw EmptyTrainingCell(c / plan.B, c % plan.B);
  }

  CrossFitResult out;
  out.oof.assign(panel.size(), std::numeric_limits<double>::quiet_NaN());
  out.models.resize(cells);
  const FeatureView x = panel.base_features();
  parallel_for(cells, [&](std::size_t c) {
    if (rows[c].empty()) return;
    out.models[c] = learner.fit(panel, train[c]);
    const FeatureTable held = take_rows(x, rows[c]);
    const auto pred = out.models[c]->predict(held.view());
    for (std::size_t i = 0; i < rows[c].size(); ++i) out.oof[rows[c][i]] = pred[i];
  });
  for (std::size_t c = 0; c < cells; ++c) out.empty_cells += rows[c].empty() ? 1 : 0;
  return out;
}

BlockedRisk blocked_risk(std::span<const double> actual, std::span<const double> predicted, const FoldPlan& plan) {
  if (actual.size() != predicted.size() || actual.size() != plan.row_cell.size()) {
    throw LengthMismatch("blocked_risk: actuals, predictions and plan differ in length");
  }
  BlockedRisk r;
  const std::size_t cells = plan.cell_count();
  // Squared errors are summed in sorted order so the result does not depend
  // on the row order.
  std::vector<std::vector<double>> sq(cells);
  std::vector<double> all(actual.size());
  for (std::size_t i = 0; i < actual.size(); ++i) {
    const double e = actual[i] - predicted[i];
    sq[plan.row_cell[i]].push_back(e * e);
    all[i] = e * e;
  }
  const auto sorted_sum = [](std::vector<double>& v) {
    std::sort(v.begin(), v.end());
    return std::accumulate(v.begin(), v.end(), 0.0);
  };
  r.cell_rows.assign(cells, 0);
  r.cell_mse.assign(cells, std::numeric_limits<double>::quiet_NaN());
  double sum = 0;
  for (std::size_t c = 0; c < cells; ++c) {
    r.cell_rows[c] = sq[c].size();
    if (sq[c].empty()) {
      ++r.cells_empty;
      continue;
    }
    r.cell_mse[c] = sorted_sum(sq[c]) / static_cast<double>(sq[c].size());
    sum += r.cell_mse[c];
    ++r.cells_used;
  }
  const double total = sorted_sum(all);
  r.loss = r.cells_used ? sum / static_cast<double>(r.cells_used) : std::numeric_limits<double>::quiet_NaN();
  r.pooled_mse = actual.empty() ? std::numeric_limits<double>::quiet_NaN() : total / static_cast<double>(actual.size());
  return r;
}

void TuneResult::write_csv(std::ostream& out) const {
  out << "K,L,loss,cells_used\n";
  for (const auto& e : table) out << e.K << ',' << e.L << ',' << format_double(e.loss) << ',' << e.cells_used << '\n';
}

nlohmann::json TuneResult::to_json() const {
  nlohmann::json t = nlohmann::json::array();
  for (const auto& e : table) t.push_back({{"K", e.K}, {"L", e.L}, {"loss", e.loss}, {"cells_used", e.cells_used}});
  return {{"format", "twice.tune"}, {"version", 1}, {"K", K}, {"L", L}, {"loss", loss}, {"table", std::move(t)}};
}

TuneResult TuneResult::from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "twice.tune" || j.value("version", 0) != 1) {
    throw SchemaMismatch("not a version 1 tuning document");
  }
  TuneResult r;
  r.K = j.at("K").get<std::size_t>();
  r.L = j.at("L").get<std::size_t>();
  r.loss = j.at("loss").get<double>();
  for (const auto& e : j.at("table")) {
    r.table.push_back({e.at("K").get<std::size_t>(), e.at("L").get<std::size_t>(), e.at("loss").get<double>(),
                       e.at("cells_used").get<std::size_t>()});
  }
  return r;
}

TuneResult tune_grid(const Panel& panel, std::span<const std::size_t> K_grid, std::span<const std::size_t> L_grid,
                     const FoldPlan& plan, const TuneConfig& config) {
  if (K_grid.empty() || L_grid.empty()) throw InvalidArgument("tune_grid: empty grid");
  TuneResult out;
  bool have = false;
  for (auto K : K_grid) {
    for (auto L : L_grid) {
      const TwiceLearner learner(K, L, config.partition, config.boost);
      const CrossFitResult cf = crossfit_predict(panel, plan, learner);
      const BlockedRisk risk = blocked_risk(panel.log_wages(), cf.oof, plan);
      out.table.push_back({K, L, risk.loss, risk.cells_used});
      const bool better = !have || risk.loss < out.loss ||
                          (risk.loss == out.loss && (K < out.K || (K == out.K && L < out.L)));
      if (better) {
        out.K = K;
        out.L = L;
        out.loss = risk.loss;
        have = true;
      }
    }
  }
  return out;
}

}  // namespace twice
