#include "twice/boost.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "twice/error.hpp"
#include "twice/util.hpp"

namespace twice {

void BoostConfig::validate() const {
  if (!(learning_rate > 0.0 && learning_rate <= 1.0)) throw InvalidArgument("learning_rate must be in (0, 1]");
  if (early_stop_patience < 1) throw InvalidArgument("early_stop_patience must be at least 1");
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
    throw InvalidArgument("validation_fraction must be in [0, 1)");
  }
  tree_config().validate();
}

TreeFitConfig BoostConfig::tree_config() const {
  TreeFitConfig t;
  t.max_leaves = max_leaves;
  t.min_leaf_size = min_leaf_size;
  t.max_depth = max_depth;
  t.numeric_candidate_quantiles = numeric_candidate_quantiles;
  t.seed = seed;
  return t;
}

nlohmann::json BoostConfig::to_json() const {
  return {{"learning_rate", learning_rate},
          {"early_stop_patience", early_stop_patience},
          {"max_depth", max_depth},
          {"min_leaf_size", min_leaf_size},
          {"max_leaves", max_leaves},
          {"max_rounds", max_rounds},
          {"validation_fraction", validation_fraction},
          {"numeric_candidate_quantiles", numeric_candidate_quantiles},
          {"seed", seed}};
}

BoostConfig BoostConfig::from_json(const nlohmann::json& j) {
  BoostConfig c;
  c.learning_rate = j.at("learning_rate").get<double>();
  c.early_stop_patience = j.at("early_stop_patience").get<std::size_t>();
  c.max_depth = j.at("max_depth").get<std::size_t>();
  c.min_leaf_size = j.at("min_leaf_size").get<double>();
  c.max_leaves = j.at("max_leaves").get<std::size_t>();
  c.max_rounds = j.at("max_rounds").get<std::size_t>();
  c.validation_fraction = j.at("validation_fraction").get<double>();
  c.numeric_candidate_quantiles = j.at("numeric_candidate_quantiles").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

BoostedEnsemble::BoostedEnsemble(std::vector<FeatureInfo> features, double base, double learning_rate,
                                 std::vector<RegressionTree> trees, std::size_t best_round)
    : features_(std::move(features)),
      base_(base),
      learning_rate_(learning_rate),
      trees_(std::move(trees)),
      best_round_(best_round) {
  if (best_round_ > trees_.size()) throw InvalidArgument("best_round exceeds the number of trees");
  for (const auto& t : trees_) {
    if (t.features().size() != features_.size()) throw SchemaMismatch("tree features differ from the ensemble");
  }
}

std::vector<double> BoostedEnsemble::predict(const FeatureView& x) const {
  std::vector<double> out(x.rows, base_);
  if (best_round_ == 0) return out;
  const auto cols = trees_.front().resolve(x);
  for (std::size_t k = 0; k < best_round_; ++k) {
    const RegressionTree& t = trees_[k];
    for (std::size_t r = 0; r < x.rows; ++r) out[r] += learning_rate_ * t.nodes()[t.leaf_node(x, cols, r)].value;
  }
  return out;
}

double BoostedEnsemble::predict(const FeatureView& x, std::size_t row) const {
  double out = base_;
  if (best_round_ == 0) return out;
  const auto cols = trees_.front().resolve(x);
  for (std::size_t k = 0; k < best_round_; ++k) {
    const RegressionTree& t = trees_[k];
    out += learning_rate_ * t.nodes()[t.leaf_node(x, cols, row)].value;
  }
  return out;
}

std::vector<double> BoostedEnsemble::feature_gain() const {
  std::vector<double> g(features_.size(), 0.0);
  const double scale = 2.0 * learning_rate_ - learning_rate_ * learning_rate_;
  for (std::size_t k = 0; k < best_round_; ++k) {
    for (const auto& n : trees_[k].nodes()) {
      if (!n.is_leaf()) g[n.feature] += scale * n.gain;
    }
  }
  return g;
}

std::vector<std::pair<std::string, double>> BoostedEnsemble::variable_importance() const {
  const auto g = feature_gain();
  const double total = std::accumulate(g.begin(), g.end(), 0.0);
  std::vector<std::pair<std::string, double>> out;
  if (!(total > 0)) return out;
  std::vector<std::size_t> idx;
  for (std::size_t f = 0; f < g.size(); ++f) {
    if (g[f] > 0) idx.push_back(f);
  }
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return g[a] > g[b]; });
  for (auto f : idx) out.emplace_back(features_[f].name, g[f] / total);
  return out;
}

nlohmann::json BoostedEnsemble::to_json() const {
  nlohmann::json feats = nlohmann::json::array();
  for (const auto& f : features_) {
    feats.push_back({{"name", f.name}, {"kind", to_string(f.kind)}, {"cardinality", f.cardinality}});
  }
  nlohmann::json trees = nlohmann::json::array();
  for (const auto& t : trees_) trees.push_back(t.to_json());
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& h : history_) {
    hist.push_back({h.round, h.train_mse, std::isnan(h.valid_mse) ? nlohmann::json() : nlohmann::json(h.valid_mse)});
  }
  return {{"format", "twice.ensemble"},
          {"version", 1},
          {"features", std::move(feats)},
          {"base_prediction", base_},
          {"learning_rate", learning_rate_},
          {"best_round", best_round_},
          {"trees", std::move(trees)},
          {"history", std::move(hist)}};
}

BoostedEnsemble BoostedEnsemble::from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "twice.ensemble" || j.value("version", 0) != 1) {
    throw SchemaMismatch("not a version 1 ensemble document");
  }
  std::vector<FeatureInfo> feats;
  for (const auto& f : j.at("features")) {
    feats.push_back({f.at("name").get<std::string>(), feature_kind_from_string(f.at("kind").get<std::string>()),
                     f.at("cardinality").get<std::uint32_t>()});
  }
  std::vector<RegressionTree> trees;
  for (const auto& t : j.at("trees")) trees.push_back(RegressionTree::from_json(t));
  BoostedEnsemble e(std::move(feats), j.at("base_prediction").get<double>(), j.at("learning_rate").get<double>(),
                    std::move(trees), j.at("best_round").get<std::size_t>());
  std::vector<RoundLog> hist;
  for (const auto& h : j.at("history")) {
    hist.push_back({h.at(0).get<std::size_t>(), h.at(1).get<double>(),
                    h.at(2).is_null() ? std::numeric_limits<double>::quiet_NaN() : h.at(2).get<double>()});
  }
  e.set_history(std::move(hist));
  return e;
}

BoostedEnsemble fit_boosted(const FeatureView& x, std::span<const double> y, std::span<const std::uint32_t> train_in,
                            std::span<const std::uint32_t> valid_in, const BoostConfig& config) {
  config.validate();
  if (train_in.empty()) throw EmptyInput("fit_boosted: no training rows");
  if (y.size() != x.rows) throw LengthMismatch("fit_boosted: target length differs from rows");
  std::vector<std::uint32_t> train(train_in.begin(), train_in.end());
  std::vector<std::uint32_t> valid(valid_in.begin(), valid_in.end());
  std::sort(train.begin(), train.end());
  std::sort(valid.begin(), valid.end());
  for (auto r : train) {
    if (r >= x.rows) throw InvalidArgument("fit_boosted: training row out of range");
    if (!std::isfinite(y[r])) throw InvalidArgument("fit_boosted: non-finite target");
  }
  for (auto r : valid) {
    if (r >= x.rows) throw InvalidArgument("fit_boosted: validation row out of range");
  }

  double base = 0;
  for (auto r : train) base += y[r];
  base /= static_cast<double>(train.size());

  const std::vector<double> ones(x.rows, 1.0);
  const BinnedFeatures bins = bin_features(x, train, ones, config.numeric_candidate_quantiles);
  const TreeFitConfig tcfg = config.tree_config();
  const double eta = config.learning_rate;

  std::vector<double> fit(x.rows, base), residual(x.rows, 0.0);
  auto mse = [&](const std::vector<std::uint32_t>& rows) {
    double s = 0;
    for (auto r : rows) s += (y[r] - fit[r]) * (y[r] - fit[r]);
    return s / static_cast<double>(rows.size());
  };
  const bool stopping = !valid.empty();
  double best_valid = stopping ? mse(valid) : 0.0;
  std::size_t best_round = 0;
  std::vector<RegressionTree> trees;
  std::vector<RoundLog> history;
  std::vector<std::int32_t> row_leaf;

  for (std::size_t k = 1; k <= config.max_rounds; ++k) {
    for (auto r : train) residual[r] = y[r] - fit[r];
    RegressionTree tree = fit_tree_binned(bins, train, residual, ones, tcfg, &row_leaf);
    const auto& nodes = tree.nodes();
    const auto& leaves = tree.leaf_nodes();
    for (auto r : train) fit[r] += eta * nodes[leaves[static_cast<std::size_t>(row_leaf[r])]].value;
    for (auto r : valid) fit[r] += eta * nodes[route_binned(tree, bins, r)].value;
    trees.push_back(std::move(tree));
    RoundLog log{k, mse(train), stopping ? mse(valid) : std::numeric_limits<double>::quiet_NaN()};
    history.push_back(log);
    if (stopping) {
      if (log.valid_mse < best_valid) {
        best_valid = log.valid_mse;
        best_round = k;
      } else if (k - best_round >= config.early_stop_patience) {
        break;
      }
    } else {
      best_round = k;
    }
    // A single-leaf tree on zero-mean residuals changes nothing from here on.
    if (trees.back().leaf_count() == 1) break;
  }

  BoostedEnsemble e(x.info, base, eta, std::move(trees), best_round);
  e.set_history(std::move(history));
  return e;
}

RowSplit split_by_group(std::span<const std::uint32_t> groups, double fraction, std::uint64_t seed) {
  RowSplit s;
  std::vector<std::uint32_t> ids(groups.begin(), groups.end());
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  std::size_t n_valid = 0;
  if (fraction > 0 && ids.size() >= 2) {
    n_valid = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(ids.size())));
    n_valid = std::clamp<std::size_t>(n_valid, 1, ids.size() - 1);
  }
  Rng rng(seed);
  rng.shuffle(ids);
  std::vector<char> held;
  if (!ids.empty()) held.assign(*std::max_element(ids.begin(), ids.end()) + 1, 0);
  for (std::size_t i = 0; i < n_valid; ++i) held[ids[i]] = 1;
  for (std::size_t r = 0; r < groups.size(); ++r) {
    (held[groups[r]] ? s.valid : s.train).push_back(static_cast<std::uint32_t>(r));
  }
  return s;
}

BoostedEnsemble fit_boosted(const FeatureView& x, std::span<const double> y, std::span<const std::uint32_t> groups,
                            const BoostConfig& config) {
  if (groups.size() != x.rows) throw LengthMismatch("fit_boosted: group length differs from rows");
  const RowSplit s = split_by_group(groups, config.validation_fraction, derive_seed(config.seed, "validation"));
  return fit_boosted(x, y, s.train, s.valid, config);
}

}  // namespace twice
