#include "twice/tree.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "twice/error.hpp"

namespace twice {

void TreeFitConfig::validate() const {
  if (max_leaves < 1) throw InvalidArgument("max_leaves must be at least 1");
  if (!(min_leaf_size >= 1.0)) throw InvalidArgument("min_leaf_size must be at least 1");
  if (numeric_candidate_quantiles < 1 || numeric_candidate_quantiles > 65534) {
    throw InvalidArgument("numeric_candidate_quantiles must be in [1, 65534]");
  }
}

RegressionTree::RegressionTree(std::vector<FeatureInfo> features, std::vector<TreeNode> nodes)
    : features_(std::move(features)), nodes_(std::move(nodes)) {
  if (nodes_.empty()) throw InvalidArgument("tree without nodes");
  // Leaves are numbered left to right.
  std::vector<std::uint32_t> stack{0};
  while (!stack.empty()) {
    const std::uint32_t id = stack.back();
    stack.pop_back();
    if (id >= nodes_.size()) throw InvalidArgument("tree child index out of range");
    TreeNode& n = nodes_[id];
    if (n.is_leaf()) {
      n.leaf_index = static_cast<std::int32_t>(leaf_nodes_.size());
      leaf_nodes_.push_back(id);
    } else {
      if (n.right < 0 || n.feature >= features_.size()) throw InvalidArgument("malformed tree node");
      n.leaf_index = -1;
      stack.push_back(static_cast<std::uint32_t>(n.right));
      stack.push_back(static_cast<std::uint32_t>(n.left));
    }
  }
}

std::vector<std::size_t> RegressionTree::resolve(const FeatureView& x) const {
  std::vector<std::size_t> cols(features_.size());
  for (std::size_t f = 0; f < features_.size(); ++f) {
    std::size_t j = x.size();
    for (std::size_t k = 0; k < x.size(); ++k) {
      if (x.info[k].name == features_[f].name) {
        j = k;
        break;
      }
    }
    if (j == x.size()) throw SchemaMismatch("input lacks feature '" + features_[f].name + "'");
    if (x.info[j].kind != features_[f].kind) {
      throw SchemaMismatch("feature '" + features_[f].name + "' has a different kind than at fit time");
    }
    cols[f] = j;
  }
  return cols;
}

namespace {

bool goes_left(const TreeNode& n, double v) {
  if (n.kind == FeatureKind::numeric) return v < n.threshold;
  if (v >= 0 && v == std::floor(v) && v < 4294967296.0) {
    const auto code = static_cast<std::uint32_t>(v);
    if (std::binary_search(n.left_levels.begin(), n.left_levels.end(), code)) return true;
    if (std::binary_search(n.right_levels.begin(), n.right_levels.end(), code)) return false;
  }
  return n.default_left;
}

}  // namespace

std::uint32_t RegressionTree::leaf_node(const FeatureView& x, std::span<const std::size_t> cols,
                                        std::size_t row) const {
  std::uint32_t id = 0;
  while (!nodes_[id].is_leaf()) {
    const TreeNode& n = nodes_[id];
    const double v = x.columns[cols[n.feature]][row];
    id = static_cast<std::uint32_t>(goes_left(n, v) ? n.left : n.right);
  }
  return id;
}

double RegressionTree::predict(const FeatureView& x, std::size_t row) const {
  const auto cols = resolve(x);
  return nodes_[leaf_node(x, cols, row)].value;
}

std::vector<double> RegressionTree::predict(const FeatureView& x) const {
  const auto cols = resolve(x);
  std::vector<double> out(x.rows);
  for (std::size_t r = 0; r < x.rows; ++r) out[r] = nodes_[leaf_node(x, cols, r)].value;
  return out;
}

std::int32_t RegressionTree::leaf_of(const FeatureView& x, std::size_t row) const {
  const auto cols = resolve(x);
  return nodes_[leaf_node(x, cols, row)].leaf_index;
}

std::vector<std::int32_t> RegressionTree::leaf_of(const FeatureView& x) const {
  const auto cols = resolve(x);
  std::vector<std::int32_t> out(x.rows);
  for (std::size_t r = 0; r < x.rows; ++r) out[r] = nodes_[leaf_node(x, cols, r)].leaf_index;
  return out;
}

nlohmann::json RegressionTree::to_json() const {
  nlohmann::json feats = nlohmann::json::array();
  for (const auto& f : features_) {
    feats.push_back({{"name", f.name}, {"kind", to_string(f.kind)}, {"cardinality", f.cardinality}});
  }
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : nodes_) {
    nlohmann::json e = {{"value", n.value}, {"weight", n.weight}, {"depth", n.depth}};
    if (!n.is_leaf()) {
      e["left"] = n.left;
      e["right"] = n.right;
      e["feature"] = n.feature;
      e["gain"] = n.gain;
      if (n.kind == FeatureKind::numeric) {
        e["threshold"] = n.threshold;
      } else {
        e["left_levels"] = n.left_levels;
        e["right_levels"] = n.right_levels;
        e["default_left"] = n.default_left;
      }
    }
    nodes.push_back(std::move(e));
  }
  return {{"format", "twice.tree"}, {"version", 1}, {"features", std::move(feats)}, {"nodes", std::move(nodes)}};
}

RegressionTree RegressionTree::from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "twice.tree" || j.value("version", 0) != 1) {
    throw SchemaMismatch("not a version 1 tree document");
  }
  std::vector<FeatureInfo> feats;
  for (const auto& f : j.at("features")) {
    feats.push_back({f.at("name").get<std::string>(), feature_kind_from_string(f.at("kind").get<std::string>()),
                     f.at("cardinality").get<std::uint32_t>()});
  }
  std::vector<TreeNode> nodes;
  for (const auto& e : j.at("nodes")) {
    TreeNode n;
    n.value = e.at("value").get<double>();
    n.weight = e.at("weight").get<double>();
    n.depth = e.at("depth").get<std::uint32_t>();
    if (e.contains("left")) {
      n.left = e.at("left").get<std::int32_t>();
      n.right = e.at("right").get<std::int32_t>();
      n.feature = e.at("feature").get<std::uint32_t>();
      n.gain = e.at("gain").get<double>();
      if (n.feature >= feats.size()) throw SchemaMismatch("tree node references an unknown feature");
      n.kind = feats[n.feature].kind;
      if (n.kind == FeatureKind::numeric) {
        n.threshold = e.at("threshold").get<double>();
      } else {
        n.left_levels = e.at("left_levels").get<std::vector<std::uint32_t>>();
        n.right_levels = e.at("right_levels").get<std::vector<std::uint32_t>>();
        n.default_left = e.at("default_left").get<bool>();
      }
    }
    nodes.push_back(std::move(n));
  }
  return RegressionTree(std::move(feats), std::move(nodes));
}

BinnedFeatures bin_features(const FeatureView& x, std::span<const std::uint32_t> fit_rows,
                            std::span<const double> weights, std::size_t max_candidates) {
  if (weights.size() != x.rows) throw LengthMismatch("bin_features: weights length differs from rows");
  BinnedFeatures b;
  b.info = x.info;
  b.rows = x.rows;
  b.thresholds.resize(x.size());
  b.bins.resize(x.size());
  b.bin_count.resize(x.size());
  std::vector<std::pair<double, double>> vw;
  for (std::size_t f = 0; f < x.size(); ++f) {
    const auto col = x.columns[f];
    auto& bins = b.bins[f];
    bins.resize(x.rows);
    if (x.info[f].kind == FeatureKind::categorical) {
      std::uint32_t count = x.info[f].cardinality;
      for (std::size_t r = 0; r < x.rows; ++r) {
        const double v = col[r];
        if (!(v >= 0) || v != std::floor(v) || v >= 65535.0) {
          throw InvalidArgument("categorical feature '" + x.info[f].name + "' has an invalid code");
        }
        bins[r] = static_cast<std::uint16_t>(v);
        count = std::max<std::uint32_t>(count, bins[r] + 1U);
      }
      b.bin_count[f] = std::max<std::uint32_t>(count, 1);
      continue;
    }
    vw.clear();
    for (auto r : fit_rows) {
      if (weights[r] > 0) vw.emplace_back(col[r], weights[r]);
    }
    std::sort(vw.begin(), vw.end());
    // Distinct values with aggregated weight.
    std::vector<double> vals, cum;
    double total = 0;
    for (const auto& [v, w] : vw) {
      total += w;
      if (vals.empty() || v != vals.back()) {
        vals.push_back(v);
        cum.push_back(total);
      } else {
        cum.back() = total;
      }
    }
    auto& thr = b.thresholds[f];
    const auto midpoint = [&](std::size_t i) {
      double m = vals[i] + (vals[i + 1] - vals[i]) / 2.0;
      if (!(m > vals[i])) m = vals[i + 1];
      return m;
    };
    if (vals.size() <= max_candidates) {
      for (std::size_t i = 0; i + 1 < vals.size(); ++i) thr.push_back(midpoint(i));
    } else {
      std::size_t i = 0;
      for (std::size_t k = 1; k <= max_candidates; ++k) {
        const double target = total * static_cast<double>(k) / static_cast<double>(max_candidates + 1);
        while (i < vals.size() && cum[i] < target) ++i;
        if (i + 1 >= vals.size()) break;
        const double m = midpoint(i);
        if (thr.empty() || m > thr.back()) thr.push_back(m);
      }
    }
    b.bin_count[f] = static_cast<std::uint32_t>(thr.size() + 1);
    for (std::size_t r = 0; r < x.rows; ++r) {
      bins[r] = static_cast<std::uint16_t>(std::upper_bound(thr.begin(), thr.end(), col[r]) - thr.begin());
    }
  }
  return b;
}

namespace {

struct Hist {
  double w = 0;
  double s = 0;
};

struct Split {
  bool valid = false;
  double gain = 0;
  std::uint32_t feature = 0;
  FeatureKind kind = FeatureKind::numeric;
  std::uint32_t bin = 0;
  std::vector<std::uint32_t> left_levels, right_levels;
  bool default_left = true;
};

struct Frontier {
  std::uint32_t node;
  std::size_t begin, end;  // range in the row permutation
  Split split;
};

class Grower {
 public:
  Grower(const BinnedFeatures& x, std::span<const double> y, std::span<const double> w, const TreeFitConfig& c)
      : x_(x), y_(y), w_(w), c_(c) {
    std::uint32_t max_bins = 1;
    for (auto n : x.bin_count) max_bins = std::max(max_bins, n);
    hist_.resize(max_bins);
  }

  RegressionTree grow(std::span<const std::uint32_t> rows, std::vector<std::int32_t>* row_leaf) {
    perm_.assign(rows.begin(), rows.end());
    double sum_wyy = 0;
    for (auto r : perm_) sum_wyy += w_[r] * y_[r] * y_[r];
    min_gain_ = 1e-12 * sum_wyy;

    nodes_.clear();
    nodes_.push_back(make_node(0, perm_.size(), 0));
    if (nodes_[0].weight <= 0) throw AllWeightsZero("all training weights are zero");
    std::vector<Frontier> frontier;
    frontier.push_back({0, 0, perm_.size(), best_split(0, 0, perm_.size())});
    std::size_t leaves = 1;

    while (leaves < c_.max_leaves) {
      std::size_t pick = frontier.size();
      for (std::size_t i = 0; i < frontier.size(); ++i) {
        const Split& s = frontier[i].split;
        if (!s.valid) continue;
        if (pick == frontier.size() || s.gain > frontier[pick].split.gain ||
            (s.gain == frontier[pick].split.gain && frontier[i].node < frontier[pick].node)) {
          pick = i;
        }
      }
      if (pick == frontier.size()) break;
      Frontier f = std::move(frontier[pick]);
      frontier.erase(frontier.begin() + static_cast<std::ptrdiff_t>(pick));
      const std::size_t mid = partition(f);
      const auto left_id = static_cast<std::uint32_t>(nodes_.size());
      const std::uint32_t depth = nodes_[f.node].depth + 1;
      nodes_.push_back(make_node(f.begin, mid, depth));
      nodes_.push_back(make_node(mid, f.end, depth));
      TreeNode& n = nodes_[f.node];
      n.left = static_cast<std::int32_t>(left_id);
      n.right = static_cast<std::int32_t>(left_id + 1);
      n.feature = f.split.feature;
      n.kind = f.split.kind;
      n.gain = f.split.gain;
      if (n.kind == FeatureKind::numeric) {
        n.threshold = x_.thresholds[n.feature][f.split.bin];
      } else {
        n.left_levels = std::move(f.split.left_levels);
        n.right_levels = std::move(f.split.right_levels);
        n.default_left = f.split.default_left;
      }
      ++leaves;
      frontier.push_back({left_id, f.begin, mid, {}});
      frontier.push_back({left_id + 1, mid, f.end, {}});
      if (leaves < c_.max_leaves) {
        for (std::size_t k = frontier.size() - 2; k < frontier.size(); ++k) {
          frontier[k].split = best_split(frontier[k].node, frontier[k].begin, frontier[k].end);
        }
      }
    }

    RegressionTree tree(x_.info, std::move(nodes_));
    if (row_leaf) {
      row_leaf->assign(x_.rows, -1);
      for (const auto& f : frontier) {
        const std::int32_t leaf = tree.nodes()[f.node].leaf_index;
        for (std::size_t i = f.begin; i < f.end; ++i) (*row_leaf)[perm_[i]] = leaf;
      }
    }
    return tree;
  }

 private:
  TreeNode make_node(std::size_t begin, std::size_t end, std::uint32_t depth) {
    TreeNode n;
    double sw = 0, swy = 0;
    for (std::size_t i = begin; i < end; ++i) {
      const auto r = perm_[i];
      sw += w_[r];
      swy += w_[r] * y_[r];
    }
    n.weight = sw;
    n.value = sw > 0 ? swy / sw : 0.0;
    n.depth = depth;
    return n;
  }

  bool row_left(const Split& s, std::uint32_t r) const {
    const std::uint16_t b = x_.bins[s.feature][r];
    if (s.kind == FeatureKind::numeric) return b <= s.bin;
    if (std::binary_search(s.left_levels.begin(), s.left_levels.end(), b)) return true;
    if (std::binary_search(s.right_levels.begin(), s.right_levels.end(), b)) return false;
    return s.default_left;
  }

  std::size_t partition(const Frontier& f) {
    auto first = perm_.begin() + static_cast<std::ptrdiff_t>(f.begin);
    auto last = perm_.begin() + static_cast<std::ptrdiff_t>(f.end);
    auto mid = std::stable_partition(first, last, [&](std::uint32_t r) { return row_left(f.split, r); });
    return static_cast<std::size_t>(mid - perm_.begin());
  }

  Split best_split(std::uint32_t node, std::size_t begin, std::size_t end) {
    Split best;
    const TreeNode& n = nodes_[node];
    if (n.depth >= c_.max_depth) return best;
    const double W = n.weight;
    if (W < 2.0 * c_.min_leaf_size) return best;
    double S = 0;
    for (std::size_t i = begin; i < end; ++i) S += w_[perm_[i]] * y_[perm_[i]];
    const double parent = S * S / W;
    const double floor_gain = std::max(min_gain_, 0.0);

    std::vector<std::uint32_t> order;
    for (std::uint32_t f = 0; f < x_.info.size(); ++f) {
      const std::uint32_t nb = x_.bin_count[f];
      if (nb < 2) continue;
      std::fill(hist_.begin(), hist_.begin() + nb, Hist{});
      const auto& bins = x_.bins[f];
      for (std::size_t i = begin; i < end; ++i) {
        const auto r = perm_[i];
        Hist& h = hist_[bins[r]];
        h.w += w_[r];
        h.s += w_[r] * y_[r];
      }
      const auto consider = [&](double wl, double sl) {
        const double wr = W - wl;
        if (!(wl >= c_.min_leaf_size && wr >= c_.min_leaf_size && wl > 0 && wr > 0)) return false;
        const double sr = S - sl;
        const double gain = sl * sl / wl + sr * sr / wr - parent;
        if (gain > floor_gain && (!best.valid || gain > best.gain)) {
          best.valid = true;
          best.gain = gain;
          return true;
        }
        return false;
      };
      if (x_.info[f].kind == FeatureKind::numeric) {
        double wl = 0, sl = 0;
        for (std::uint32_t b = 0; b + 1 < nb; ++b) {
          wl += hist_[b].w;
          sl += hist_[b].s;
          if (consider(wl, sl)) {
            best.feature = f;
            best.kind = FeatureKind::numeric;
            best.bin = b;
          }
        }
      } else {
        order.clear();
        for (std::uint32_t b = 0; b < nb; ++b) {
          if (hist_[b].w > 0) order.push_back(b);
        }
        std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
          const double ma = hist_[a].s / hist_[a].w, mb = hist_[b].s / hist_[b].w;
          if (ma != mb) return ma < mb;
          return a < b;
        });
        double wl = 0, sl = 0;
        for (std::size_t k = 0; k + 1 < order.size(); ++k) {
          wl += hist_[order[k]].w;
          sl += hist_[order[k]].s;
          if (consider(wl, sl)) {
            best.feature = f;
            best.kind = FeatureKind::categorical;
            best.left_levels.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k + 1));
            best.right_levels.assign(order.begin() + static_cast<std::ptrdiff_t>(k + 1), order.end());
            std::sort(best.left_levels.begin(), best.left_levels.end());
            std::sort(best.right_levels.begin(), best.right_levels.end());
            best.default_left = wl >= W - wl;
          }
        }
      }
    }
    return best;
  }

  const BinnedFeatures& x_;
  std::span<const double> y_;
  std::span<const double> w_;
  const TreeFitConfig& c_;
  std::vector<Hist> hist_;
  std::vector<std::uint32_t> perm_;
  std::vector<TreeNode> nodes_;
  double min_gain_ = 0;
};

}  // namespace

RegressionTree fit_tree_binned(const BinnedFeatures& x, std::span<const std::uint32_t> rows,
                               std::span<const double> targets, std::span<const double> weights,
                               const TreeFitConfig& config, std::vector<std::int32_t>* row_leaf) {
  config.validate();
  if (rows.empty()) throw EmptyInput("fit_tree: no training rows");
  if (targets.size() != x.rows || weights.size() != x.rows) {
    throw LengthMismatch("fit_tree: targets or weights length differs from rows");
  }
  Grower g(x, targets, weights, config);
  return g.grow(rows, row_leaf);
}

std::uint32_t route_binned(const RegressionTree& tree, const BinnedFeatures& x, std::size_t row) {
  const auto& nodes = tree.nodes();
  std::uint32_t id = 0;
  while (!nodes[id].is_leaf()) {
    const TreeNode& n = nodes[id];
    const std::uint16_t b = x.bins[n.feature][row];
    bool left;
    if (n.kind == FeatureKind::numeric) {
      // Thresholds increase strictly, so this is "bin <= split bin".
      const auto& thr = x.thresholds[n.feature];
      left = b < thr.size() && thr[b] <= n.threshold;
    } else if (std::binary_search(n.left_levels.begin(), n.left_levels.end(), b)) {
      left = true;
    } else if (std::binary_search(n.right_levels.begin(), n.right_levels.end(), b)) {
      left = false;
    } else {
      left = n.default_left;
    }
    id = static_cast<std::uint32_t>(left ? n.left : n.right);
  }
  return id;
}

RegressionTree fit_tree(const FeatureView& x, std::span<const double> targets, std::span<const double> weights,
                        const TreeFitConfig& config) {
  config.validate();
  if (x.rows == 0) throw EmptyInput("fit_tree: no training rows");
  if (targets.size() != x.rows || weights.size() != x.rows) {
    throw LengthMismatch("fit_tree: targets or weights length differs from rows");
  }
  double total = 0;
  for (std::size_t r = 0; r < x.rows; ++r) {
    if (!std::isfinite(targets[r])) throw InvalidArgument("fit_tree: non-finite target");
    if (!(weights[r] >= 0) || !std::isfinite(weights[r])) throw InvalidArgument("fit_tree: negative weight");
    total += weights[r];
  }
  if (!(total > 0)) throw AllWeightsZero("all training weights are zero");
  std::vector<std::uint32_t> rows(x.rows);
  std::iota(rows.begin(), rows.end(), 0U);
  const BinnedFeatures b = bin_features(x, rows, weights, config.numeric_candidate_quantiles);
  return fit_tree_binned(b, rows, targets, weights, config);
}

}  // namespace twice
