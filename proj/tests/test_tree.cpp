#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <set>

#include "twice/error.hpp"
#include "twice/tree.hpp"
#include "twice/util.hpp"

using namespace twice;

namespace {

struct Data {
  FeatureTable table;
  std::vector<double> y, w;
};

Data make_data(std::size_t n, std::uint64_t seed, bool with_categorical) {
  Rng rng(seed);
  Data d;
  d.table = FeatureTable(n);
  std::vector<double> x0(n), x1(n), c(n);
  for (std::size_t i = 0; i < n; ++i) {
    x0[i] = rng.normal();
    x1[i] = std::floor(rng.uniform() * 7.0);
    c[i] = static_cast<double>(rng.uniform_int(5));
    double y = (x0[i] > 0.3 ? 1.0 : 0.0) + 0.3 * x1[i] + (c[i] == 2 || c[i] == 4 ? 0.8 : 0.0) + 0.3 * rng.normal();
    d.y.push_back(y);
    d.w.push_back(1.0 + std::floor(rng.uniform() * 3.0));
  }
  d.table.add({"x0", FeatureKind::numeric, 0}, x0);
  d.table.add({"x1", FeatureKind::numeric, 0}, x1);
  if (with_categorical) d.table.add({"c", FeatureKind::categorical, 5}, c);
  return d;
}

double weighted_sse(const RegressionTree& t, const FeatureView& v, const std::vector<double>& y,
                    const std::vector<double>& w) {
  auto p = t.predict(v);
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += w[i] * (y[i] - p[i]) * (y[i] - p[i]);
  return s;
}

// Exhaustive scan of every threshold between distinct values and every
// subset of categorical levels.
double brute_force_best_gain(const FeatureView& v, const std::vector<double>& y, const std::vector<double>& w,
                             double min_leaf) {
  double W = 0, S = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    W += w[i];
    S += w[i] * y[i];
  }
  double best = 0;
  auto eval = [&](auto&& left) {
    double wl = 0, sl = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (left(i)) {
        wl += w[i];
        sl += w[i] * y[i];
      }
    }
    const double wr = W - wl, sr = S - sl;
    if (wl < min_leaf || wr < min_leaf) return;
    best = std::max(best, sl * sl / wl + sr * sr / wr - S * S / W);
  };
  for (std::size_t f = 0; f < v.size(); ++f) {
    const auto col = v.columns[f];
    if (v.info[f].kind == FeatureKind::numeric) {
      std::set<double> distinct(col.begin(), col.end());
      std::vector<double> d(distinct.begin(), distinct.end());
      for (std::size_t k = 0; k + 1 < d.size(); ++k) {
        const double t = 0.5 * (d[k] + d[k + 1]);
        eval([&](std::size_t i) { return col[i] < t; });
      }
    } else {
      const unsigned levels = v.info[f].cardinality;
      for (unsigned mask = 1; mask + 1 < (1U << levels); ++mask) {
        eval([&](std::size_t i) { return ((mask >> static_cast<unsigned>(col[i])) & 1U) != 0; });
      }
    }
  }
  return best;
}

}  // namespace

TEST_CASE("constant target gives one leaf") {
  FeatureTable t(50);
  std::vector<double> x(50);
  for (int i = 0; i < 50; ++i) x[i] = i;
  t.add({"x", FeatureKind::numeric, 0}, x);
  std::vector<double> y(50, 3.25), w(50, 1.0);
  TreeFitConfig c;
  c.min_leaf_size = 1;
  auto tree = fit_tree(t.view(), y, w, c);
  CHECK(tree.leaf_count() == 1);
  CHECK(tree.predict(t.view(), 7) == 3.25);
}

TEST_CASE("step function is recovered with two leaves") {
  FeatureTable t(40);
  std::vector<double> x(40), y(40), w(40, 1.0);
  for (int i = 0; i < 40; ++i) {
    x[i] = -10 + 0.5 * i;
    y[i] = x[i] < 0 ? 0.0 : 1.0;
  }
  t.add({"x", FeatureKind::numeric, 0}, x);
  TreeFitConfig c;
  c.max_leaves = 2;
  c.min_leaf_size = 1;
  auto tree = fit_tree(t.view(), y, w, c);
  REQUIRE(tree.leaf_count() == 2);
  CHECK(std::abs(tree.nodes()[0].threshold - (-0.25)) < 1e-12);
  CHECK(tree.nodes()[tree.leaf_nodes()[0]].value == 0.0);
  CHECK(tree.nodes()[tree.leaf_nodes()[1]].value == 1.0);

  FeatureTable probe(2);
  probe.add({"x", FeatureKind::numeric, 0}, {-5.0, 5.0});
  CHECK(tree.predict(probe.view(), 0) == 0.0);
  CHECK(tree.predict(probe.view(), 1) == 1.0);
}

TEST_CASE("first split matches an exhaustive scan") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Data d = make_data(200, seed, true);
    TreeFitConfig c;
    c.max_leaves = 4;
    c.min_leaf_size = 5;
    auto tree = fit_tree(d.table.view(), d.y, d.w, c);
    REQUIRE(tree.leaf_count() >= 2);
    const double oracle = brute_force_best_gain(d.table.view(), d.y, d.w, c.min_leaf_size);
    CHECK(tree.nodes()[0].gain == doctest::Approx(oracle).epsilon(1e-10));
  }
}

TEST_CASE("leaf values are the routed weighted means and every row reaches one leaf") {
  Data d = make_data(500, 77, true);
  TreeFitConfig c;
  c.max_leaves = 12;
  c.min_leaf_size = 10;
  auto v = d.table.view();
  auto tree = fit_tree(v, d.y, d.w, c);
  CHECK(tree.leaf_count() <= 12);
  auto leaves = tree.leaf_of(v);
  std::vector<double> sw(tree.leaf_count(), 0), swy(tree.leaf_count(), 0);
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    REQUIRE(leaves[i] >= 0);
    sw[leaves[i]] += d.w[i];
    swy[leaves[i]] += d.w[i] * d.y[i];
  }
  for (std::size_t l = 0; l < tree.leaf_count(); ++l) {
    CHECK(sw[l] >= c.min_leaf_size);
    CHECK(std::abs(tree.nodes()[tree.leaf_nodes()[l]].value - swy[l] / sw[l]) <= 1e-10);
  }
}

TEST_CASE("training error does not increase with the leaf budget") {
  Data d = make_data(400, 5, true);
  auto v = d.table.view();
  double prev = INFINITY;
  for (std::size_t k = 1; k <= 24; ++k) {
    TreeFitConfig c;
    c.max_leaves = k;
    c.min_leaf_size = 3;
    const double sse = weighted_sse(fit_tree(v, d.y, d.w, c), v, d.y, d.w);
    CHECK(sse <= prev + 1e-9);
    prev = sse;
  }
}

TEST_CASE("categorical split groups levels by mean and routes unseen levels to the heavier side") {
  FeatureTable t(60);
  std::vector<double> c(60), y(60), w(60, 1.0);
  for (int i = 0; i < 60; ++i) {
    c[i] = i % 3;  // levels 0,1,2; level 3 declared but never seen
    y[i] = (i % 3 == 1) ? 5.0 : 1.0;
  }
  t.add({"c", FeatureKind::categorical, 4}, c);
  TreeFitConfig cfg;
  cfg.max_leaves = 2;
  cfg.min_leaf_size = 1;
  auto tree = fit_tree(t.view(), y, w, cfg);
  const TreeNode& root = tree.nodes()[0];
  CHECK(root.kind == FeatureKind::categorical);
  CHECK(root.left_levels == std::vector<std::uint32_t>{0, 2});
  CHECK(root.right_levels == std::vector<std::uint32_t>{1});
  CHECK(root.default_left);
  FeatureTable probe(1);
  probe.add({"c", FeatureKind::categorical, 4}, {3.0});
  CHECK(tree.predict(probe.view(), 0) == 1.0);
}

TEST_CASE("missing feature at prediction time") {
  Data d = make_data(100, 3, false);
  TreeFitConfig c;
  c.min_leaf_size = 5;
  auto tree = fit_tree(d.table.view(), d.y, d.w, c);
  FeatureTable other(1);
  other.add({"z", FeatureKind::numeric, 0}, {1.0});
  CHECK_THROWS_AS(tree.predict(other.view(), 0), SchemaMismatch);
}

TEST_CASE("input validation") {
  FeatureTable t(3);
  t.add({"x", FeatureKind::numeric, 0}, {1.0, 2.0, 3.0});
  std::vector<double> y{1, 2, 3}, zero(3, 0.0);
  CHECK_THROWS_AS(fit_tree(t.view(), y, zero, TreeFitConfig{}), AllWeightsZero);
  FeatureTable empty(0);
  CHECK_THROWS_AS(fit_tree(empty.view(), {}, {}, TreeFitConfig{}), EmptyInput);
}

TEST_CASE("json round trip and refit are bit identical") {
  Data d = make_data(300, 21, true);
  TreeFitConfig c;
  c.max_leaves = 10;
  c.min_leaf_size = 4;
  auto v = d.table.view();
  auto a = fit_tree(v, d.y, d.w, c);
  auto b = fit_tree(v, d.y, d.w, c);
  CHECK(a.to_json().dump() == b.to_json().dump());
  auto r = RegressionTree::from_json(nlohmann::json::parse(a.to_json().dump()));
  CHECK(r.to_json().dump() == a.to_json().dump());
  auto pa = a.predict(v), pr = r.predict(v);
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i] == pr[i]);
}

TEST_CASE("quantile candidates on many distinct values") {
  Rng rng(8);
  const std::size_t n = 5000;
  std::vector<double> x(n), y(n), w(n, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = rng.normal();
    y[i] = x[i] > 0.5 ? 2.0 : 0.0;
  }
  FeatureTable t(n);
  t.add({"x", FeatureKind::numeric, 0}, x);
  std::vector<std::uint32_t> rows(n);
  for (std::size_t i = 0; i < n; ++i) rows[i] = static_cast<std::uint32_t>(i);
  auto b = bin_features(t.view(), rows, w, 255);
  CHECK(b.thresholds[0].size() <= 255);
  CHECK(b.thresholds[0].size() >= 250);
  CHECK(std::is_sorted(b.thresholds[0].begin(), b.thresholds[0].end()));
  TreeFitConfig c;
  c.max_leaves = 2;
  auto tree = fit_tree(t.view(), y, w, c);
  CHECK(std::abs(tree.nodes()[0].threshold - 0.5) < 0.02);
  // Binned routing agrees with routing on raw values.
  auto fitted = fit_tree_binned(b, rows, y, w, c);
  for (std::size_t i = 0; i < n; i += 7) {
    CHECK(fitted.nodes()[route_binned(fitted, b, i)].value == fitted.predict(t.view(), i));
  }
}
