#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <queue>

#include "twice/error.hpp"
#include "twice/graph.hpp"
#include "twice/synthetic.hpp"

using namespace twice;

namespace {

Panel from_rows(const std::vector<std::tuple<std::string, std::string, int, double>>& rows) {
  PanelBuilder b{ColumnSchema{}};
  for (const auto& [w, f, y, v] : rows) b.add(w, f, y, v, {});
  return std::move(b).build();
}

}  // namespace

TEST_CASE("single pair is its own connected set") {
  Panel p = from_rows({{"w", "f", 2000, 1.0}, {"w", "f", 2001, 1.2}});
  auto cs = largest_connected_set(p);
  CHECK(cs.panel.size() == 2);
  CHECK(cs.stats.worker_retention == 1.0);
  CHECK(cs.stats.components == 1);
}

TEST_CASE("tie on nodes goes to the component with more rows") {
  Panel p = from_rows({{"a", "x", 2000, 1.0},
                       {"b", "y", 2000, 1.0},
                       {"b", "y", 2001, 1.0},
                       {"b", "y", 2002, 1.0}});
  auto cs = largest_connected_set(p);
  CHECK(cs.panel.size() == 3);
  CHECK(cs.panel.worker_name(0) == "b");
  CHECK(cs.stats.worker_retention == 0.5);
}

TEST_CASE("full tie goes to the smallest firm id") {
  Panel p = from_rows({{"a", "z", 2000, 1.0}, {"b", "m", 2000, 1.0}});
  auto cs = largest_connected_set(p);
  CHECK(cs.panel.firm_name(0) == "m");
}

TEST_CASE("component labels agree with breadth first search") {
  Rng rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    // 100 workers and 100 firms, sparse random edges.
    const std::size_t nw = 100, nf = 100;
    PanelBuilder b{ColumnSchema{}};
    std::vector<std::pair<std::size_t, std::size_t>> edges;
    for (std::size_t w = 0; w < nw; ++w) {
      const std::size_t spells = 1 + rng.uniform_int(2);
      for (std::size_t s = 0; s < spells; ++s) {
        const std::size_t f = rng.uniform_int(nf);
        b.add("w" + std::to_string(w), "f" + std::to_string(f), 2000 + static_cast<int>(s), 1.0, {});
        edges.emplace_back(w, f);
      }
    }
    Panel p = std::move(b).build();
    auto g = mobility_graph(p);

    // BFS over name-keyed adjacency, independent of the panel's indices.
    std::vector<std::vector<std::size_t>> adj(nw + nf);
    for (auto [w, f] : edges) {
      adj[w].push_back(nw + f);
      adj[nw + f].push_back(w);
    }
    std::vector<int> comp(nw + nf, -1);
    int next = 0;
    for (std::size_t s = 0; s < nw + nf; ++s) {
      if (comp[s] != -1) continue;
      std::queue<std::size_t> q;
      q.push(s);
      comp[s] = next;
      while (!q.empty()) {
        auto u = q.front();
        q.pop();
        for (auto v : adj[u]) {
          if (comp[v] == -1) {
            comp[v] = next;
            q.push(v);
          }
        }
      }
      ++next;
    }
    auto label_of = [&](std::size_t node) -> std::uint32_t {
      if (node < nw) return g.worker_label[*p.find_worker("w" + std::to_string(node))];
      return g.firm_label[*p.find_firm("f" + std::to_string(node - nw))];
    };
    std::vector<std::size_t> present;
    for (std::size_t w = 0; w < nw; ++w) present.push_back(w);
    for (std::size_t f = 0; f < nf; ++f) {
      if (p.find_firm("f" + std::to_string(f))) present.push_back(nw + f);
    }
    for (std::size_t i = 0; i < present.size(); ++i) {
      for (std::size_t j = i + 1; j < present.size(); ++j) {
        const bool same_bfs = comp[present[i]] == comp[present[j]];
        const bool same_uf = label_of(present[i]) == label_of(present[j]);
        REQUIRE(same_bfs == same_uf);
      }
    }
    std::size_t total = 0;
    for (auto n : g.component_rows) total += n;
    CHECK(total == p.size());

    auto once = largest_connected_set(p);
    auto twice_ = largest_connected_set(once.panel);
    CHECK(twice_.panel.size() == once.panel.size());
    CHECK(twice_.stats.components == 1);
  }
}

TEST_CASE("event study needs four years") {
  Panel p = from_rows({{"a", "x", 2000, 1.0}, {"a", "x", 2002, 1.0}});
  CHECK_THROWS_AS(event_study(p), InvalidArgument);
}

TEST_CASE("no movers leaves every pair without events") {
  Panel p = from_rows({{"a", "x", 2000, 1.0}, {"a", "x", 2001, 1.0}, {"a", "x", 2002, 1.0},
                       {"a", "x", 2003, 1.0}, {"b", "y", 2000, 2.0}, {"b", "y", 2003, 2.0}});
  auto t = event_study(p);
  CHECK(t.cells.empty());
  CHECK(t.insufficient.size() == 16);
}

TEST_CASE("single bottom to top mover keeps its wage profile") {
  // Firms lo1..lo2 pay about 0, hi1..hi2 pay about 5; the mover goes from lo1 to hi2.
  std::vector<std::tuple<std::string, std::string, int, double>> rows;
  for (int y = 2000; y < 2004; ++y) {
    rows.push_back({"c1", "lo1", y, 0.0});
    rows.push_back({"c2", "lo2", y, 0.1});
    rows.push_back({"c3", "hi1", y, 5.0});
    rows.push_back({"c4", "hi2", y, 5.1});
  }
  rows.push_back({"m", "lo1", 2000, 1.0});
  rows.push_back({"m", "lo1", 2001, 1.0});
  rows.push_back({"m", "hi2", 2002, 2.0});
  rows.push_back({"m", "hi2", 2003, 2.0});
  auto t = event_study(from_rows(rows));
  CHECK(t.movers == 1);
  REQUIRE(t.cells.size() == 4);
  const double expect[] = {1, 1, 2, 2};
  for (int k = 0; k < 4; ++k) {
    CHECK(t.cells[k].origin_q == 1);
    CHECK(t.cells[k].dest_q == 4);
    CHECK(t.cells[k].event_time == k - 2);
    CHECK(t.cells[k].mean_log_wage == expect[k]);
  }
  CHECK(t.insufficient.size() == 15);
}

TEST_CASE("additive generator gives symmetric gains and losses") {
  SyntheticSpec s;
  s.n_workers = 20000;
  s.n_firms = 200;
  s.n_years = 6;
  s.sorting_strength = 0.0;
  s.move_probability = 0.3;
  s.noise_sd = 0.1;
  s.seed = 12;
  auto sim = simulate(s);
  auto t = event_study(sim.panel);
  auto gain = [&](int qo, int qd) {
    double pre = 0, post = 0;
    int found = 0;
    for (const auto& c : t.cells) {
      if (c.origin_q != qo || c.dest_q != qd) continue;
      ++found;
      (c.event_time < 0 ? pre : post) += c.mean_log_wage / 2.0;
    }
    REQUIRE(found == 4);
    return post - pre;
  };
  const double up = gain(1, 4), down = gain(4, 1);
  const double true_gap = sim.truth.psi[3] - sim.truth.psi[0];
  CHECK(std::abs(up + down) <= 0.05);
  CHECK(std::abs(up - true_gap) <= 0.05);
}
