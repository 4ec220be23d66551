#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <utility>
#include <vector>

#include "json.hpp"
#include "twice/panel.hpp"

namespace twice {

class UnionFind {
 public:
  explicit UnionFind(std::size_t n);
  std::size_t find(std::size_t x);
  bool unite(std::size_t a, std::size_t b);
  std::size_t size() const noexcept { return parent_.size(); }

 private:
  std::vector<std::size_t> parent_;
  std::vector<std::uint32_t> rank_;
};

// Components of the bipartite worker-firm graph. Labels are dense and
// numbered in order of the first row that touches each component.
struct MobilityGraph {
  std::vector<std::uint32_t> worker_label;
  std::vector<std::uint32_t> firm_label;
  std::vector<std::size_t> component_rows;
  std::size_t component_count() const noexcept { return component_rows.size(); }
};

MobilityGraph mobility_graph(const Panel& panel);

struct ConnectivityStats {
  std::size_t workers_before = 0, firms_before = 0, rows_before = 0;
  std::size_t workers_after = 0, firms_after = 0, rows_after = 0;
  std::size_t components = 0;
  double mean_firms_per_worker = 0;
  double mean_workers_per_firm = 0;
  double share_workers_three_plus_firms = 0;
  double worker_retention = 0;

  nlohmann::json to_json() const;
};

struct ConnectedSet {
  Panel panel;
  ConnectivityStats stats;
};

// Ties in component size go to the component with more rows, then to the one
// holding the lexicographically smallest firm id.
ConnectedSet largest_connected_set(const Panel& panel);

struct EventStudyCell {
  int origin_q = 0;  // 1-based quartile
  int dest_q = 0;
  int event_time = 0;
  double mean_log_wage = 0;
  std::size_t n = 0;
};

struct EventStudyTable {
  std::size_t quantiles = 4;
  std::vector<double> cutoffs;
  std::vector<EventStudyCell> cells;
  // Origin and destination pairs without a qualifying mover.
  std::vector<std::pair<int, int>> insufficient;
  std::size_t movers = 0;

  void write_csv(std::ostream& out) const;
};

struct EventStudyConfig {
  std::size_t quantiles = 4;
  int pre_years = 2;
  int post_years = 2;
};

EventStudyTable event_study(const Panel& panel, const EventStudyConfig& config = {});

}  // namespace twice
