#include "twice/graph.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <tuple>
#include <unordered_map>

#include "twice/error.hpp"
#include "twice/util.hpp"

namespace twice {

UnionFind::UnionFind(std::size_t n) : parent_(n), rank_(n, 0) {
  std::iota(parent_.begin(), parent_.end(), std::size_t{0});
}

std::size_t UnionFind::find(std::size_t x) {
  std::size_t root = x;
  while (parent_[root] != root) root = parent_[root];
  while (parent_[x] != root) {
    std::size_t next = parent_[x];
    parent_[x] = root;
    x = next;
  }
  return root;
}

bool UnionFind::unite(std::size_t a, std::size_t b) {
  a = find(a);
  b = find(b);
  if (a == b) return false;
  if (rank_[a] < rank_[b]) std::swap(a, b);
  parent_[b] = a;
  if (rank_[a] == rank_[b]) ++rank_[a];
  return true;
}

MobilityGraph mobility_graph(const Panel& panel) {
  const std::size_t nw = panel.worker_count();
  UnionFind uf(nw + panel.firm_count());
  for (std::size_t r = 0; r < panel.size(); ++r) uf.unite(panel.worker(r), nw + panel.firm(r));

  MobilityGraph g;
  std::vector<std::uint32_t> label_of_root(uf.size(), UINT32_MAX);
  g.worker_label.assign(nw, UINT32_MAX);
  g.firm_label.assign(panel.firm_count(), UINT32_MAX);
  for (std::size_t r = 0; r < panel.size(); ++r) {
    const std::size_t root = uf.find(panel.worker(r));
    if (label_of_root[root] == UINT32_MAX) {
      label_of_root[root] = static_cast<std::uint32_t>(g.component_rows.size());
      g.component_rows.push_back(0);
    }
    const std::uint32_t label = label_of_root[root];
    g.worker_label[panel.worker(r)] = label;
    g.firm_label[panel.firm(r)] = label;
    ++g.component_rows[label];
  }
  return g;
}

nlohmann::json ConnectivityStats::to_json() const {
  return {{"workers_before", workers_before},
          {"firms_before", firms_before},
          {"rows_before", rows_before},
          {"workers_after", workers_after},
          {"firms_after", firms_after},
          {"rows_after", rows_after},
          {"components", components},
          {"mean_firms_per_worker", mean_firms_per_worker},
          {"mean_workers_per_firm", mean_workers_per_firm},
          {"share_workers_three_plus_firms", share_workers_three_plus_firms},
          {"worker_retention", worker_retention}};
}

ConnectedSet largest_connected_set(const Panel& panel) {
  if (panel.empty()) throw EmptyInput("largest_connected_set: empty panel");
  const MobilityGraph g = mobility_graph(panel);
  const std::size_t nc = g.component_count();

  std::vector<std::size_t> nodes(nc, 0);
  std::vector<const std::string*> min_firm(nc, nullptr);
  for (std::size_t w = 0; w < g.worker_label.size(); ++w) ++nodes[g.worker_label[w]];
  for (std::size_t f = 0; f < g.firm_label.size(); ++f) {
    const std::uint32_t c = g.firm_label[f];
    ++nodes[c];
    const std::string& name = panel.firm_name(static_cast<std::uint32_t>(f));
    if (!min_firm[c] || name < *min_firm[c]) min_firm[c] = &name;
  }
  std::size_t best = 0;
  for (std::size_t c = 1; c < nc; ++c) {
    if (nodes[c] != nodes[best]) {
      if (nodes[c] > nodes[best]) best = c;
    } else if (g.component_rows[c] != g.component_rows[best]) {
      if (g.component_rows[c] > g.component_rows[best]) best = c;
    } else if (*min_firm[c] < *min_firm[best]) {
      best = c;
    }
  }

  std::vector<std::size_t> keep;
  keep.reserve(g.component_rows[best]);
  for (std::size_t r = 0; r < panel.size(); ++r) {
    if (g.worker_label[panel.worker(r)] == best) keep.push_back(r);
  }
  ConnectedSet out{keep.size() == panel.size() ? panel : panel.select(keep), {}};

  ConnectivityStats& s = out.stats;
  const Panel& p = out.panel;
  s.workers_before = panel.worker_count();
  s.firms_before = panel.firm_count();
  s.rows_before = panel.size();
  s.workers_after = p.worker_count();
  s.firms_after = p.firm_count();
  s.rows_after = p.size();
  s.components = nc;
  std::size_t three_plus = 0;
  double firms_per_worker = 0;
  for (std::uint32_t w = 0; w < p.worker_count(); ++w) {
    std::set<std::uint32_t> fs;
    for (auto r : p.rows_of_worker(w)) fs.insert(p.firm(r));
    firms_per_worker += static_cast<double>(fs.size());
    if (fs.size() >= 3) ++three_plus;
  }
  double workers_per_firm = 0;
  for (std::uint32_t f = 0; f < p.firm_count(); ++f) {
    std::set<std::uint32_t> ws;
    for (auto r : p.rows_of_firm(f)) ws.insert(p.worker(r));
    workers_per_firm += static_cast<double>(ws.size());
  }
  s.mean_firms_per_worker = firms_per_worker / static_cast<double>(p.worker_count());
  s.mean_workers_per_firm = workers_per_firm / static_cast<double>(p.firm_count());
  s.share_workers_three_plus_firms = static_cast<double>(three_plus) / static_cast<double>(p.worker_count());
  s.worker_retention = static_cast<double>(p.worker_count()) / static_cast<double>(panel.worker_count());
  return out;
}

void EventStudyTable::write_csv(std::ostream& out) const {
  out << "origin_q,dest_q,event_time,mean_log_wage,n\n";
  for (const auto& c : cells) {
    out << c.origin_q << ',' << c.dest_q << ',' << c.event_time << ',' << format_double(c.mean_log_wage) << ','
        << c.n << '\n';
  }
}

EventStudyTable event_study(const Panel& panel, const EventStudyConfig& config) {
  if (config.quantiles < 2) throw InvalidArgument("event_study: need at least two quantile groups");
  if (config.pre_years < 1 || config.post_years < 1) throw InvalidArgument("event_study: spell lengths must be >= 1");
  if (panel.empty()) throw EmptyInput("event_study: empty panel");
  const auto [ymin, ymax] = std::minmax_element(panel.years().begin(), panel.years().end());
  if (*ymax - *ymin + 1 < 4) throw InvalidArgument("event_study: panel must span at least 4 years");

  // Firm-year wage sums and counts.
  struct Acc {
    double sum = 0;
    std::size_t n = 0;
  };
  const auto key = [&](std::uint32_t f, int year) {
    return (static_cast<std::uint64_t>(f) << 32) | static_cast<std::uint32_t>(year - *ymin);
  };
  std::unordered_map<std::uint64_t, Acc> fy;
  std::vector<std::vector<int>> firm_years(panel.firm_count());
  for (std::size_t r = 0; r < panel.size(); ++r) {
    Acc& a = fy[key(panel.firm(r), panel.year(r))];
    if (a.n == 0) firm_years[panel.firm(r)].push_back(panel.year(r));
    a.sum += panel.log_wage(r);
    ++a.n;
  }
  for (auto& ys : firm_years) std::sort(ys.begin(), ys.end());

  // Firm score: average over firm-years of the coworker mean. When a worker is
  // given, that worker's own rows are left out of every firm-year mean.
  const auto firm_score = [&](std::uint32_t f, std::optional<std::uint32_t> w, double& out) {
    double total = 0;
    std::size_t used = 0;
    for (int y : firm_years[f]) {
      Acc a = fy.at(key(f, y));
      if (w) {
        for (auto r : panel.rows_of_worker(*w)) {
          if (panel.firm(r) == f && panel.year(r) == y) {
            a.sum -= panel.log_wage(r);
            --a.n;
          }
        }
      }
      if (a.n == 0) continue;
      total += a.sum / static_cast<double>(a.n);
      ++used;
    }
    if (used == 0) return false;
    out = total / static_cast<double>(used);
    return true;
  };

  std::vector<double> scores;
  scores.reserve(panel.firm_count());
  for (std::uint32_t f = 0; f < panel.firm_count(); ++f) {
    double s = 0;
    if (firm_score(f, std::nullopt, s)) scores.push_back(s);
  }
  std::sort(scores.begin(), scores.end());
  const std::size_t Q = config.quantiles;
  EventStudyTable table;
  table.quantiles = Q;
  for (std::size_t k = 1; k < Q; ++k) {
    table.cutoffs.push_back(sorted_quantile(scores, static_cast<double>(k) / static_cast<double>(Q)));
  }
  const auto quantile_of = [&](double s) {
    int q = 1;
    for (double c : table.cutoffs) {
      if (s > c) ++q;
    }
    return q;
  };

  const int span = config.pre_years + config.post_years;
  std::map<std::tuple<int, int, int>, Acc> profile;
  for (std::uint32_t w = 0; w < panel.worker_count(); ++w) {
    std::vector<std::uint32_t> rows(panel.rows_of_worker(w).begin(), panel.rows_of_worker(w).end());
    std::sort(rows.begin(), rows.end(), [&](auto a, auto b) { return panel.year(a) < panel.year(b); });
    if (rows.size() < static_cast<std::size_t>(span)) continue;
    for (std::size_t p = static_cast<std::size_t>(config.pre_years); p + config.post_years <= rows.size(); ++p) {
      const std::size_t start = p - static_cast<std::size_t>(config.pre_years);
      bool ok = true;
      for (int k = 1; k < span && ok; ++k) {
        ok = panel.year(rows[start + k]) == panel.year(rows[start]) + k;
      }
      if (!ok) continue;
      const std::uint32_t origin = panel.firm(rows[start]);
      const std::uint32_t dest = panel.firm(rows[p]);
      if (origin == dest) continue;
      for (int k = 0; k < span && ok; ++k) {
        ok = panel.firm(rows[start + k]) == (k < config.pre_years ? origin : dest);
      }
      if (!ok) continue;
      double so = 0, sd = 0;
      if (!firm_score(origin, w, so) || !firm_score(dest, w, sd)) continue;
      const int qo = quantile_of(so), qd = quantile_of(sd);
      ++table.movers;
      for (int k = 0; k < span; ++k) {
        Acc& a = profile[{qo, qd, k - config.pre_years}];
        a.sum += panel.log_wage(rows[start + k]);
        ++a.n;
      }
    }
  }

  for (int qo = 1; qo <= static_cast<int>(Q); ++qo) {
    for (int qd = 1; qd <= static_cast<int>(Q); ++qd) {
      bool any = false;
      for (int e = -config.pre_years; e < config.post_years; ++e) {
        auto it = profile.find({qo, qd, e});
        if (it == profile.end()) continue;
        any = true;
        table.cells.push_back({qo, qd, e, it->second.sum / static_cast<double>(it->second.n), it->second.n});
      }
      if (!any) table.insufficient.emplace_back(qo, qd);
    }
  }
  return table;
}

}  // namespace twice
