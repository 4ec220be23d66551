#include "twice/decompose.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "twice/util.hpp"

namespace twice {

std::ptrdiff_t CellStats::find(std::uint32_t l, std::uint32_t k) const {
  auto it = std::lower_bound(cells.begin(), cells.end(), std::pair{l, k}, [](const Cell& c, const auto& key) {
    return std::pair{c.l, c.k} < key;
  });
  if (it == cells.end() || it->l != l || it->k != k) return -1;
  return it - cells.begin();
}

std::size_t CellStats::singleton_cells() const {
  return static_cast<std::size_t>(std::count_if(cells.begin(), cells.end(), [](const Cell& c) { return c.n == 1; }));
}

namespace {

void fill_marginals(CellStats& s) {
  s.pi_worker.assign(s.L, 0.0);
  s.pi_firm.assign(s.K, 0.0);
  s.mu = 0.0;
  for (const auto& c : s.cells) {
    s.pi_worker[c.l] += c.pi;
    s.pi_firm[c.k] += c.pi;
    s.mu += c.pi * c.mu;
  }
}

}  // namespace

CellStats cell_stats(std::span<const double> y, const CellAssignment& cells) {
  if (cells.worker_cell.size() != y.size() || cells.firm_cell.size() != y.size())
    throw LengthMismatch("cell_stats: assignments do not cover every row");
  if (y.empty()) throw EmptyInput("cell_stats: no rows");
  CellStats s;
  s.L = cells.L;
  s.K = cells.K;
  s.rows = y.size();
  std::vector<std::size_t> count(s.L * s.K, 0);
  std::vector<double> sum(s.L * s.K, 0.0);
  for (std::size_t r = 0; r < y.size(); ++r) {
    const std::size_t l = cells.worker_cell[r], k = cells.firm_cell[r];
    if (l >= s.L || k >= s.K) throw InvalidArgument("cell_stats: cell index out of range");
    ++count[l * s.K + k];
    sum[l * s.K + k] += y[r];
  }
  const double n = static_cast<double>(y.size());
  for (std::size_t l = 0; l < s.L; ++l) {
    for (std::size_t k = 0; k < s.K; ++k) {
      const std::size_t c = l * s.K + k;
      if (count[c] == 0) continue;
      s.cells.push_back({static_cast<std::uint32_t>(l), static_cast<std::uint32_t>(k), count[c],
                         static_cast<double>(count[c]) / n, sum[c] / static_cast<double>(count[c])});
    }
  }
  fill_marginals(s);
  return s;
}

CellStats cell_stats_from_tables(const std::vector<std::vector<double>>& pi, const std::vector<std::vector<double>>& mu) {
  if (pi.empty() || pi.size() != mu.size()) throw LengthMismatch("cell tables must have matching rows");
  CellStats s;
  s.L = pi.size();
  s.K = pi[0].size();
  double total = 0.0;
  for (std::size_t l = 0; l < s.L; ++l) {
    if (pi[l].size() != s.K || mu[l].size() != s.K) throw LengthMismatch("cell tables must be rectangular");
    for (double p : pi[l]) {
      if (!(p >= 0.0) || !std::isfinite(p)) throw InvalidArgument("cell shares must be finite and non-negative");
      total += p;
    }
  }
  if (!(total > 0.0)) throw AllWeightsZero("cell shares are all zero");
  for (std::size_t l = 0; l < s.L; ++l) {
    for (std::size_t k = 0; k < s.K; ++k) {
      if (pi[l][k] > 0.0)
        s.cells.push_back({static_cast<std::uint32_t>(l), static_cast<std::uint32_t>(k), 0, pi[l][k] / total, mu[l][k]});
    }
  }
  fill_marginals(s);
  return s;
}

namespace {

void recenter(const CellStats& s, ProjectedEffects& e) {
  double a = 0.0, b = 0.0;
  for (std::size_t l = 0; l < s.L; ++l) a += s.pi_worker[l] * e.alpha[l];
  for (std::size_t k = 0; k < s.K; ++k) b += s.pi_firm[k] * e.psi[k];
  for (std::size_t l = 0; l < s.L; ++l)
    if (s.pi_worker[l] > 0.0) e.alpha[l] -= a;
  for (std::size_t k = 0; k < s.K; ++k)
    if (s.pi_firm[k] > 0.0) e.psi[k] -= b;
}

void fill_kappa(const CellStats& s, ProjectedEffects& e) {
  e.kappa.resize(s.cells.size());
  for (std::size_t c = 0; c < s.cells.size(); ++c) {
    const auto& cell = s.cells[c];
    e.kappa[c] = cell.mu - s.mu - e.alpha[cell.l] - e.psi[cell.k];
  }
}

}  // namespace

ProjectedEffects project_additive(const CellStats& s, const ProjectionOptions& options) {
  ProjectedEffects e;
  e.alpha.assign(s.L, 0.0);
  e.psi.assign(s.K, 0.0);
  e.method = "backfit";
  std::vector<double> acc_a(s.L), acc_k(s.K);
  bool converged = false;
  for (std::size_t it = 0; it < options.max_iter; ++it) {
    std::fill(acc_a.begin(), acc_a.end(), 0.0);
    for (const auto& c : s.cells) acc_a[c.l] += c.pi * (c.mu - s.mu - e.psi[c.k]);
    double change = 0.0;
    for (std::size_t l = 0; l < s.L; ++l) {
      if (!(s.pi_worker[l] > 0.0)) continue;
      const double v = acc_a[l] / s.pi_worker[l];
      change = std::max(change, std::abs(v - e.alpha[l]));
      e.alpha[l] = v;
    }
    std::fill(acc_k.begin(), acc_k.end(), 0.0);
    for (const auto& c : s.cells) acc_k[c.k] += c.pi * (c.mu - s.mu - e.alpha[c.l]);
    for (std::size_t k = 0; k < s.K; ++k) {
      if (!(s.pi_firm[k] > 0.0)) continue;
      const double v = acc_k[k] / s.pi_firm[k];
      change = std::max(change, std::abs(v - e.psi[k]));
      e.psi[k] = v;
    }
    recenter(s, e);
    e.iterations = it + 1;
    e.max_change = change;
    if (change < options.tol) {
      converged = true;
      break;
    }
  }
  fill_kappa(s, e);
  if (!converged) {
    if (options.dense_fallback && s.L + s.K <= options.dense_limit) {
      auto dense = project_additive_dense(s);
      dense.iterations = e.iterations;
      return dense;
    }
    throw NoConvergence(options.max_iter, e.max_change, e);
  }
  return e;
}

ProjectedEffects project_additive_dense(const CellStats& s) {
  const auto n = static_cast<Eigen::Index>(s.cells.size());
  const auto p = static_cast<Eigen::Index>(s.L + s.K);
  Eigen::MatrixXd X = Eigen::MatrixXd::Zero(n, p);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& c = s.cells[static_cast<std::size_t>(i)];
    const double w = std::sqrt(c.pi);
    X(i, static_cast<Eigen::Index>(c.l)) = w;
    X(i, static_cast<Eigen::Index>(s.L + c.k)) = w;
    y(i) = w * (c.mu - s.mu);
  }
  const Eigen::VectorXd beta = X.completeOrthogonalDecomposition().solve(y);
  ProjectedEffects e;
  e.method = "dense";
  e.alpha.assign(s.L, 0.0);
  e.psi.assign(s.K, 0.0);
  for (std::size_t l = 0; l < s.L; ++l)
    if (s.pi_worker[l] > 0.0) e.alpha[l] = beta(static_cast<Eigen::Index>(l));
  for (std::size_t k = 0; k < s.K; ++k)
    if (s.pi_firm[k] > 0.0) e.psi[k] = beta(static_cast<Eigen::Index>(s.L + k));
  recenter(s, e);
  fill_kappa(s, e);
  return e;
}

Decomposition decompose_variance(std::span<const double> y, const CellAssignment& cells, const CellStats& stats,
                                 const ProjectedEffects& effects) {
  if (cells.worker_cell.size() != y.size() || cells.firm_cell.size() != y.size())
    throw LengthMismatch("decompose_variance: assignments do not cover every row");
  if (effects.alpha.size() != stats.L || effects.psi.size() != stats.K || effects.kappa.size() != stats.cells.size())
    throw LengthMismatch("decompose_variance: effects do not match the cell stats");
  const std::size_t n = y.size();
  std::vector<std::ptrdiff_t> index(stats.L * stats.K, -1);
  for (std::size_t c = 0; c < stats.cells.size(); ++c)
    index[stats.cells[c].l * stats.K + stats.cells[c].k] = static_cast<std::ptrdiff_t>(c);

  std::vector<double> a(n), p(n), kap(n);
  Decomposition d;
  d.xi.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t l = cells.worker_cell[r], k = cells.firm_cell[r];
    const auto c = index.at(l * stats.K + k);
    if (c < 0) throw InvalidArgument("decompose_variance: row falls in a cell absent from the stats");
    const auto& cell = stats.cells[static_cast<std::size_t>(c)];
    a[r] = effects.alpha[l];
    p[r] = effects.psi[k];
    kap[r] = effects.kappa[static_cast<std::size_t>(c)];
    d.xi[r] = y[r] - cell.mu;
  }
  d.var_y = variance(y);
  d.worker = variance(a);
  d.firm = variance(p);
  d.sorting = 2.0 * covariance(a, p);
  d.interaction = variance(kap);
  d.residual = variance(d.xi);
  d.rows = n;
  d.cells_observed = stats.cells.size();
  d.singleton_cells = stats.singleton_cells();
  d.iterations = effects.iterations;
  d.solver = effects.method;
  return d;
}

nlohmann::json Decomposition::to_json(const std::string& method) const {
  nlohmann::json variances = {{"worker", worker}, {"firm", firm}, {"sorting", sorting}};
  if (has_interaction) variances["interaction"] = interaction;
  variances["residual"] = residual;
  nlohmann::json shares = {{"worker", share(worker)}, {"firm", share(firm)}, {"sorting", share(sorting)}};
  if (has_interaction) shares["interaction"] = share(interaction);
  shares["residual"] = share(residual);
  nlohmann::json j = {{"method", method},
                      {"var_y", var_y},
                      {"variances", variances},
                      {"shares", shares},
                      {"closure_gap", total() - var_y},
                      {"rows", rows},
                      {"diagnostics",
                       {{"cells_observed", cells_observed},
                        {"singleton_cells", singleton_cells},
                        {"iterations", iterations},
                        {"solver", solver}}}};
  if (!convention.empty()) j["convention"] = convention;
  return j;
}

SortingMatrix sorting_matrix(const CellAssignment& cells, const ProjectedEffects& effects) {
  if (effects.alpha.size() != cells.L || effects.psi.size() != cells.K)
    throw LengthMismatch("sorting_matrix: effects do not match the assignment");
  std::vector<std::size_t> count(cells.L * cells.K, 0), per_firm(cells.K, 0), per_worker(cells.L, 0);
  for (std::size_t r = 0; r < cells.worker_cell.size(); ++r) {
    const std::size_t l = cells.worker_cell[r], k = cells.firm_cell[r];
    ++count[l * cells.K + k];
    ++per_firm[k];
    ++per_worker[l];
  }
  SortingMatrix m;
  for (std::uint32_t l = 0; l < cells.L; ++l)
    if (per_worker[l] > 0) m.worker_cells.push_back(l);
  for (std::uint32_t k = 0; k < cells.K; ++k)
    if (per_firm[k] > 0) m.firm_cells.push_back(k);
  std::stable_sort(m.worker_cells.begin(), m.worker_cells.end(),
                   [&](std::uint32_t x, std::uint32_t y) { return effects.alpha[x] < effects.alpha[y]; });
  std::stable_sort(m.firm_cells.begin(), m.firm_cells.end(),
                   [&](std::uint32_t x, std::uint32_t y) { return effects.psi[x] < effects.psi[y]; });
  m.share.assign(m.worker_cells.size(), std::vector<double>(m.firm_cells.size(), 0.0));
  for (std::size_t i = 0; i < m.worker_cells.size(); ++i) {
    for (std::size_t j = 0; j < m.firm_cells.size(); ++j) {
      const std::size_t k = m.firm_cells[j];
      m.share[i][j] = static_cast<double>(count[m.worker_cells[i] * cells.K + k]) / static_cast<double>(per_firm[k]);
    }
  }
  return m;
}

void SortingMatrix::write_csv(std::ostream& out) const {
  out << "worker_cell";
  for (auto k : firm_cells) out << ",firm_cell_" << (k + 1);
  out << '\n';
  for (std::size_t i = 0; i < worker_cells.size(); ++i) {
    out << (worker_cells[i] + 1);
    for (double v : share[i]) out << ',' << format_double(v);
    out << '\n';
  }
}

std::vector<double> firm_component_by_firm(const Panel& panel, const CellAssignment& cells,
                                           const ProjectedEffects& effects) {
  if (cells.firm_cell.size() != panel.size()) throw LengthMismatch("cell assignment does not match the panel");
  std::vector<double> sum(panel.firm_count(), 0.0);
  std::vector<std::size_t> n(panel.firm_count(), 0);
  for (std::size_t r = 0; r < panel.size(); ++r) {
    sum[panel.firm(r)] += effects.psi.at(cells.firm_cell[r]);
    ++n[panel.firm(r)];
  }
  for (std::size_t f = 0; f < sum.size(); ++f) {
    if (n[f] > 0) sum[f] /= static_cast<double>(n[f]);
  }
  return sum;
}

void write_cell_stats_csv(const CellStats& stats, const ProjectedEffects& effects, std::ostream& out) {
  out << "worker_cell,firm_cell,n,pi,mu,alpha,psi,kappa\n";
  for (std::size_t c = 0; c < stats.cells.size(); ++c) {
    const auto& cell = stats.cells[c];
    out << (cell.l + 1) << ',' << (cell.k + 1) << ',' << cell.n << ',' << format_double(cell.pi) << ','
        << format_double(cell.mu) << ',' << format_double(effects.alpha[cell.l]) << ','
        << format_double(effects.psi[cell.k]) << ',' << format_double(effects.kappa[c]) << '\n';
  }
}

}  // namespace twice
