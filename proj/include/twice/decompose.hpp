#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "twice/error.hpp"
#include "twice/partition.hpp"

namespace twice {

// Row shares and mean wages of the observed (worker cell, firm cell) pairs.
struct CellStats {
  std::size_t L = 0;
  std::size_t K = 0;
  std::size_t rows = 0;
  struct Cell {
    std::uint32_t l = 0;
    std::uint32_t k = 0;
    std::size_t n = 0;
    double pi = 0;
    double mu = 0;
  };
  std::vector<Cell> cells;  // observed cells, ordered by (l, k)
  std::vector<double> pi_worker;  // L marginals
  std::vector<double> pi_firm;    // K marginals
  double mu = 0;

  // Index into `cells` or -1 when unobserved.
  std::ptrdiff_t find(std::uint32_t l, std::uint32_t k) const;
  std::size_t singleton_cells() const;
};

CellStats cell_stats(std::span<const double> y, const CellAssignment& cells);
// Builds stats directly from cell-level shares and means (pi need not be
// normalised; zero shares are unobserved).
CellStats cell_stats_from_tables(const std::vector<std::vector<double>>& pi, const std::vector<std::vector<double>>& mu);

struct ProjectedEffects {
  std::vector<double> alpha;  // L
  std::vector<double> psi;    // K
  std::vector<double> kappa;  // aligned with CellStats::cells
  std::size_t iterations = 0;
  double max_change = 0;  // last sweep
  std::string method;     // "backfit" or "dense"
};

class NoConvergence : public NumericalError {
 public:
  NoConvergence(std::size_t max_iter, double residual, ProjectedEffects last)
      : NumericalError("additive projection did not converge in " + std::to_string(max_iter) +
                       " iterations (last change " + std::to_string(residual) + ")"),
        residual_(residual),
        last_(std::move(last)) {}
  double residual() const noexcept { return residual_; }
  const ProjectedEffects& last_iterate() const noexcept { return last_; }

 private:
  double residual_;
  ProjectedEffects last_;
};

struct ProjectionOptions {
  double tol = 1e-10;
  std::size_t max_iter = 10000;
  // Fall back to the dense solve when back-fitting does not converge and
  // L + K is at most dense_limit.
  bool dense_fallback = true;
  std::size_t dense_limit = 2000;
};

// Weighted additive projection of the cell means by back-fitting.
ProjectedEffects project_additive(const CellStats& stats, const ProjectionOptions& options = {});
// The same projection solved directly on cell-level dummies.
ProjectedEffects project_additive_dense(const CellStats& stats);

struct Decomposition {
  double var_y = 0;
  double worker = 0, firm = 0, sorting = 0, interaction = 0, residual = 0;
  std::vector<double> xi;  // per row
  bool has_interaction = true;
  std::size_t rows = 0;
  std::size_t cells_observed = 0;
  std::size_t singleton_cells = 0;
  std::size_t iterations = 0;
  std::string solver;
  std::string convention;

  double total() const { return worker + firm + sorting + interaction + residual; }
  double share(double v) const { return var_y > 0 ? v / var_y : 0.0; }
  nlohmann::json to_json(const std::string& method = "twice") const;
};

Decomposition decompose_variance(std::span<const double> y, const CellAssignment& cells, const CellStats& stats,
                                 const ProjectedEffects& effects);

// Worker-cell composition of each firm cell. Columns are firm cells by
// ascending psi, rows worker cells by ascending alpha; only observed cells.
struct SortingMatrix {
  std::vector<std::uint32_t> worker_cells;
  std::vector<std::uint32_t> firm_cells;
  std::vector<std::vector<double>> share;  // [row][column]

  void write_csv(std::ostream& out) const;
};

SortingMatrix sorting_matrix(const CellAssignment& cells, const ProjectedEffects& effects);

// Row-weighted mean of psi over each firm's rows, indexed by panel firm.
std::vector<double> firm_component_by_firm(const Panel& panel, const CellAssignment& cells,
                                           const ProjectedEffects& effects);

void write_cell_stats_csv(const CellStats& stats, const ProjectedEffects& effects, std::ostream& out);

}  // namespace twice
