#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "twice/decompose.hpp"
#include "twice/panel.hpp"

namespace twice {

struct AkmConfig {
  bool year_effects = true;
  // Age polynomial without the linear term, flat at the reference age.
  // Skipped when the panel has no column of this name.
  std::string age_column = "age";
  double reference_age = 40.0;
  std::size_t age_degree = 3;
  double cg_tol = 1e-10;
  // Iteration cap as a multiple of the firm count.
  std::size_t cg_iter_factor = 10;
};

struct AkmModel {
  AkmConfig config;
  double intercept = 0;
  std::vector<std::string> worker_names;
  std::vector<std::string> firm_names;
  std::vector<double> theta;  // per worker, row-weighted mean 0
  std::vector<double> psi;    // per firm, row-weighted mean 0
  std::vector<std::string> control_names;
  std::vector<double> beta;
  std::vector<double> residual;       // per row of the fitting panel
  std::vector<double> control_fit;    // X beta per row
  std::size_t cg_iterations = 0;      // summed over all solves
  double normal_residual = 0;         // relative, firm-effect system
  std::string pinned_firm;

  std::unordered_map<std::string, std::uint32_t> worker_index() const;
  std::unordered_map<std::string, std::uint32_t> firm_index() const;
  void write_worker_effects(std::ostream& out) const;
  void write_firm_effects(std::ostream& out) const;
  nlohmann::json summary_json() const;
};

// Control columns (year dummies without the first year, age polynomial terms).
struct ControlDesign {
  std::vector<std::string> names;
  std::vector<std::vector<double>> columns;
};

ControlDesign akm_controls(const Panel& panel, const AkmConfig& config);

// Two-way fixed effects on a connected panel.
AkmModel fit_akm(const Panel& panel, const AkmConfig& config = {});

inline constexpr const char* kAkmConvention =
    "wages residualized on the controls before decomposing; the control contribution is excluded from Var(Y)";

// Components over rows whose worker and firm both carry an estimated effect.
// Var(Y) here is the variance of wages net of controls.
Decomposition akm_decomposition(const AkmModel& model, const Panel& panel);

struct OlsConfig {
  std::vector<std::size_t> degrees{0, 1, 2, 3};
  std::vector<std::string> poly_columns{"age", "tenure", "log_size", "log_revenue"};
  std::string age_column = "age";
  double reference_age = 40.0;
};

struct OlsBaseline {
  std::size_t degree = 0;
  std::string label;
  std::vector<std::string> names;
  std::vector<double> coefficients;  // intercept, then the terms in `names`
  double train_mse = 0, train_r2 = 0, test_mse = 0, test_r2 = 0;
};

std::vector<OlsBaseline> fit_ols_baselines(const Panel& train, const Panel& test, const OlsConfig& config = {});
// Predictions of the degree-d baseline fitted on `train`.
std::vector<double> ols_predict(const Panel& train, const Panel& target, std::size_t degree,
                                const OlsConfig& config = {});
void write_baselines_csv(std::span<const OlsBaseline> rows, std::ostream& out);

struct EtaSquared {
  double value = 0;
  bool zero_variance = false;
  nlohmann::json to_json() const;
};

EtaSquared eta_squared(std::span<const double> effects, std::span<const std::uint32_t> classes,
                       std::span<const double> weights);

std::vector<double> mid_ranks(std::span<const double> x);
double spearman(std::span<const double> x, std::span<const double> y);

}  // namespace twice
