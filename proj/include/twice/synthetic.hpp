#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "twice/panel.hpp"
#include "twice/util.hpp"

namespace twice {

// Parameters of the synthetic matched panel. Key names in the config file are
// exactly the field names below.
struct SyntheticSpec {
  std::size_t n_workers = 2000;
  std::size_t n_firms = 200;
  std::size_t n_years = 5;
  std::size_t worker_type_count = 4;
  std::size_t firm_type_count = 4;
  double sorting_strength = 0.5;  // rho in [0, 1]
  double interaction_scale = 0.0;
  double noise_sd = 0.1;
  std::uint64_t seed = 1;

  double mean_log_wage = 2.0;
  double worker_effect_scale = 0.5;
  double firm_effect_scale = 0.25;
  // Spread of the observable covariates around the latent type.
  double covariate_noise = 0.1;
  double move_probability = 0.2;
  // Persistent worker and firm level noise; part of u but not of any type.
  double worker_noise_sd = 0.0;
  double firm_noise_sd = 0.0;
  // Life-cycle terms outside the type structure: a concave age profile
  // peaking at 40 and log(1 + tenure). Both are zero by default.
  double age_effect_scale = 0.0;
  double tenure_effect_scale = 0.0;

  void validate() const;
  static SyntheticSpec from_key_values(const KeyValues& kv);
  void write(std::ostream& out) const;
};

struct VarianceShares {
  double worker = 0, firm = 0, sorting = 0, interaction = 0, residual = 0;
  double total() const { return worker + firm + sorting + interaction + residual; }
};

struct GroundTruth {
  std::vector<std::uint32_t> worker_type;  // per worker, panel worker index
  std::vector<std::uint32_t> firm_type;    // per firm, panel firm index
  std::vector<std::uint32_t> row_worker_type;
  std::vector<std::uint32_t> row_firm_type;
  std::vector<double> row_noise;           // u = Y - mean function
  std::vector<double> row_lifecycle;       // age and tenure terms, counted as residual
  double mu = 0;                           // row-weighted mean of the mean function
  std::vector<double> alpha;               // per worker type
  std::vector<double> psi;                 // per firm type
  std::vector<std::vector<double>> kappa;  // [worker type][firm type], 0 where unobserved
  std::vector<std::vector<double>> pi;     // realized row shares per type pair
  VarianceShares variances;
  VarianceShares shares;

  nlohmann::json to_json() const;
};

struct SyntheticPanel {
  Panel panel;
  GroundTruth truth;
};

// The mean wage as a function of the latent types, without the grand mean.
double synthetic_type_effect(const SyntheticSpec& spec, std::uint32_t worker_type, std::uint32_t firm_type);
double synthetic_lifecycle_effect(const SyntheticSpec& spec, double age, double tenure);

ColumnSchema synthetic_schema(const SyntheticSpec& spec);
SyntheticPanel simulate(const SyntheticSpec& spec);

}  // namespace twice
