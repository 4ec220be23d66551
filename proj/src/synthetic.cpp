#include "twice/synthetic.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <ostream>

#include "twice/error.hpp"

namespace twice {

namespace {

struct Field {
  const char* name;
  std::function<void(SyntheticSpec&, const std::string&)> set;
  std::function<std::string(const SyntheticSpec&)> get;
};

template <class T>
Field size_field(const char* name, T SyntheticSpec::*member) {
  return {name,
          [name, member](SyntheticSpec& s, const std::string& v) {
            s.*member = static_cast<T>(parse_uint_value(name, v));
          },
          [member](const SyntheticSpec& s) { return std::to_string(s.*member); }};
}

Field real_field(const char* name, double SyntheticSpec::*member) {
  return {name, [name, member](SyntheticSpec& s, const std::string& v) { s.*member = parse_double_value(name, v); },
          [member](const SyntheticSpec& s) { return format_double(s.*member); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      size_field("n_workers", &SyntheticSpec::n_workers),
      size_field("n_firms", &SyntheticSpec::n_firms),
      size_field("n_years", &SyntheticSpec::n_years),
      size_field("worker_type_count", &SyntheticSpec::worker_type_count),
      size_field("firm_type_count", &SyntheticSpec::firm_type_count),
      real_field("sorting_strength", &SyntheticSpec::sorting_strength),
      real_field("interaction_scale", &SyntheticSpec::interaction_scale),
      real_field("noise_sd", &SyntheticSpec::noise_sd),
      size_field("seed", &SyntheticSpec::seed),
      real_field("mean_log_wage", &SyntheticSpec::mean_log_wage),
      real_field("worker_effect_scale", &SyntheticSpec::worker_effect_scale),
      real_field("firm_effect_scale", &SyntheticSpec::firm_effect_scale),
      real_field("covariate_noise", &SyntheticSpec::covariate_noise),
      real_field("move_probability", &SyntheticSpec::move_probability),
      real_field("worker_noise_sd", &SyntheticSpec::worker_noise_sd),
      real_field("firm_noise_sd", &SyntheticSpec::firm_noise_sd),
      real_field("age_effect_scale", &SyntheticSpec::age_effect_scale),
      real_field("tenure_effect_scale", &SyntheticSpec::tenure_effect_scale),
  };
  return f;
}

// Type position scaled to (-1, 1).
double position(std::uint32_t type, std::size_t count) {
  return 2.0 * (static_cast<double>(type) + 0.5) / static_cast<double>(count) - 1.0;
}

std::uint32_t type_from_uniform(double p, std::size_t count) {
  auto t = static_cast<std::size_t>(std::floor(p * static_cast<double>(count)));
  return static_cast<std::uint32_t>(std::min(t, count - 1));
}

std::uint32_t noisy_level(std::uint32_t type, double noise, std::size_t count) {
  const double v = std::round(static_cast<double>(type) + noise);
  return static_cast<std::uint32_t>(std::clamp(v, 0.0, static_cast<double>(count - 1)));
}

}  // namespace

void SyntheticSpec::validate() const {
  if (n_workers < 1) throw ConfigInvalid("n_workers", "must be at least 1");
  if (n_firms < 1) throw ConfigInvalid("n_firms", "must be at least 1");
  if (n_years < 1) throw ConfigInvalid("n_years", "must be at least 1");
  if (worker_type_count < 1) throw ConfigInvalid("worker_type_count", "must be at least 1");
  if (firm_type_count < 1) throw ConfigInvalid("firm_type_count", "must be at least 1");
  if (firm_type_count > n_firms) throw ConfigInvalid("firm_type_count", "cannot exceed n_firms");
  if (!(sorting_strength >= 0.0 && sorting_strength <= 1.0)) {
    throw ConfigInvalid("sorting_strength", "must lie in [0, 1]");
  }
  if (!(interaction_scale >= 0.0)) throw ConfigInvalid("interaction_scale", "must be non-negative");
  if (!(noise_sd >= 0.0)) throw ConfigInvalid("noise_sd", "must be non-negative");
  if (!(covariate_noise >= 0.0)) throw ConfigInvalid("covariate_noise", "must be non-negative");
  if (!(move_probability >= 0.0 && move_probability <= 1.0)) {
    throw ConfigInvalid("move_probability", "must lie in [0, 1]");
  }
  if (!(worker_noise_sd >= 0.0)) throw ConfigInvalid("worker_noise_sd", "must be non-negative");
  if (!(firm_noise_sd >= 0.0)) throw ConfigInvalid("firm_noise_sd", "must be non-negative");
}

SyntheticSpec SyntheticSpec::from_key_values(const KeyValues& kv) {
  SyntheticSpec s;
  for (const auto& [key, value] : kv) {
    if (kv.count(key) > 1) throw ConfigInvalid(key, "given more than once");
    auto it = std::find_if(fields().begin(), fields().end(), [&](const Field& f) { return key == f.name; });
    if (it == fields().end()) throw ConfigInvalid(key, "unknown synthetic spec key");
    it->set(s, value);
  }
  s.validate();
  return s;
}

void SyntheticSpec::write(std::ostream& out) const {
  for (const auto& f : fields()) out << f.name << " = " << f.get(*this) << '\n';
}

double synthetic_type_effect(const SyntheticSpec& spec, std::uint32_t worker_type, std::uint32_t firm_type) {
  const double x = position(worker_type, spec.worker_type_count);
  const double y = position(firm_type, spec.firm_type_count);
  return spec.worker_effect_scale * x + spec.firm_effect_scale * y + spec.interaction_scale * x * y;
}

double synthetic_lifecycle_effect(const SyntheticSpec& spec, double age, double tenure) {
  const double a = (age - 40.0) / 20.0;
  return -spec.age_effect_scale * a * a + spec.tenure_effect_scale * std::log1p(tenure);
}

ColumnSchema synthetic_schema(const SyntheticSpec& spec) {
  ColumnSchema s({{"skill", FeatureKind::numeric, ColumnSide::worker, 0},
                  {"educ", FeatureKind::categorical, ColumnSide::worker, spec.worker_type_count},
                  {"age", FeatureKind::numeric, ColumnSide::worker, 0},
                  {"tenure", FeatureKind::numeric, ColumnSide::worker, 0},
                  {"worker_noise", FeatureKind::numeric, ColumnSide::worker, 0},
                  {"log_revenue", FeatureKind::numeric, ColumnSide::firm, 0},
                  {"sector", FeatureKind::categorical, ColumnSide::firm, spec.firm_type_count},
                  {"log_size", FeatureKind::numeric, ColumnSide::firm, 0},
                  {"firm_noise", FeatureKind::numeric, ColumnSide::firm, 0}});
  for (std::size_t t = 0; t < spec.worker_type_count; ++t) s.intern(1, "e" + std::to_string(t + 1));
  for (std::size_t t = 0; t < spec.firm_type_count; ++t) s.intern(6, "s" + std::to_string(t + 1));
  return s;
}

SyntheticPanel simulate(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t Tw = spec.worker_type_count, Tf = spec.firm_type_count;
  const double rho = spec.sorting_strength;
  const double rho_c = std::sqrt(std::max(0.0, 1.0 - rho * rho));
  const int first_year = 2010;
  Rng rng(spec.seed);

  // Firms: types are dealt evenly so every type has members.
  std::vector<std::uint32_t> firm_type(spec.n_firms);
  std::vector<std::vector<std::uint32_t>> firms_of_type(Tf);
  for (std::size_t j = 0; j < spec.n_firms; ++j) {
    firm_type[j] = static_cast<std::uint32_t>(j % Tf);
    firms_of_type[firm_type[j]].push_back(static_cast<std::uint32_t>(j));
  }
  std::vector<double> firm_revenue(spec.n_firms), firm_size(spec.n_firms), firm_noise(spec.n_firms);
  std::vector<std::uint32_t> firm_sector(spec.n_firms);
  for (std::size_t j = 0; j < spec.n_firms; ++j) {
    firm_revenue[j] = firm_type[j] + spec.covariate_noise * rng.normal();
    firm_sector[j] = noisy_level(firm_type[j], spec.covariate_noise * rng.normal(), Tf);
    firm_size[j] = 3.0 + rng.normal();
    firm_noise[j] = spec.firm_noise_sd * rng.normal();
  }
  // Firm-year jitter of the time-varying firm covariates.
  std::vector<double> revenue_jitter(spec.n_firms * spec.n_years), size_jitter(spec.n_firms * spec.n_years),
      firm_noise_col(spec.n_firms * spec.n_years);
  for (std::size_t k = 0; k < revenue_jitter.size(); ++k) {
    revenue_jitter[k] = 0.1 * spec.covariate_noise * rng.normal();
    size_jitter[k] = 0.1 * rng.normal();
    firm_noise_col[k] = rng.normal();
  }

  auto draw_firm = [&](double z) {
    const double v = rho * z + rho_c * rng.normal();
    const std::uint32_t t = type_from_uniform(normal_cdf(v), Tf);
    const auto& members = firms_of_type[t];
    return members[rng.uniform_int(members.size())];
  };

  PanelBuilder builder(synthetic_schema(spec));
  GroundTruth truth;
  std::vector<double> cov(9);
  std::vector<double> mean_fn;
  const std::size_t n_rows = spec.n_workers * spec.n_years;
  mean_fn.reserve(n_rows);
  truth.row_noise.reserve(n_rows);
  truth.row_worker_type.reserve(n_rows);
  truth.row_firm_type.reserve(n_rows);
  truth.row_lifecycle.reserve(n_rows);
  std::vector<std::uint32_t> worker_type_by_draw(spec.n_workers);

  for (std::size_t i = 0; i < spec.n_workers; ++i) {
    const double z = rng.normal();
    const std::uint32_t wt = type_from_uniform(normal_cdf(z), Tw);
    worker_type_by_draw[i] = wt;
    const double skill = wt + spec.covariate_noise * rng.normal();
    const std::uint32_t educ = noisy_level(wt, spec.covariate_noise * rng.normal(), Tw);
    const double age0 = 22.0 + static_cast<double>(rng.uniform_int(34));
    double tenure = static_cast<double>(rng.uniform_int(10));
    const double worker_noise = spec.worker_noise_sd * rng.normal();
    std::uint32_t firm = draw_firm(z);
    const std::string wid = "w" + std::to_string(i + 1);
    for (std::size_t t = 0; t < spec.n_years; ++t) {
      if (t > 0) {
        if (rng.uniform() < spec.move_probability) {
          const std::uint32_t next = draw_firm(z);
          if (next != firm) tenure = 0.0;
          else tenure += 1.0;
          firm = next;
        } else {
          tenure += 1.0;
        }
      }
      const std::size_t fy = firm * spec.n_years + t;
      const double eps = spec.noise_sd * rng.normal();
      const double u = worker_noise + firm_noise[firm] + eps;
      const double m = synthetic_type_effect(spec, wt, firm_type[firm]);
      const double age = age0 + static_cast<double>(t);
      const double life = synthetic_lifecycle_effect(spec, age, tenure);
      cov[0] = skill;
      cov[1] = educ;
      cov[2] = age;
      cov[3] = tenure;
      cov[4] = rng.normal();
      cov[5] = firm_revenue[firm] + revenue_jitter[fy];
      cov[6] = firm_sector[firm];
      cov[7] = firm_size[firm] + size_jitter[fy];
      cov[8] = firm_noise_col[fy];
      builder.add(wid, "f" + std::to_string(firm + 1), first_year + static_cast<int>(t),
                  spec.mean_log_wage + m + life + u, cov);
      mean_fn.push_back(m);
      truth.row_noise.push_back(u);
      truth.row_lifecycle.push_back(life);
      truth.row_worker_type.push_back(wt);
      truth.row_firm_type.push_back(firm_type[firm]);
    }
  }
  Panel panel = std::move(builder).build();

  // Types keyed by the panel's dense indices.
  truth.worker_type.resize(panel.worker_count());
  for (std::size_t w = 0; w < panel.worker_count(); ++w) {
    const std::string& name = panel.worker_name(static_cast<std::uint32_t>(w));
    truth.worker_type[w] = worker_type_by_draw[std::stoul(name.substr(1)) - 1];
  }
  truth.firm_type.resize(panel.firm_count());
  for (std::size_t f = 0; f < panel.firm_count(); ++f) {
    const std::string& name = panel.firm_name(static_cast<std::uint32_t>(f));
    truth.firm_type[f] = firm_type[std::stoul(name.substr(1)) - 1];
  }

  // Additive projection of the type-level mean function under the realized
  // row shares, solved directly on cell dummies.
  const double n = static_cast<double>(panel.size());
  truth.pi.assign(Tw, std::vector<double>(Tf, 0.0));
  for (std::size_t r = 0; r < panel.size(); ++r) truth.pi[truth.row_worker_type[r]][truth.row_firm_type[r]] += 1.0 / n;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> cells;
  for (std::uint32_t l = 0; l < Tw; ++l) {
    for (std::uint32_t k = 0; k < Tf; ++k) {
      if (truth.pi[l][k] > 0) cells.emplace_back(l, k);
    }
  }
  const auto p = static_cast<Eigen::Index>(1 + Tw + Tf);
  Eigen::MatrixXd X = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(cells.size()), p);
  Eigen::VectorXd y(static_cast<Eigen::Index>(cells.size()));
  for (std::size_t c = 0; c < cells.size(); ++c) {
    const auto [l, k] = cells[c];
    const double sw = std::sqrt(truth.pi[l][k]);
    const auto ci = static_cast<Eigen::Index>(c);
    X(ci, 0) = sw;
    X(ci, 1 + l) = sw;
    X(ci, static_cast<Eigen::Index>(1 + Tw + k)) = sw;
    y(ci) = sw * synthetic_type_effect(spec, l, k);
  }
  Eigen::VectorXd beta = X.completeOrthogonalDecomposition().solve(y);
  truth.alpha.assign(Tw, 0.0);
  truth.psi.assign(Tf, 0.0);
  std::vector<double> pi_w(Tw, 0.0), pi_f(Tf, 0.0);
  for (const auto& [l, k] : cells) {
    pi_w[l] += truth.pi[l][k];
    pi_f[k] += truth.pi[l][k];
  }
  double abar = 0, bbar = 0;
  for (std::size_t l = 0; l < Tw; ++l) {
    if (pi_w[l] > 0) truth.alpha[l] = beta(static_cast<Eigen::Index>(1 + l));
    abar += pi_w[l] * truth.alpha[l];
  }
  for (std::size_t k = 0; k < Tf; ++k) {
    if (pi_f[k] > 0) truth.psi[k] = beta(static_cast<Eigen::Index>(1 + Tw + k));
    bbar += pi_f[k] * truth.psi[k];
  }
  for (auto& a : truth.alpha) a -= abar;
  for (auto& b : truth.psi) b -= bbar;
  truth.mu = spec.mean_log_wage + mean(mean_fn);
  const double mu_fn = mean(mean_fn);
  truth.kappa.assign(Tw, std::vector<double>(Tf, 0.0));
  for (const auto& [l, k] : cells) {
    truth.kappa[l][k] = synthetic_type_effect(spec, l, k) - mu_fn - truth.alpha[l] - truth.psi[k];
  }
  // Zero-weight types carry no row, so their effects are left at zero.
  for (std::size_t l = 0; l < Tw; ++l) {
    if (pi_w[l] == 0) truth.alpha[l] = 0;
  }
  for (std::size_t k = 0; k < Tf; ++k) {
    if (pi_f[k] == 0) truth.psi[k] = 0;
  }

  std::vector<double> a_row(panel.size()), b_row(panel.size()), k_row(panel.size());
  for (std::size_t r = 0; r < panel.size(); ++r) {
    a_row[r] = truth.alpha[truth.row_worker_type[r]];
    b_row[r] = truth.psi[truth.row_firm_type[r]];
    k_row[r] = truth.kappa[truth.row_worker_type[r]][truth.row_firm_type[r]];
  }
  truth.variances.worker = variance(a_row);
  truth.variances.firm = variance(b_row);
  truth.variances.sorting = 2.0 * covariance(a_row, b_row);
  truth.variances.interaction = variance(k_row);
  std::vector<double> resid(panel.size());
  for (std::size_t r = 0; r < panel.size(); ++r) resid[r] = truth.row_lifecycle[r] + truth.row_noise[r];
  truth.variances.residual = variance(resid);
  const double total = truth.variances.total();
  if (total > 0) {
    truth.shares = {truth.variances.worker / total, truth.variances.firm / total, truth.variances.sorting / total,
                    truth.variances.interaction / total, truth.variances.residual / total};
  }
  return {std::move(panel), std::move(truth)};
}

nlohmann::json GroundTruth::to_json() const {
  auto comp = [](const VarianceShares& v) {
    return nlohmann::json{{"worker", v.worker},
                          {"firm", v.firm},
                          {"sorting", v.sorting},
                          {"interaction", v.interaction},
                          {"residual", v.residual}};
  };
  return {{"mu", mu},
          {"alpha", alpha},
          {"psi", psi},
          {"kappa", kappa},
          {"pi", pi},
          {"variances", comp(variances)},
          {"shares", comp(shares)}};
}

}  // namespace twice
