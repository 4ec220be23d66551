#include "twice/akm.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <ostream>

#include "twice/graph.hpp"
#include "twice/util.hpp"

namespace twice {

namespace {

std::vector<int> distinct_years(const Panel& panel) {
  std::vector<int> years(panel.years().begin(), panel.years().end());
  std::sort(years.begin(), years.end());
  years.erase(std::unique(years.begin(), years.end()), years.end());
  return years;
}

void append_age_terms(const Panel& panel, const std::string& age_column, double reference, std::size_t degree,
                      ControlDesign& d) {
  const auto col = panel.schema().find(age_column);
  if (!col || panel.schema().column(*col).kind != FeatureKind::numeric) return;
  const auto age = panel.column(*col);
  for (std::size_t p = 2; p <= degree; ++p) {
    std::vector<double> v(panel.size());
    for (std::size_t r = 0; r < v.size(); ++r) v[r] = std::pow(age[r] - reference, static_cast<double>(p));
    d.names.push_back(age_column + "_c^" + std::to_string(p));
    d.columns.push_back(std::move(v));
  }
}

void append_year_dummies(const Panel& panel, const std::vector<int>& years, ControlDesign& d) {
  for (std::size_t t = 1; t < years.size(); ++t) {
    std::vector<double> v(panel.size());
    for (std::size_t r = 0; r < v.size(); ++r) v[r] = panel.year(r) == years[t] ? 1.0 : 0.0;
    d.names.push_back("year_" + std::to_string(years[t]));
    d.columns.push_back(std::move(v));
  }
}

// Least squares on worker and firm dummies with one firm pinned at zero.
// Worker effects are absorbed; firm effects solve the reduced normal
// equations by Jacobi-preconditioned conjugate gradient.
class TwoWaySolver {
 public:
  TwoWaySolver(const Panel& panel, std::uint32_t pinned, double tol, std::size_t max_iter)
      : panel_(panel), pinned_(pinned), tol_(tol), max_iter_(max_iter) {
    const std::size_t W = panel.worker_count(), J = panel.firm_count();
    inv_count_.resize(W);
    for (std::uint32_t w = 0; w < W; ++w) inv_count_[w] = 1.0 / static_cast<double>(panel.rows_of_worker(w).size());
    diag_.assign(J, 0.0);
    for (std::uint32_t f = 0; f < J; ++f) diag_[f] = static_cast<double>(panel.rows_of_firm(f).size());
    std::vector<std::uint32_t> firms;
    for (std::uint32_t w = 0; w < W; ++w) {
      firms.clear();
      for (auto r : panel.rows_of_worker(w)) firms.push_back(panel.firm(r));
      std::sort(firms.begin(), firms.end());
      for (std::size_t a = 0; a < firms.size();) {
        std::size_t b = a;
        while (b < firms.size() && firms[b] == firms[a]) ++b;
        const double nij = static_cast<double>(b - a);
        diag_[firms[a]] -= nij * nij * inv_count_[w];
        a = b;
      }
    }
  }

  struct Solution {
    std::vector<double> theta, psi;
    std::size_t iterations = 0;
    double relative_residual = 0;
  };

  Solution solve(std::span<const double> v) {
    const std::size_t J = panel_.firm_count();
    Solution s;
    s.psi.assign(J, 0.0);
    std::vector<double> b(J, 0.0);
    apply_rows(v, b);
    b[pinned_] = 0.0;
    const double bnorm = norm(b);
    if (bnorm > 0.0) {
      std::vector<double> r = b, z(J), p(J), q(J), rowbuf(panel_.size());
      for (std::size_t j = 0; j < J; ++j) z[j] = precondition(j, r[j]);
      p = z;
      double rz = dot(r, z);
      std::size_t it = 0;
      double rnorm = bnorm;
      while (it < max_iter_ && rnorm > tol_ * bnorm) {
        multiply(p, q, rowbuf);
        const double pq = dot(p, q);
        if (!(pq > 0.0)) break;
        const double step = rz / pq;
        for (std::size_t j = 0; j < J; ++j) {
          s.psi[j] += step * p[j];
          r[j] -= step * q[j];
        }
        rnorm = norm(r);
        for (std::size_t j = 0; j < J; ++j) z[j] = precondition(j, r[j]);
        const double rz_next = dot(r, z);
        const double beta = rz_next / rz;
        rz = rz_next;
        for (std::size_t j = 0; j < J; ++j) p[j] = z[j] + beta * p[j];
        ++it;
      }
      s.iterations = it;
      // Residual of the final iterate, recomputed directly.
      multiply(s.psi, q, rowbuf);
      for (std::size_t j = 0; j < J; ++j) r[j] = b[j] - q[j];
      s.relative_residual = norm(r) / bnorm;
      if (!(s.relative_residual <= std::max(tol_ * 10.0, 1e-8)))
        throw NumericalError("firm effect solve did not converge (relative residual " +
                             format_double(s.relative_residual) + ")");
    }
    s.theta.assign(panel_.worker_count(), 0.0);
    for (std::uint32_t w = 0; w < panel_.worker_count(); ++w) {
      double acc = 0.0;
      for (auto row : panel_.rows_of_worker(w)) acc += v[row] - s.psi[panel_.firm(row)];
      s.theta[w] = acc * inv_count_[w];
    }
    return s;
  }

 private:
  // out_j = sum over rows of firm j of (v_r - worker mean of v).
  void apply_rows(std::span<const double> v, std::vector<double>& out) const {
    std::fill(out.begin(), out.end(), 0.0);
    for (std::uint32_t w = 0; w < panel_.worker_count(); ++w) {
      double m = 0.0;
      for (auto r : panel_.rows_of_worker(w)) m += v[r];
      m *= inv_count_[w];
      for (auto r : panel_.rows_of_worker(w)) out[panel_.firm(r)] += v[r] - m;
    }
  }

  void multiply(const std::vector<double>& x, std::vector<double>& out, std::vector<double>& rowbuf) const {
    for (std::size_t r = 0; r < panel_.size(); ++r) rowbuf[r] = x[panel_.firm(r)];
    apply_rows(rowbuf, out);
    out[pinned_] = 0.0;
  }

  double precondition(std::size_t j, double r) const {
    if (j == pinned_ || !(diag_[j] > 0.0)) return 0.0;
    return r / diag_[j];
  }

  static double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  }
  static double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

  const Panel& panel_;
  std::uint32_t pinned_;
  double tol_;
  std::size_t max_iter_;
  std::vector<double> inv_count_;
  std::vector<double> diag_;
};

std::uint32_t largest_firm(const Panel& panel) {
  std::uint32_t best = 0;
  for (std::uint32_t f = 1; f < panel.firm_count(); ++f) {
    const auto nf = panel.rows_of_firm(f).size(), nb = panel.rows_of_firm(best).size();
    if (nf > nb || (nf == nb && panel.firm_name(f) < panel.firm_name(best))) best = f;
  }
  return best;
}

}  // namespace

ControlDesign akm_controls(const Panel& panel, const AkmConfig& config) {
  ControlDesign d;
  if (config.year_effects) append_year_dummies(panel, distinct_years(panel), d);
  append_age_terms(panel, config.age_column, config.reference_age, config.age_degree, d);
  return d;
}

AkmModel fit_akm(const Panel& panel, const AkmConfig& config) {
  if (panel.empty()) throw EmptyInput("fit_akm: empty panel");
  const auto graph = mobility_graph(panel);
  if (graph.component_count() != 1)
    throw NotConnected("fit_akm: panel has " + std::to_string(graph.component_count()) +
                       " connected components; restrict to the largest connected set first");
  const std::size_t n = panel.size();
  const std::uint32_t pinned = largest_firm(panel);
  TwoWaySolver solver(panel, pinned, config.cg_tol, std::max<std::size_t>(1, config.cg_iter_factor * panel.firm_count()));
  AkmModel m;
  m.config = config;
  m.pinned_firm = panel.firm_name(pinned);

  const auto controls = akm_controls(panel, config);
  const std::size_t p = controls.columns.size();
  auto residualize = [&](std::span<const double> v) {
    auto s = solver.solve(v);
    m.cg_iterations += s.iterations;
    std::vector<double> out(n);
    for (std::size_t r = 0; r < n; ++r) out[r] = v[r] - s.theta[panel.worker(r)] - s.psi[panel.firm(r)];
    return out;
  };

  std::vector<double> y(panel.log_wages().begin(), panel.log_wages().end());
  m.beta.assign(p, 0.0);
  m.control_fit.assign(n, 0.0);
  if (p > 0) {
    Eigen::MatrixXd X(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p));
    std::vector<double> scale(p, 1.0);
    for (std::size_t c = 0; c < p; ++c) {
      const auto mx = residualize(controls.columns[c]);
      double ss = 0.0, raw = 0.0;
      for (std::size_t r = 0; r < n; ++r) {
        ss += mx[r] * mx[r];
        raw += controls.columns[c][r] * controls.columns[c][r];
      }
      // A control fully absorbed by the fixed effects is collinear with them.
      if (!(ss > 1e-18 * std::max(raw, 1.0)))
        throw SingularControls("control '" + controls.names[c] + "' is collinear with the fixed effects");
      scale[c] = std::sqrt(ss);
      for (std::size_t r = 0; r < n; ++r) X(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = mx[r] / scale[c];
    }
    const auto my = residualize(y);
    Eigen::VectorXd ey = Eigen::Map<const Eigen::VectorXd>(my.data(), static_cast<Eigen::Index>(n));
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
    qr.setThreshold(1e-9);
    if (static_cast<std::size_t>(qr.rank()) < p) throw SingularControls("control columns are collinear");
    const Eigen::VectorXd b = qr.solve(ey);
    for (std::size_t c = 0; c < p; ++c) m.beta[c] = b(static_cast<Eigen::Index>(c)) / scale[c];
    for (std::size_t c = 0; c < p; ++c)
      for (std::size_t r = 0; r < n; ++r) m.control_fit[r] += m.beta[c] * controls.columns[c][r];
  }
  m.control_names = controls.names;

  std::vector<double> v(n);
  for (std::size_t r = 0; r < n; ++r) v[r] = y[r] - m.control_fit[r];
  auto s = solver.solve(v);
  m.cg_iterations += s.iterations;
  m.normal_residual = s.relative_residual;

  double tbar = 0.0, pbar = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    tbar += s.theta[panel.worker(r)];
    pbar += s.psi[panel.firm(r)];
  }
  tbar /= static_cast<double>(n);
  pbar /= static_cast<double>(n);
  m.intercept = tbar + pbar;
  m.theta = std::move(s.theta);
  m.psi = std::move(s.psi);
  for (auto& t : m.theta) t -= tbar;
  for (auto& f : m.psi) f -= pbar;
  m.residual.resize(n);
  for (std::size_t r = 0; r < n; ++r)
    m.residual[r] = v[r] - m.intercept - m.theta[panel.worker(r)] - m.psi[panel.firm(r)];
  for (std::uint32_t w = 0; w < panel.worker_count(); ++w) m.worker_names.push_back(panel.worker_name(w));
  for (std::uint32_t f = 0; f < panel.firm_count(); ++f) m.firm_names.push_back(panel.firm_name(f));
  return m;
}

std::unordered_map<std::string, std::uint32_t> AkmModel::worker_index() const {
  std::unordered_map<std::string, std::uint32_t> out;
  for (std::uint32_t i = 0; i < worker_names.size(); ++i) out.emplace(worker_names[i], i);
  return out;
}

std::unordered_map<std::string, std::uint32_t> AkmModel::firm_index() const {
  std::unordered_map<std::string, std::uint32_t> out;
  for (std::uint32_t i = 0; i < firm_names.size(); ++i) out.emplace(firm_names[i], i);
  return out;
}

namespace {

void write_effects(const std::vector<std::string>& names, const std::vector<double>& effects, std::ostream& out) {
  std::vector<std::size_t> order(names.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return names[a] < names[b]; });
  out << "unit_id,effect\n";
  for (auto i : order) out << csv_field(names[i]) << ',' << format_double(effects[i]) << '\n';
}

}  // namespace

void AkmModel::write_worker_effects(std::ostream& out) const { write_effects(worker_names, theta, out); }
void AkmModel::write_firm_effects(std::ostream& out) const { write_effects(firm_names, psi, out); }

nlohmann::json AkmModel::summary_json() const {
  nlohmann::json controls = nlohmann::json::object();
  for (std::size_t c = 0; c < beta.size(); ++c) controls[control_names[c]] = beta[c];
  return {{"intercept", intercept},
          {"controls", controls},
          {"workers", worker_names.size()},
          {"firms", firm_names.size()},
          {"rows", residual.size()},
          {"pinned_firm", pinned_firm},
          {"cg_iterations", cg_iterations},
          {"normal_residual", normal_residual}};
}

Decomposition akm_decomposition(const AkmModel& model, const Panel& panel) {
  const auto widx = model.worker_index();
  const auto fidx = model.firm_index();
  // Controls are rebuilt on this panel and matched to the fitted ones by name.
  const auto controls = akm_controls(panel, model.config);
  std::vector<double> xb(panel.size(), 0.0);
  for (std::size_t c = 0; c < model.control_names.size(); ++c) {
    const auto it = std::find(controls.names.begin(), controls.names.end(), model.control_names[c]);
    if (it == controls.names.end()) continue;
    const auto& col = controls.columns[static_cast<std::size_t>(it - controls.names.begin())];
    for (std::size_t r = 0; r < panel.size(); ++r) xb[r] += model.beta[c] * col[r];
  }

  std::vector<double> net, th, ps, res;
  for (std::size_t r = 0; r < panel.size(); ++r) {
    const auto w = widx.find(panel.worker_name(panel.worker(r)));
    const auto f = fidx.find(panel.firm_name(panel.firm(r)));
    if (w == widx.end() || f == fidx.end()) continue;
    const double yt = panel.log_wage(r) - xb[r];
    net.push_back(yt);
    th.push_back(model.theta[w->second]);
    ps.push_back(model.psi[f->second]);
    res.push_back(yt - model.intercept - th.back() - ps.back());
  }
  if (net.empty()) throw EmptyInput("akm_decomposition: no row has both effects estimated");
  Decomposition d;
  d.has_interaction = false;
  d.var_y = variance(net);
  d.worker = variance(th);
  d.firm = variance(ps);
  d.sorting = 2.0 * covariance(th, ps);
  d.residual = variance(res);
  d.xi = std::move(res);
  d.rows = net.size();
  d.iterations = model.cg_iterations;
  d.solver = "cg";
  d.convention = kAkmConvention;
  return d;
}

namespace {

struct Term {
  enum class Kind { numeric, power, level, year, age_poly } kind;
  std::size_t col = 0;
  double a = 0, b = 1;  // centering and scale for powers; level code or year
  int power = 1;
  std::string name;
};

// Regressors built on the training panel and applied to any panel with the
// same schema.
class OlsDesign {
 public:
  OlsDesign(const Panel& train, std::size_t degree, const OlsConfig& config) {
    const auto& schema = train.schema();
    const auto years = distinct_years(train);
    if (degree == 0) {
      if (auto col = schema.find(config.age_column); col && schema.column(*col).kind == FeatureKind::numeric) {
        for (int p = 2; p <= 3; ++p)
          terms_.push_back({Term::Kind::age_poly, *col, config.reference_age, 1, p,
                            config.age_column + "_c^" + std::to_string(p)});
      }
    } else {
      for (std::size_t c = 0; c < schema.size(); ++c) {
        const auto& column = schema.column(c);
        if (column.kind == FeatureKind::numeric) {
          terms_.push_back({Term::Kind::numeric, c, 0, 1, 1, column.name});
          const bool expand =
              std::find(config.poly_columns.begin(), config.poly_columns.end(), column.name) != config.poly_columns.end();
          if (!expand) continue;
          const auto x = train.column(c);
          const double m = mean(x), s = std::sqrt(variance(x));
          for (std::size_t p = 2; p <= degree; ++p)
            terms_.push_back({Term::Kind::power, c, m, s > 0 ? s : 1.0, static_cast<int>(p),
                              column.name + "^" + std::to_string(p)});
        } else {
          std::vector<std::uint32_t> codes;
          for (double v : train.column(c)) codes.push_back(static_cast<std::uint32_t>(v));
          std::sort(codes.begin(), codes.end());
          codes.erase(std::unique(codes.begin(), codes.end()), codes.end());
          for (std::size_t i = 1; i < codes.size(); ++i)
            terms_.push_back({Term::Kind::level, c, static_cast<double>(codes[i]), 1, 1,
                              column.name + "=" + schema.level_name(c, codes[i])});
        }
      }
    }
    for (std::size_t t = 1; t < years.size(); ++t)
      terms_.push_back({Term::Kind::year, 0, static_cast<double>(years[t]), 1, 1, "year_" + std::to_string(years[t])});
  }

  const std::vector<Term>& terms() const { return terms_; }

  double value(const Term& t, const Panel& p, std::size_t r) const {
    switch (t.kind) {
      case Term::Kind::numeric: return p.covariate(r, t.col);
      case Term::Kind::power: return std::pow((p.covariate(r, t.col) - t.a) / t.b, t.power);
      case Term::Kind::level: return p.covariate(r, t.col) == t.a ? 1.0 : 0.0;
      case Term::Kind::year: return p.year(r) == static_cast<int>(t.a) ? 1.0 : 0.0;
      case Term::Kind::age_poly: return std::pow(p.covariate(r, t.col) - t.a, t.power);
    }
    return 0.0;
  }

  Eigen::MatrixXd matrix(const Panel& p) const {
    Eigen::MatrixXd X(static_cast<Eigen::Index>(p.size()), static_cast<Eigen::Index>(terms_.size()));
    for (std::size_t j = 0; j < terms_.size(); ++j)
      for (std::size_t r = 0; r < p.size(); ++r)
        X(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = value(terms_[j], p, r);
    return X;
  }

 private:
  std::vector<Term> terms_;
};

struct OlsFit {
  std::vector<std::string> names;
  Eigen::VectorXd coef;  // intercept first
  std::vector<std::size_t> kept;
};

OlsFit fit_ols(const Panel& train, const OlsDesign& design) {
  const auto n = static_cast<Eigen::Index>(train.size());
  Eigen::MatrixXd X = design.matrix(train);
  // Standardize; columns constant on the training sample are dropped.
  std::vector<std::size_t> kept;
  std::vector<double> mu, sd;
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    const double m = X.col(j).mean();
    const double s = std::sqrt((X.col(j).array() - m).square().mean());
    if (s > 1e-12 * std::max(1.0, std::abs(m))) {
      kept.push_back(static_cast<std::size_t>(j));
      mu.push_back(m);
      sd.push_back(s);
    }
  }
  Eigen::MatrixXd Z(n, static_cast<Eigen::Index>(kept.size() + 1));
  Z.col(0).setOnes();
  for (std::size_t i = 0; i < kept.size(); ++i)
    Z.col(static_cast<Eigen::Index>(i + 1)) = (X.col(static_cast<Eigen::Index>(kept[i])).array() - mu[i]) / sd[i];
  if (Z.cols() > n) throw SingularDesign("OLS design has more columns than rows");
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Z);
  qr.setThreshold(1e-10);
  if (qr.rank() < Z.cols()) throw SingularDesign("OLS design is rank deficient");
  Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(train.log_wages().data(), n);
  const Eigen::VectorXd g = qr.solve(y);
  OlsFit fit;
  fit.kept = kept;
  fit.coef = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(kept.size() + 1));
  double intercept = g(0);
  fit.names.push_back("intercept");
  for (std::size_t i = 0; i < kept.size(); ++i) {
    const double c = g(static_cast<Eigen::Index>(i + 1)) / sd[i];
    fit.coef(static_cast<Eigen::Index>(i + 1)) = c;
    intercept -= c * mu[i];
    fit.names.push_back(design.terms()[kept[i]].name);
  }
  fit.coef(0) = intercept;
  return fit;
}

std::vector<double> predict_ols(const OlsFit& fit, const OlsDesign& design, const Panel& p) {
  std::vector<double> out(p.size(), fit.coef(0));
  for (std::size_t i = 0; i < fit.kept.size(); ++i) {
    const auto& t = design.terms()[fit.kept[i]];
    const double c = fit.coef(static_cast<Eigen::Index>(i + 1));
    for (std::size_t r = 0; r < p.size(); ++r) out[r] += c * design.value(t, p, r);
  }
  return out;
}

double mse(std::span<const double> y, std::span<const double> f) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += (y[i] - f[i]) * (y[i] - f[i]);
  return y.empty() ? 0.0 : s / static_cast<double>(y.size());
}

double squared_corr(std::span<const double> y, std::span<const double> f) {
  const double r = pearson(y, f);
  return r * r;
}

}  // namespace

std::vector<OlsBaseline> fit_ols_baselines(const Panel& train, const Panel& test, const OlsConfig& config) {
  if (train.empty()) throw EmptyInput("fit_ols_baselines: empty training panel");
  std::vector<OlsBaseline> out;
  for (auto degree : config.degrees) {
    OlsDesign design(train, degree, config);
    const auto fit = fit_ols(train, design);
    OlsBaseline b;
    b.degree = degree;
    b.label = degree == 0 ? "simple" : "deg" + std::to_string(degree);
    b.names = fit.names;
    b.coefficients.assign(fit.coef.data(), fit.coef.data() + fit.coef.size());
    for (double c : b.coefficients)
      if (!std::isfinite(c)) throw SingularDesign("OLS produced a non-finite coefficient");
    const auto ftr = predict_ols(fit, design, train);
    b.train_mse = mse(train.log_wages(), ftr);
    b.train_r2 = squared_corr(train.log_wages(), ftr);
    if (!test.empty()) {
      const auto fte = predict_ols(fit, design, test);
      b.test_mse = mse(test.log_wages(), fte);
      b.test_r2 = squared_corr(test.log_wages(), fte);
    }
    out.push_back(std::move(b));
  }
  return out;
}

std::vector<double> ols_predict(const Panel& train, const Panel& target, std::size_t degree, const OlsConfig& config) {
  OlsDesign design(train, degree, config);
  return predict_ols(fit_ols(train, design), design, target);
}

void write_baselines_csv(std::span<const OlsBaseline> rows, std::ostream& out) {
  out << "model,train_mse,train_r2,test_mse,test_r2\n";
  for (const auto& b : rows)
    out << b.label << ',' << format_double(b.train_mse) << ',' << format_double(b.train_r2) << ','
        << format_double(b.test_mse) << ',' << format_double(b.test_r2) << '\n';
}

nlohmann::json EtaSquared::to_json() const { return {{"eta_squared", value}, {"zero_variance", zero_variance}}; }

EtaSquared eta_squared(std::span<const double> effects, std::span<const std::uint32_t> classes,
                       std::span<const double> weights) {
  if (effects.size() != classes.size() || effects.size() != weights.size())
    throw LengthMismatch("eta_squared: effects, classes and weights differ in length");
  if (effects.empty()) throw EmptyInput("eta_squared: no units");
  // Means are taken as an offset from the first member so single-unit classes
  // reproduce their value exactly.
  auto weighted_mean = [&](const std::vector<std::size_t>& idx) {
    const double base = effects[idx[0]];
    double sw = 0.0, acc = 0.0;
    for (auto i : idx) {
      sw += weights[i];
      acc += weights[i] * (effects[i] - base);
    }
    return sw > 0.0 ? base + acc / sw : base;
  };
  std::vector<std::size_t> all(effects.size());
  std::iota(all.begin(), all.end(), 0);
  const double m = weighted_mean(all);
  double total = 0.0;
  for (auto i : all) total += weights[i] * (effects[i] - m) * (effects[i] - m);
  std::map<std::uint32_t, std::vector<std::size_t>> groups;
  for (auto i : all) groups[classes[i]].push_back(i);
  double within = 0.0;
  for (const auto& [c, idx] : groups) {
    const double mc = weighted_mean(idx);
    for (auto i : idx) within += weights[i] * (effects[i] - mc) * (effects[i] - mc);
  }
  EtaSquared out;
  if (!(total > 0.0)) {
    out.zero_variance = true;
    return out;
  }
  out.value = std::clamp(1.0 - within / total, 0.0, 1.0);
  return out;
}

std::vector<double> mid_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> rank(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && x[order[j]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j + 1);  // average of ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) rank[order[k]] = r;
    i = j;
  }
  return rank;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw LengthMismatch("spearman: inputs differ in length");
  if (x.size() < 2) throw InvalidArgument("spearman: need at least two points");
  const auto rx = mid_ranks(x), ry = mid_ranks(y);
  return pearson(rx, ry);
}

}  // namespace twice
