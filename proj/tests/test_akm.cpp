#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <Eigen/Dense>
#include <cmath>
#include <sstream>

#include "twice/akm.hpp"
#include "twice/error.hpp"
#include "twice/graph.hpp"
#include "twice/util.hpp"

using namespace twice;

namespace {

ColumnSchema age_schema() {
  return ColumnSchema({{"age", FeatureKind::numeric, ColumnSide::worker, 0},
                       {"size", FeatureKind::numeric, ColumnSide::firm, 0}});
}

AkmConfig no_controls() {
  AkmConfig c;
  c.year_effects = false;
  c.age_column = "none";
  return c;
}

// Random mobility panel restricted to its largest connected set.
Panel random_connected(std::size_t workers, std::size_t firms, std::size_t years, double move, std::uint64_t seed) {
  Rng rng(seed);
  PanelBuilder b(age_schema());
  for (std::size_t i = 0; i < workers; ++i) {
    auto f = rng.uniform_int(firms);
    const double age0 = 22 + rng.uniform() * 30;
    const double theta = rng.normal();
    for (std::size_t t = 0; t < years; ++t) {
      if (t > 0 && rng.uniform() < move) f = rng.uniform_int(firms);
      const double age = age0 + static_cast<double>(t);
      const double y = theta + 0.3 * static_cast<double>(f % 3) + 0.001 * (age - 40) * (age - 40) + 0.2 * rng.normal();
      b.add("w" + std::to_string(i), "f" + std::to_string(f), 2000 + static_cast<int>(t), y,
            std::vector<double>{age, static_cast<double>(f)});
    }
  }
  return largest_connected_set(std::move(b).build()).panel;
}

struct DenseFit {
  std::vector<double> theta, psi, beta;
};

// Direct least squares on worker dummies, firm dummies without the pinned
// firm, and the controls; effects recentred to row mean zero.
DenseFit dense_oracle(const Panel& p, const AkmConfig& cfg, const std::string& pinned) {
  const auto controls = akm_controls(p, cfg);
  const auto W = static_cast<Eigen::Index>(p.worker_count());
  const auto pin = static_cast<Eigen::Index>(*p.find_firm(pinned));
  std::vector<Eigen::Index> firm_col(p.firm_count(), -1);
  Eigen::Index next = W;
  for (Eigen::Index f = 0; f < static_cast<Eigen::Index>(p.firm_count()); ++f)
    if (f != pin) firm_col[static_cast<std::size_t>(f)] = next++;
  const Eigen::Index ctrl0 = next;
  const auto cols = ctrl0 + static_cast<Eigen::Index>(controls.columns.size());
  Eigen::MatrixXd X = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(p.size()), cols);
  Eigen::VectorXd y(static_cast<Eigen::Index>(p.size()));
  for (std::size_t r = 0; r < p.size(); ++r) {
    const auto i = static_cast<Eigen::Index>(r);
    X(i, p.worker(r)) = 1;
    if (firm_col[p.firm(r)] >= 0) X(i, firm_col[p.firm(r)]) = 1;
    for (std::size_t c = 0; c < controls.columns.size(); ++c) X(i, ctrl0 + static_cast<Eigen::Index>(c)) = controls.columns[c][r];
    y(i) = p.log_wage(r);
  }
  Eigen::VectorXd b = X.householderQr().solve(y);
  DenseFit out;
  out.theta.assign(p.worker_count(), 0);
  out.psi.assign(p.firm_count(), 0);
  for (std::size_t w = 0; w < p.worker_count(); ++w) out.theta[w] = b(static_cast<Eigen::Index>(w));
  for (std::size_t f = 0; f < p.firm_count(); ++f)
    if (firm_col[f] >= 0) out.psi[f] = b(firm_col[f]);
  for (std::size_t c = 0; c < controls.columns.size(); ++c) out.beta.push_back(b(ctrl0 + static_cast<Eigen::Index>(c)));
  double tb = 0, pb = 0;
  for (std::size_t r = 0; r < p.size(); ++r) {
    tb += out.theta[p.worker(r)];
    pb += out.psi[p.firm(r)];
  }
  for (auto& t : out.theta) t -= tb / static_cast<double>(p.size());
  for (auto& f : out.psi) f -= pb / static_cast<double>(p.size());
  return out;
}

void check_against_oracle(const Panel& p, const AkmConfig& cfg) {
  auto m = fit_akm(p, cfg);
  auto o = dense_oracle(p, cfg, m.pinned_firm);
  for (std::size_t w = 0; w < p.worker_count(); ++w) CHECK(std::abs(m.theta[w] - o.theta[w]) <= 1e-8);
  for (std::size_t f = 0; f < p.firm_count(); ++f) CHECK(std::abs(m.psi[f] - o.psi[f]) <= 1e-8);
  REQUIRE(m.beta.size() == o.beta.size());
  for (std::size_t c = 0; c < m.beta.size(); ++c) CHECK(std::abs(m.beta[c] - o.beta[c]) <= 1e-8);
}

double brute_rank(std::span<const double> x, std::size_t i) {
  double less = 0, equal = 0;
  for (double v : x) {
    if (v < x[i]) less += 1;
    if (v == x[i]) equal += 1;
  }
  return less + (equal + 1) / 2;
}

}  // namespace

TEST_CASE("one worker at one firm") {
  PanelBuilder b(age_schema());
  b.add("w", "f", 2000, 1.0, std::vector<double>{30.0, 1.0});
  b.add("w", "f", 2001, 2.0, std::vector<double>{31.0, 1.0});
  auto m = fit_akm(std::move(b).build(), no_controls());
  CHECK(m.theta[0] == 0.0);
  CHECK(m.psi[0] == 0.0);
  CHECK(m.intercept == doctest::Approx(1.5));
}

TEST_CASE("three workers two firms one mover match the dense oracle") {
  PanelBuilder b(age_schema());
  b.add("w1", "f1", 2000, 1.0, std::vector<double>{30.0, 1.0});
  b.add("w1", "f1", 2001, 1.2, std::vector<double>{31.0, 1.0});
  b.add("w2", "f1", 2000, 2.0, std::vector<double>{40.0, 1.0});
  b.add("w2", "f2", 2001, 2.7, std::vector<double>{41.0, 1.0});
  b.add("w3", "f2", 2000, 0.5, std::vector<double>{50.0, 1.0});
  b.add("w3", "f2", 2001, 0.4, std::vector<double>{51.0, 1.0});
  Panel p = std::move(b).build();
  check_against_oracle(p, no_controls());
  auto m = fit_akm(p, no_controls());
  const double gap = m.psi[*p.find_firm("f2")] - m.psi[*p.find_firm("f1")];
  auto o = dense_oracle(p, no_controls(), m.pinned_firm);
  CHECK(std::abs(gap - (o.psi[1] - o.psi[0])) <= 1e-12);
}

TEST_CASE("random small panels match the dense oracle") {
  AkmConfig with_controls;
  for (std::uint64_t seed = 1; seed <= 25; ++seed) {
    Panel p = random_connected(35, 8, 5, 0.3, seed);
    REQUIRE(p.size() <= 200);
    check_against_oracle(p, with_controls);
    check_against_oracle(p, no_controls());
  }
}

TEST_CASE("normal equations hold for worker and firm dummies") {
  Panel p = random_connected(400, 30, 6, 0.25, 77);
  auto m = fit_akm(p);
  std::vector<double> by_worker(p.worker_count(), 0), by_firm(p.firm_count(), 0);
  for (std::size_t r = 0; r < p.size(); ++r) {
    by_worker[p.worker(r)] += m.residual[r];
    by_firm[p.firm(r)] += m.residual[r];
  }
  for (double v : by_worker) CHECK(std::abs(v) <= 1e-8);
  for (double v : by_firm) CHECK(std::abs(v) <= 1e-8);
  CHECK(m.normal_residual <= 1e-9);
  for (std::size_t r = 0; r < p.size(); ++r) {
    const double fit = m.intercept + m.theta[p.worker(r)] + m.psi[p.firm(r)] + m.control_fit[r];
    CHECK(std::abs(fit + m.residual[r] - p.log_wage(r)) <= 1e-10);
  }
}

TEST_CASE("disconnected panels are rejected") {
  PanelBuilder b(age_schema());
  b.add("w1", "f1", 2000, 1.0, std::vector<double>{30.0, 1.0});
  b.add("w2", "f2", 2000, 1.0, std::vector<double>{30.0, 1.0});
  CHECK_THROWS_AS(fit_akm(std::move(b).build(), no_controls()), NotConnected);
}

TEST_CASE("controls absorbed by worker effects are singular") {
  PanelBuilder b(age_schema());
  // Age never changes within a worker, so its polynomial is a worker effect.
  for (int i = 0; i < 6; ++i)
    for (int t = 0; t < 3; ++t)
      b.add("w" + std::to_string(i), "f" + std::to_string((i + t) % 3), 2000 + t, 0.1 * i + t,
            std::vector<double>{30.0 + i, 1.0});
  AkmConfig cfg;
  cfg.year_effects = false;
  CHECK_THROWS_AS(fit_akm(std::move(b).build(), cfg), SingularControls);
}

TEST_CASE("a wage shift moves only the intercept") {
  Panel p = random_connected(300, 20, 5, 0.3, 5);
  PanelBuilder b(p.schema());
  for (std::size_t r = 0; r < p.size(); ++r) {
    auto obs = p.observation(r);
    obs.log_wage += 3.25;
    b.add(obs);
  }
  Panel q = std::move(b).build();
  auto m1 = fit_akm(p), m2 = fit_akm(q);
  CHECK(std::abs(m2.intercept - m1.intercept - 3.25) <= 1e-8);
  for (std::size_t w = 0; w < p.worker_count(); ++w) CHECK(std::abs(m1.theta[w] - m2.theta[w]) <= 1e-8);
  for (std::size_t f = 0; f < p.firm_count(); ++f) CHECK(std::abs(m1.psi[f] - m2.psi[f]) <= 1e-8);
  auto d1 = akm_decomposition(m1, p), d2 = akm_decomposition(m2, q);
  CHECK(std::abs(d1.share(d1.worker) - d2.share(d2.worker)) <= 1e-8);
  CHECK(std::abs(d1.share(d1.firm) - d2.share(d2.firm)) <= 1e-8);
  CHECK(std::abs(d1.share(d1.sorting) - d2.share(d2.sorting)) <= 1e-8);
  CHECK(std::abs(d1.share(d1.residual) - d2.share(d2.residual)) <= 1e-8);
}

TEST_CASE("akm decomposition closes") {
  Panel p = random_connected(500, 25, 5, 0.3, 6);
  auto m = fit_akm(p);
  auto d = akm_decomposition(m, p);
  CHECK(d.rows == p.size());
  CHECK(std::abs(d.total() - d.var_y) <= 1e-6 * d.var_y);
  auto j = d.to_json("akm");
  CHECK(j["method"] == "akm");
  CHECK_FALSE(j["shares"].contains("interaction"));
  double s = 0;
  for (auto& [k, v] : j["shares"].items()) s += v.get<double>();
  CHECK(std::abs(s - 1.0) <= 1e-6);
  CHECK(j.contains("convention"));
}

TEST_CASE("a single firm has no firm or sorting variance") {
  PanelBuilder b(age_schema());
  Rng rng(2);
  for (int i = 0; i < 20; ++i)
    for (int t = 0; t < 3; ++t) b.add("w" + std::to_string(i), "f", 2000 + t, rng.normal(), std::vector<double>{40.0 + t, 1.0});
  Panel p = std::move(b).build();
  auto m = fit_akm(p, no_controls());
  auto d = akm_decomposition(m, p);
  CHECK(d.firm == 0.0);
  CHECK(d.sorting == 0.0);
}

TEST_CASE("effects csv") {
  Panel p = random_connected(30, 5, 3, 0.5, 8);
  auto m = fit_akm(p, no_controls());
  std::ostringstream out;
  m.write_firm_effects(out);
  CHECK(out.str().rfind("unit_id,effect\n", 0) == 0);
}

TEST_CASE("ols on a constant target") {
  Panel p = random_connected(200, 10, 4, 0.3, 9);
  PanelBuilder b(p.schema());
  for (std::size_t r = 0; r < p.size(); ++r) {
    auto obs = p.observation(r);
    obs.log_wage = 2.0;
    b.add(obs);
  }
  Panel c = std::move(b).build();
  auto rows = fit_ols_baselines(c, c);
  REQUIRE(rows.size() == 4);
  for (const auto& row : rows) {
    CHECK(row.test_r2 == 0.0);
    CHECK(row.test_mse <= 1e-20);
  }
  CHECK(rows[0].label == "simple");
  CHECK(rows[3].label == "deg3");
}

TEST_CASE("ols recovers an exactly linear design") {
  ColumnSchema schema({{"age", FeatureKind::numeric, ColumnSide::worker, 0},
                       {"tenure", FeatureKind::numeric, ColumnSide::worker, 0},
                       {"educ", FeatureKind::categorical, ColumnSide::worker, 0},
                       {"log_size", FeatureKind::numeric, ColumnSide::firm, 0}});
  // One builder so train and test share category codes.
  auto make = [&](std::uint64_t seed, std::size_t n) {
    Rng rng(seed);
    PanelBuilder b(schema);
    for (std::size_t i = 0; i < n; ++i) {
      const double age = 20 + 40 * rng.uniform(), tenure = 10 * rng.uniform(), size = rng.normal();
      const auto educ = rng.uniform_int(3);
      const int year = 2000 + static_cast<int>(rng.uniform_int(3));
      const double y = 1 + 0.02 * age + 0.05 * tenure + 0.3 * educ + 0.1 * size + 0.05 * (year - 2000) + 0.02 * rng.normal();
      Observation obs{"w" + std::to_string(i), "f" + std::to_string(i % 50), year, y, {age, tenure, 0.0}, {size}};
      obs.worker_covariates[2] = static_cast<double>(b.schema().intern(2, "e" + std::to_string(educ)));
      b.add(obs);
    }
    return std::move(b).build();
  };
  Panel all = make(1, 4000);
  std::vector<std::size_t> tr, te;
  for (std::size_t r = 0; r < all.size(); ++r) (r < 3000 ? tr : te).push_back(r);
  Panel train = all.select(tr), test = all.select(te);
  OlsConfig cfg;
  cfg.degrees = {1};
  auto rows = fit_ols_baselines(train, test, cfg);
  CHECK(rows[0].test_r2 >= 0.99);
}

TEST_CASE("duplicate regressors are singular") {
  ColumnSchema schema({{"a", FeatureKind::numeric, ColumnSide::worker, 0},
                       {"b", FeatureKind::numeric, ColumnSide::worker, 0}});
  PanelBuilder b(schema);
  Rng rng(1);
  for (int i = 0; i < 50; ++i) {
    const double x = rng.normal();
    b.add("w" + std::to_string(i), "f", 2000, x, std::vector<double>{x, 2 * x + 1});
  }
  Panel p = std::move(b).build();
  OlsConfig cfg;
  cfg.degrees = {1};
  CHECK_THROWS_AS(fit_ols_baselines(p, p, cfg), SingularDesign);
}

TEST_CASE("eta squared edge cases") {
  std::vector<double> e{0.1, 0.7, -0.3, 1.9}, w{3, 1, 2, 5};
  std::vector<std::uint32_t> own{0, 1, 2, 3}, one{0, 0, 0, 0};
  CHECK(eta_squared(e, own, w).value == 1.0);
  CHECK(eta_squared(e, one, w).value == 0.0);
  std::vector<double> flat{2, 2, 2, 2};
  auto z = eta_squared(flat, own, w);
  CHECK(z.zero_variance);
  CHECK(z.value == 0.0);
}

TEST_CASE("eta squared by hand and under affine maps") {
  // Classes {1,3} and {5}: weights 1,1,2. Mean 3.5, total 1*6.25+1*0.25+2*2.25 = 11,
  // within = 2, eta = 9/11.
  std::vector<double> e{1, 3, 5}, w{1, 1, 2};
  std::vector<std::uint32_t> c{0, 0, 1};
  CHECK(std::abs(eta_squared(e, c, w).value - 9.0 / 11.0) <= 1e-14);
  Rng rng(4);
  std::vector<double> x(200), ww(200), t(200);
  std::vector<std::uint32_t> cls(200);
  for (std::size_t i = 0; i < 200; ++i) {
    cls[i] = static_cast<std::uint32_t>(rng.uniform_int(7));
    x[i] = cls[i] * 0.3 + rng.normal();
    ww[i] = 1 + rng.uniform_int(5);
    t[i] = -4.0 * x[i] + 17.0;
  }
  CHECK(std::abs(eta_squared(x, cls, ww).value - eta_squared(t, cls, ww).value) <= 1e-10);
}

TEST_CASE("spearman") {
  std::vector<double> x{1, 5, 2, 8, 3};
  std::vector<double> neg{-1, -5, -2, -8, -3};
  CHECK(spearman(x, x) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(spearman(x, neg) == doctest::Approx(-1.0).epsilon(1e-15));
  std::vector<double> a{1, 2, 2, 3, 3}, b{5, 3, 3, 1, 2};
  std::vector<double> ra, rb;
  for (std::size_t i = 0; i < 5; ++i) {
    ra.push_back(brute_rank(a, i));
    rb.push_back(brute_rank(b, i));
  }
  CHECK(mid_ranks(a) == ra);
  CHECK(std::abs(spearman(a, b) - pearson(ra, rb)) <= 1e-15);
  CHECK_THROWS_AS(spearman(a, std::vector<double>{1, 2}), LengthMismatch);
}
