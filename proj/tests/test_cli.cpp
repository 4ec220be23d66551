#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <spdlog/spdlog.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "twice/error.hpp"
#include "twice/run.hpp"

using namespace twice;
namespace fs = std::filesystem;

namespace {

const char* kSmall = R"(seed = 11
synthetic.n_workers = 400
synthetic.n_firms = 40
synthetic.n_years = 4
synthetic.sorting_strength = 0.6
synthetic.interaction_scale = 0.3
synthetic.noise_sd = 0.2
B = 2
K_grid = 2, 3
L_grid = 2
boost.max_rounds = 60
explain.features = age, log_revenue
explain.grid_points = 8
)";

RunConfig config_in(const std::string& name, const std::string& text = kSmall) {
  spdlog::set_level(spdlog::level::warn);
  std::istringstream in(text);
  RunConfig c = RunConfig::from_key_values(parse_key_values(in));
  c.out_dir = (fs::temp_directory_path() / ("twice_cli_" + name)).string();
  fs::remove_all(c.out_dir);
  c.finalize();
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

nlohmann::json json_at(const RunConfig& c, const std::string& file) {
  return nlohmann::json::parse(slurp(fs::path(c.out_dir) / file));
}

// Files of a run directory except the manifest, which carries timings.
std::map<std::string, std::string> artifacts(const std::string& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (name != "manifest.json") out[name] = slurp(e.path());
  }
  return out;
}

std::string expect_invalid_key(const std::string& text) {
  std::istringstream in(text);
  try {
    RunConfig::from_key_values(parse_key_values(in));
  } catch (const ConfigInvalid& e) {
    return e.key();
  }
  return "";
}

int run_tool(const std::string& args) {
  const std::string cmd = std::string(TWICE_BIN) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config parsing rejects bad keys and values") {
  CHECK(expect_invalid_key("nonsense = 1") == "nonsense");
  CHECK(expect_invalid_key("B = 1") == "B");
  CHECK(expect_invalid_key("B = 2\nB = 3") == "B");
  CHECK(expect_invalid_key("K = 4") == "L");
  CHECK(expect_invalid_key("synthetic.seed = 4") == "synthetic.seed");
  CHECK(expect_invalid_key("synthetic.n_workers = lots") == "synthetic.n_workers");
  CHECK(expect_invalid_key("boost.learning_rate = 0") == "boost");
  CHECK(expect_invalid_key("input = a.csv") == "column");
  CHECK(expect_invalid_key("column = x, numeric") == "column");
  CHECK(expect_invalid_key("explain.variants = pdp, ice") == "explain.variants");
  CHECK(expect_invalid_key("robustness.targets = mode") == "robustness.targets");
}

TEST_CASE("config values reach the run settings") {
  std::istringstream in(
      "input = panel.csv\ncolumn = age, numeric, worker\ncolumn = sector, categorical, firm, 3\n"
      "K = 5\nL = 6\nK_grid = 1,2\nexplain.pin = age\nexplain.pin = sector=a\nseed = 3\n");
  const RunConfig c = RunConfig::from_key_values(parse_key_values(in));
  REQUIRE(c.columns.size() == 2);
  CHECK(c.columns[1].kind == FeatureKind::categorical);
  CHECK(c.columns[1].side == ColumnSide::firm);
  CHECK(c.columns[1].cardinality == 3);
  CHECK(*c.K == 5);
  CHECK(*c.L == 6);
  CHECK(c.K_grid == std::vector<std::size_t>{1, 2});
  CHECK(c.explain.conditional_pins.size() == 2);
  CHECK(c.boost.seed == derive_seed(3, "boost"));
  CHECK(c.synthetic.seed == derive_seed(3, "simulate"));

  // The output directory does not enter the hash; the seed does.
  std::istringstream a("out = x\nB = 3\n"), b("out = y\nB = 3\n"), d("out = y\nB = 3\nseed = 2\n");
  const auto ha = RunConfig::from_key_values(parse_key_values(a)).config_hash;
  CHECK(ha == RunConfig::from_key_values(parse_key_values(b)).config_hash);
  CHECK(ha != RunConfig::from_key_values(parse_key_values(d)).config_hash);
}

TEST_CASE("fit without tuning or an explicit K and L is a missing tune artifact") {
  const RunConfig c = config_in("missing_tune");
  cmd_simulate(c);
  cmd_connect(c);
  try {
    cmd_fit(c);
    FAIL("cmd_fit did not throw");
  } catch (const MissingArtifact& e) {
    CHECK(e.stage() == "tune");
  }
  RunConfig bare = config_in("missing_connect");
  CHECK_THROWS_AS(cmd_tune(bare), MissingArtifact);
}

TEST_CASE("simulate, connect, tune, fit and decompose close and rerun identically") {
  const RunConfig c = config_in("pipeline");
  for (const char* stage : {"simulate", "connect", "tune", "fit", "decompose"}) run_stage(stage, c);

  const auto d = json_at(c, "decomposition.json");
  double total = 0;
  for (const auto& [name, share] : d.at("shares").items()) total += share.get<double>();
  CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(std::abs(d.at("closure_gap").get<double>()) <= 1e-6 * d.at("var_y").get<double>());

  const auto tune = json_at(c, "tune.json");
  const auto fit = json_at(c, "fit.json");
  CHECK(fit.at("K") == tune.at("K"));
  CHECK(fit.at("source") == "tune");
  CHECK(json_at(c, "loss_table.schema.json").at("columns").size() == 4);

  const auto manifest = RunManifest::load(c.out_dir);
  for (const char* stage : {"simulate", "connect", "tune", "fit", "decompose"}) {
    REQUIRE(manifest.stages.count(stage) == 1);
    for (const auto& a : manifest.stages.at(stage).artifacts) {
      const std::string bytes = slurp(fs::path(c.out_dir) / a.file);
      CHECK(a.bytes == bytes.size());
      CHECK(a.fnv1a == hex64(fnv1a(bytes)));
    }
  }

  const auto before = artifacts(c.out_dir);
  cmd_decompose(c);
  CHECK(artifacts(c.out_dir) == before);

  // A deleted artifact is regenerated byte for byte.
  fs::remove(fs::path(c.out_dir) / "sorting_matrix.csv");
  CHECK_FALSE(RunManifest::load(c.out_dir).has(c.out_dir, "decompose"));
  cmd_decompose(c);
  CHECK(artifacts(c.out_dir) == before);
}

TEST_CASE("the full pipeline is byte-identical under the same master seed") {
  RunConfig a = config_in("all_a");
  RunConfig b = config_in("all_b");
  run_all(a);
  run_all(b);
  const auto fa = artifacts(a.out_dir);
  CHECK(fa.count("curves.csv") == 1);
  CHECK(fa.count("robustness.json") == 1);
  CHECK(fa.count("event_study.csv") == 1);
  CHECK(fa == artifacts(b.out_dir));

  RunConfig other = config_in("all_seed");
  other.seed = 12;
  other.finalize();
  cmd_simulate(other);
  CHECK(slurp(fs::path(other.out_dir) / "simulated_panel.csv") != fa.at("simulated_panel.csv"));
}

TEST_CASE("csv input runs through connect with the declared schema") {
  const fs::path dir = fs::temp_directory_path() / "twice_cli_csv_data";
  fs::remove_all(dir);
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "panel.csv");
    out << "worker_id,firm_id,year,log_wage,age,sector\n"
        << "a,x,2010,1.0,30,\"s1\"\n"
        << "a,y,2011,1.2,31,\"s2\"\n"
        << "b,y,2010,1.5,40,\"s2\"\n"
        << "b,x,2011,1.4,41,\"s1\"\n"
        << "c,z,2010,2.0,50,\"s3\"\n";
  }
  const std::string text = "input = " + (dir / "panel.csv").string() +
                           "\ncolumn = age, numeric, worker\ncolumn = sector, categorical, firm\n"
                           "holdout.firm_fraction = 0.5\n";
  RunConfig c = config_in("csv_input", text);
  CHECK_THROWS_AS(cmd_simulate(c), ConfigInvalid);
  cmd_connect(c);
  const auto stats = json_at(c, "connectivity.json");
  CHECK(stats.at("rows_after") == 4);
  const auto schema = json_at(c, "schema.json");
  CHECK(schema.at("columns")[1].at("levels") == nlohmann::json({"s1", "s2", "s3"}));

  // One training firm leaves a fold complement empty: a runtime error, exit 2.
  CHECK(json_at(c, "connectivity.json").at("train_firms") == 1);
  CHECK_THROWS_AS(cmd_tune(c), EmptyTrainingCell);
  std::ofstream(dir / "run.cfg") << text;
  CHECK(run_tool("tune --config " + (dir / "run.cfg").string() + " --out " + c.out_dir) == 2);
}

TEST_CASE("the tool maps errors to exit codes") {
  const fs::path dir = fs::temp_directory_path() / "twice_cli_exit";
  fs::remove_all(dir);
  fs::create_directories(dir);
  {
    std::ofstream(dir / "bad.cfg") << "no_such_key = 1\n";
    std::ofstream(dir / "ok.cfg") << kSmall;
  }
  CHECK(run_tool("decompose --config " + (dir / "bad.cfg").string()) == 1);
  CHECK(run_tool("fit --config " + (dir / "missing.cfg").string()) == 1);
  CHECK(run_tool("fit --config " + (dir / "ok.cfg").string() + " --out " + (dir / "run").string()) == 1);
  CHECK(run_tool("simulate --config " + (dir / "ok.cfg").string() + " --out " + (dir / "run").string() +
                 " --quiet") == 0);
  CHECK(fs::exists(dir / "run" / "simulated_panel.csv"));
  CHECK(run_tool("nonsense --config x") != 0);
}
