#include <spdlog/spdlog.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "twice/crossfit.hpp"
#include "twice/decompose.hpp"
#include "twice/error.hpp"
#include "twice/run.hpp"

namespace twice {

namespace fs = std::filesystem;

namespace {

std::string dump(const nlohmann::json& j) { return j.dump(2) + "\n"; }

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

nlohmann::json read_json(const fs::path& p) {
  try {
    return nlohmann::json::parse(read_file(p));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("unreadable JSON " + p.string() + ": " + e.what());
  }
}

// Column names and value types of a CSV, read from its header and first row.
nlohmann::json csv_sidecar(const std::string& file, const std::string& content) {
  std::istringstream in(content);
  std::string header, first;
  std::getline(in, header);
  std::getline(in, first);
  const auto names = split_csv_line(header, 1);
  std::vector<std::string> values;
  if (!first.empty()) values = split_csv_line(first, 2);
  nlohmann::json cols = nlohmann::json::array();
  for (std::size_t i = 0; i < names.size(); ++i) {
    std::string type = "string";
    if (i < values.size()) {
      char* end = nullptr;
      const std::string& v = values[i];
      std::strtod(v.c_str(), &end);
      if (!v.empty() && end == v.c_str() + v.size()) type = "number";
    }
    cols.push_back({{"name", names[i]}, {"type", type}});
  }
  return {{"file", file}, {"format", "csv"}, {"header", true}, {"columns", std::move(cols)}};
}

class StageRun {
 public:
  StageRun(const RunConfig& config, std::string stage)
      : config_(config), stage_(std::move(stage)), start_(std::chrono::steady_clock::now()) {
    fs::create_directories(config_.out_dir);
    manifest = RunManifest::load(config_.out_dir);
    const std::string hash = hex64(config_.config_hash);
    if (!manifest.config_hash.empty() && manifest.config_hash != hash) {
      spdlog::warn("[{}] config differs from the one that produced earlier stages in {}", stage_, config_.out_dir);
    }
    manifest.config_hash = hash;
    spdlog::info("[{}] start", stage_);
  }

  fs::path path(const std::string& file) const { return fs::path(config_.out_dir) / file; }

  void write(const std::string& file, const std::string& content) {
    put(file, content);
    if (file.size() > 4 && file.compare(file.size() - 4, 4, ".csv") == 0) {
      put(file.substr(0, file.size() - 4) + ".schema.json", dump(csv_sidecar(file, content)));
    }
  }

  void finish() {
    StageRecord rec;
    rec.seed = config_.stage_seed(stage_);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    rec.artifacts = std::move(records_);
    manifest.stages[stage_] = std::move(rec);
    manifest.save(config_.out_dir);
    spdlog::info("[{}] done in {:.2f}s", stage_, manifest.stages[stage_].seconds);
  }

  RunManifest manifest;

 private:
  void put(const std::string& file, const std::string& content) {
    std::ofstream out(path(file), std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write " + path(file).string());
    out << content;
    records_.push_back({file, content.size(), hex64(fnv1a(content))});
  }

  const RunConfig& config_;
  std::string stage_;
  std::chrono::steady_clock::time_point start_;
  std::vector<ArtifactRecord> records_;
};

Panel load_panel(const StageRun& run, const std::string& file) {
  const ColumnSchema schema = ColumnSchema::from_json(read_json(run.path("schema.json")));
  return ingest_csv(run.path(file).string(), schema);
}

struct FitShape {
  std::size_t K = 0, L = 0;
};

FitShape fitted_shape(const StageRun& run) {
  const auto j = read_json(run.path("fit.json"));
  return {j.at("K").get<std::size_t>(), j.at("L").get<std::size_t>()};
}

double mse(std::span<const double> y, std::span<const double> f) {
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += (y[i] - f[i]) * (y[i] - f[i]);
  return y.empty() ? 0.0 : s / static_cast<double>(y.size());
}

double r2(std::span<const double> y, std::span<const double> f) {
  const double r = pearson(y, f);
  return r * r;
}

std::string panel_csv(const Panel& p) {
  std::ostringstream s;
  emit_csv(p, s);
  return s.str();
}

template <class F>
std::string to_text(F&& f) {
  std::ostringstream s;
  f(s);
  return s.str();
}

std::vector<std::uint32_t> all_rows(const Panel& p) {
  std::vector<std::uint32_t> r(p.size());
  std::iota(r.begin(), r.end(), 0u);
  return r;
}

struct TwiceDecomposition {
  CellAssignment cells;
  CellStats stats;
  ProjectedEffects effects;
  Decomposition decomposition;
};

TwiceDecomposition decompose_panel(const Panel& panel, const PartitionPair& pair) {
  TwiceDecomposition t;
  t.cells = assign_cells(panel, pair);
  t.stats = cell_stats(panel.log_wages(), t.cells);
  t.effects = project_additive(t.stats);
  t.decomposition = decompose_variance(panel.log_wages(), t.cells, t.stats, t.effects);
  return t;
}

Pin resolve_pin(const std::string& text, const Panel& panel) {
  Pin pin;
  const auto eq = text.find('=');
  pin.column = trim(text.substr(0, eq));
  const auto col = panel.schema().find(pin.column);
  if (!col && pin.column != kYearFeature) throw ConfigInvalid("explain.pin", "unknown column '" + pin.column + "'");
  if (eq == std::string::npos) return pin;
  const std::string value = trim(text.substr(eq + 1));
  if (col && panel.schema().column(*col).kind == FeatureKind::categorical) {
    const auto code = panel.schema().code_of(*col, value);
    if (!code) throw ConfigInvalid("explain.pin", "unknown level '" + value + "' of '" + pin.column + "'");
    pin.value = static_cast<double>(*code);
  } else {
    pin.value = parse_double_value("explain.pin", value);
  }
  return pin;
}

}  // namespace

void cmd_simulate(const RunConfig& c) {
  if (!c.input.empty()) throw ConfigInvalid("input", "simulate writes its own panel; remove the input key");
  StageRun run(c, "simulate");
  const auto sim = simulate(c.synthetic);
  run.write("simulated_panel.csv", panel_csv(sim.panel));
  run.write("simulated_schema.json", dump(sim.panel.schema().to_json()));
  run.write("truth.json", dump(sim.truth.to_json()));
  run.write("truth_types.csv", to_text([&](std::ostream& o) {
              o << "side,unit_id,type\n";
              for (std::uint32_t w = 0; w < sim.panel.worker_count(); ++w)
                o << "worker," << csv_field(sim.panel.worker_name(w)) << ',' << sim.truth.worker_type[w] + 1 << '\n';
              for (std::uint32_t f = 0; f < sim.panel.firm_count(); ++f)
                o << "firm," << csv_field(sim.panel.firm_name(f)) << ',' << sim.truth.firm_type[f] + 1 << '\n';
            }));
  run.write("synthetic_spec.txt", to_text([&](std::ostream& o) { c.synthetic.write(o); }));
  spdlog::info("[simulate] {} rows, {} workers, {} firms", sim.panel.size(), sim.panel.worker_count(),
               sim.panel.firm_count());
  run.finish();
}

void cmd_connect(const RunConfig& c) {
  StageRun run(c, "connect");
  Panel source;
  if (c.input.empty()) {
    run.manifest.require(c.out_dir, "simulate");
    source = ingest_csv(run.path("simulated_panel.csv").string(),
                        ColumnSchema::from_json(read_json(run.path("simulated_schema.json"))));
  } else {
    source = ingest_csv(c.input, ColumnSchema(c.columns));
  }
  const auto connected = largest_connected_set(source);
  const auto split = holdout_split(connected.panel, c.holdout_firm_fraction, c.holdout_worker_fraction,
                                   c.stage_seed("holdout"));
  auto stats = connected.stats.to_json();
  stats["train_rows"] = split.train.size();
  stats["test_rows"] = split.test.size();
  stats["train_firms"] = split.train.firm_count();
  stats["test_firms"] = split.test.firm_count();
  run.write("schema.json", dump(source.schema().to_json()));
  run.write("connected.csv", panel_csv(connected.panel));
  run.write("train.csv", panel_csv(split.train));
  run.write("test.csv", panel_csv(split.test));
  run.write("connectivity.json", dump(stats));
  run.write("panel_summary.csv", to_text([&](std::ostream& o) { write_summary_csv(summarize(connected.panel), o); }));
  spdlog::info("[connect] kept {} of {} rows; {} train, {} test", connected.panel.size(), source.size(),
               split.train.size(), split.test.size());
  run.finish();
}

void cmd_tune(const RunConfig& c) {
  StageRun run(c, "tune");
  run.manifest.require(c.out_dir, "connect");
  const Panel train = load_panel(run, "train.csv");
  const FoldPlan plan = make_fold_plan(train, c.B, c.stage_seed("folds"));
  const TuneResult result = tune_grid(train, c.K_grid, c.L_grid, plan, TuneConfig{c.partition, c.boost});
  run.write("fold_plan.json", dump(plan.to_json(train)));
  run.write("loss_table.csv", to_text([&](std::ostream& o) { result.write_csv(o); }));
  run.write("tune.json", dump(result.to_json()));
  spdlog::info("[tune] K* = {}, L* = {}, loss {}", result.K, result.L, result.loss);
  run.finish();
}

void cmd_fit(const RunConfig& c) {
  StageRun run(c, "fit");
  run.manifest.require(c.out_dir, "connect");
  std::size_t K = 0, L = 0;
  std::string source;
  if (c.K) {
    K = *c.K;
    L = *c.L;
    source = "config";
  } else {
    run.manifest.require(c.out_dir, "tune");
    const auto t = TuneResult::from_json(read_json(run.path("tune.json")));
    K = t.K;
    L = t.L;
    source = "tune";
  }
  const Panel train = load_panel(run, "train.csv");
  const Panel test = load_panel(run, "test.csv");
  const TwiceLearner learner(K, L, c.partition, c.boost);
  const TwiceModel model = learner.fit_twice(train, all_rows(train));
  const auto train_pred = model.predict(train.base_features());
  const auto test_pred = model.predict(test.base_features());
  const auto baselines = fit_ols_baselines(train, test, c.ols);

  run.write("model.json", dump(model.to_json()));
  run.write("partitions.json", dump(model.partitions().to_json()));
  const auto rules = describe_cells(model.partitions());
  run.write("cell_rules.txt", to_text([&](std::ostream& o) { write_rules_text(rules, o, &train.schema()); }));
  run.write("cell_rules.json", dump(rules_to_json(rules, &train.schema())));
  run.write("assignment.csv", to_text([&](std::ostream& o) {
              write_assignment_csv(train, assign_cells(train, model.partitions()), o);
            }));
  run.write("holdout_metrics.csv", to_text([&](std::ostream& o) {
              o << "model,train_mse,train_r2,test_mse,test_r2\n";
              o << "twice," << format_double(mse(train.log_wages(), train_pred)) << ','
                << format_double(r2(train.log_wages(), train_pred)) << ','
                << format_double(mse(test.log_wages(), test_pred)) << ','
                << format_double(r2(test.log_wages(), test_pred)) << '\n';
              for (const auto& b : baselines) {
                o << b.label << ',' << format_double(b.train_mse) << ',' << format_double(b.train_r2) << ','
                  << format_double(b.test_mse) << ',' << format_double(b.test_r2) << '\n';
              }
            }));
  run.write("fit.json", dump({{"K", K},
                              {"L", L},
                              {"source", source},
                              {"firm_cells", model.partitions().K()},
                              {"worker_cells", model.partitions().L()},
                              {"rounds_used", model.ensemble().rounds_used()},
                              {"best_round", model.ensemble().best_round()},
                              {"partition", c.partition.to_json()},
                              {"boost", c.boost.to_json()}}));
  spdlog::info("[fit] K = {}, L = {}; test R2 {:.4f}", K, L, r2(test.log_wages(), test_pred));
  run.finish();
}

void cmd_decompose(const RunConfig& c) {
  StageRun run(c, "decompose");
  run.manifest.require(c.out_dir, "fit");
  const Panel train = load_panel(run, "train.csv");
  const auto pair = PartitionPair::from_json(read_json(run.path("partitions.json")));
  const auto t = decompose_panel(train, pair);
  run.write("decomposition.json", dump(t.decomposition.to_json("twice")));
  run.write("sorting_matrix.csv",
            to_text([&](std::ostream& o) { sorting_matrix(t.cells, t.effects).write_csv(o); }));
  run.write("cells.csv", to_text([&](std::ostream& o) { write_cell_stats_csv(t.stats, t.effects, o); }));
  if (c.write_xi) {
    run.write("xi.csv", to_text([&](std::ostream& o) {
                o << "worker_id,firm_id,year,xi\n";
                for (std::size_t r = 0; r < train.size(); ++r) {
                  o << csv_field(train.worker_name(train.worker(r))) << ','
                    << csv_field(train.firm_name(train.firm(r))) << ',' << train.year(r) << ','
                    << format_double(t.decomposition.xi[r]) << '\n';
                }
              }));
  }
  const auto& d = t.decomposition;
  spdlog::info("[decompose] shares worker {:.3f} firm {:.3f} sorting {:.3f} interaction {:.3f} residual {:.3f}",
               d.share(d.worker), d.share(d.firm), d.share(d.sorting), d.share(d.interaction), d.share(d.residual));
  run.finish();
}

void cmd_akm(const RunConfig& c) {
  StageRun run(c, "akm");
  run.manifest.require(c.out_dir, "connect");
  run.manifest.require(c.out_dir, "fit");
  const Panel connected = load_panel(run, "connected.csv");
  const Panel train = load_panel(run, "train.csv");
  const Panel test = load_panel(run, "test.csv");
  const AkmModel model = fit_akm(connected, c.akm);
  const Decomposition d = akm_decomposition(model, connected);

  // Concordance over rows: each firm counts once per worker-year.
  const auto pair = PartitionPair::from_json(read_json(run.path("partitions.json")));
  const auto cells = assign_cells(connected, pair);
  const auto widx = model.worker_index();
  const auto fidx = model.firm_index();
  std::vector<double> theta(connected.size()), psi(connected.size()), ones(connected.size(), 1.0);
  for (std::size_t r = 0; r < connected.size(); ++r) {
    theta[r] = model.theta[widx.at(connected.worker_name(connected.worker(r)))];
    psi[r] = model.psi[fidx.at(connected.firm_name(connected.firm(r)))];
  }
  const EtaSquared eta_w = eta_squared(theta, cells.worker_cell, ones);
  const EtaSquared eta_f = eta_squared(psi, cells.firm_cell, ones);
  const auto baselines = fit_ols_baselines(train, test, c.ols);

  run.write("akm_worker_effects.csv", to_text([&](std::ostream& o) { model.write_worker_effects(o); }));
  run.write("akm_firm_effects.csv", to_text([&](std::ostream& o) { model.write_firm_effects(o); }));
  run.write("akm_decomposition.json", dump(d.to_json("akm")));
  run.write("akm_summary.json", dump(model.summary_json()));
  run.write("eta_squared.json", dump({{"worker", eta_w.to_json()}, {"firm", eta_f.to_json()}, {"weights", "rows"}}));
  run.write("ols_baselines.csv", to_text([&](std::ostream& o) { write_baselines_csv(baselines, o); }));
  spdlog::info("[akm] eta2 worker {:.3f}, firm {:.3f}", eta_w.value, eta_f.value);
  run.finish();
}

void cmd_explain(const RunConfig& c) {
  StageRun run(c, "explain");
  run.manifest.require(c.out_dir, "fit");
  const Panel train = load_panel(run, "train.csv");
  const FitShape shape = fitted_shape(run);
  const FoldPlan plan = run.manifest.has(c.out_dir, "tune")
                            ? FoldPlan::from_json(read_json(run.path("fold_plan.json")), train)
                            : make_fold_plan(train, c.B, c.stage_seed("folds"));
  const TwiceLearner learner(shape.K, shape.L, c.partition, c.boost);
  const CrossFitResult cf = crossfit_predict(train, plan, learner);
  const auto models = predictors_of(cf);
  const FeatureView x = train.base_features();

  std::vector<std::string> features = c.explain.features;
  const bool automatic = features.empty();
  if (automatic) {
    for (std::size_t j = 0; j < x.size(); ++j)
      if (x.info[j].kind == FeatureKind::numeric) features.push_back(x.info[j].name);
  }
  std::vector<Pin> pins;
  for (const auto& p : c.explain.conditional_pins) pins.push_back(resolve_pin(p, train));

  std::vector<Curve> curves;
  for (const auto& feature : features) {
    const std::size_t focal = x.index_of(feature);
    const bool categorical = x.info[focal].kind == FeatureKind::categorical;
    for (const CurveVariant v : c.explain.variants) {
      CurveSpec spec;
      spec.feature = feature;
      spec.grid_points = c.explain.grid_points;
      spec.lower_trim = c.explain.lower_trim;
      spec.upper_trim = c.explain.upper_trim;
      spec.max_rows = c.explain.max_rows;
      spec.variant = v;
      if (v == CurveVariant::ale && categorical) {
        if (!automatic) spdlog::warn("[explain] no ale for categorical '{}'", feature);
        continue;
      }
      if (v == CurveVariant::pdp_conditional) {
        if (pins.empty()) throw ConfigInvalid("explain.pin", "the conditional variant needs at least one pin");
        for (const auto& p : pins)
          if (p.column != feature) spec.pins.push_back(p);
        curves.push_back(compute_curve(models, x, spec));
      } else if (v == CurveVariant::pdp_reference && !c.explain.subgroup.empty() &&
                 c.explain.subgroup != feature) {
        const std::size_t g = x.index_of(c.explain.subgroup);
        if (x.info[g].kind == FeatureKind::categorical) {
          std::vector<double> levels(x.columns[g].begin(), x.columns[g].end());
          std::sort(levels.begin(), levels.end());
          levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
          for (double level : levels) {
            spec.pins = {Pin{c.explain.subgroup, level}};
            curves.push_back(compute_curve(models, x, spec));
          }
        } else {
          spec.pins = {Pin{c.explain.subgroup, std::nullopt}};
          curves.push_back(compute_curve(models, x, spec));
        }
      } else {
        curves.push_back(compute_curve(models, x, spec));
      }
    }
  }

  const BlockedRisk risk = blocked_risk(train.log_wages(), cf.oof, plan);
  const auto final_model = TwiceModel::from_json(read_json(run.path("model.json")));
  run.write("curves.csv", to_text([&](std::ostream& o) { write_curves_csv(curves, o); }));
  run.write("variable_importance.csv", to_text([&](std::ostream& o) {
              o << "feature,importance\n";
              for (const auto& [name, gain] : final_model.ensemble().variable_importance())
                o << csv_field(name) << ',' << format_double(gain) << '\n';
            }));
  run.write("crossfit_oof.csv", to_text([&](std::ostream& o) {
              o << "worker_id,firm_id,year,log_wage,oof\n";
              for (std::size_t r = 0; r < train.size(); ++r) {
                o << csv_field(train.worker_name(train.worker(r))) << ',' << csv_field(train.firm_name(train.firm(r)))
                  << ',' << train.year(r) << ',' << format_double(train.log_wage(r)) << ',' << format_double(cf.oof[r])
                  << '\n';
              }
            }));
  run.write("crossfit.json", dump({{"K", shape.K},
                                   {"L", shape.L},
                                   {"B", plan.B},
                                   {"models", models.size()},
                                   {"empty_cells", cf.empty_cells},
                                   {"blocked_loss", risk.loss},
                                   {"pooled_mse", risk.pooled_mse}}));
  spdlog::info("[explain] {} curves from {} cross-fitted models", curves.size(), models.size());
  run.finish();
}

void cmd_eventstudy(const RunConfig& c) {
  StageRun run(c, "eventstudy");
  run.manifest.require(c.out_dir, "connect");
  const Panel connected = load_panel(run, "connected.csv");
  const EventStudyTable table = event_study(connected, c.event_study);
  nlohmann::json missing = nlohmann::json::array();
  for (const auto& [o, d] : table.insufficient) missing.push_back({{"origin_q", o}, {"dest_q", d}});
  run.write("event_study.csv", to_text([&](std::ostream& o) { table.write_csv(o); }));
  run.write("event_study.json", dump({{"quantiles", table.quantiles},
                                      {"cutoffs", table.cutoffs},
                                      {"movers", table.movers},
                                      {"insufficient_events", std::move(missing)}}));
  spdlog::info("[eventstudy] {} movers, {} empty pairs", table.movers, table.insufficient.size());
  run.finish();
}

void cmd_robustness(const RunConfig& c) {
  StageRun run(c, "robustness");
  run.manifest.require(c.out_dir, "fit");
  const Panel train = load_panel(run, "train.csv");
  const FitShape shape = fitted_shape(run);
  std::vector<std::vector<double>> firm_components;
  std::ostringstream shares;
  shares << "firm_target,K,L,worker,firm,sorting,interaction,residual\n";
  for (const FirmTargetKind target : c.robustness_targets) {
    PartitionConfig pc = c.partition;
    pc.firm_target = target;
    const auto t = decompose_panel(train, build_partitions(train, shape.K, shape.L, pc));
    const auto& d = t.decomposition;
    shares << to_string(target) << ',' << t.stats.K << ',' << t.stats.L << ',' << format_double(d.share(d.worker))
           << ',' << format_double(d.share(d.firm)) << ',' << format_double(d.share(d.sorting)) << ','
           << format_double(d.share(d.interaction)) << ',' << format_double(d.share(d.residual)) << '\n';
    firm_components.push_back(firm_component_by_firm(train, t.cells, t.effects));
  }
  nlohmann::json pairs = nlohmann::json::array();
  for (std::size_t a = 0; a < firm_components.size(); ++a) {
    for (std::size_t b = a + 1; b < firm_components.size(); ++b) {
      pairs.push_back({{"a", to_string(c.robustness_targets[a])},
                       {"b", to_string(c.robustness_targets[b])},
                       {"spearman_firm_component", spearman(firm_components[a], firm_components[b])}});
    }
  }
  run.write("robustness_shares.csv", shares.str());
  run.write("robustness.json", dump({{"firms", train.firm_count()}, {"comparisons", std::move(pairs)}}));
  run.finish();
}

void run_stage(const std::string& name, const RunConfig& config) {
  if (name == "simulate") return cmd_simulate(config);
  if (name == "connect") return cmd_connect(config);
  if (name == "tune") return cmd_tune(config);
  if (name == "fit") return cmd_fit(config);
  if (name == "decompose") return cmd_decompose(config);
  if (name == "akm") return cmd_akm(config);
  if (name == "explain") return cmd_explain(config);
  if (name == "eventstudy" || name == "event-study") return cmd_eventstudy(config);
  if (name == "robustness") return cmd_robustness(config);
  throw InvalidArgument("unknown command '" + name + "'");
}

void run_all(const RunConfig& config) {
  for (const auto& stage : stage_names()) {
    if (stage == "simulate" && !config.input.empty()) continue;
    run_stage(stage, config);
  }
}

}  // namespace twice
