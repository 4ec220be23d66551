#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include "twice/error.hpp"
#include "twice/run.hpp"

namespace twice {

namespace fs = std::filesystem;

namespace {

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

std::size_t as_size(const std::string& key, const std::string& value) {
  return static_cast<std::size_t>(parse_uint_value(key, value));
}

std::vector<std::string> string_list(const std::string& key, const std::string& value) {
  std::vector<std::string> out;
  for (const auto& item : split(value, ',')) {
    std::string t = trim(item);
    if (t.empty()) throw ConfigInvalid(key, "empty list element");
    out.push_back(std::move(t));
  }
  return out;
}

Column parse_column(const std::string& key, const std::string& value) {
  const auto parts = string_list(key, value);
  if (parts.size() < 3 || parts.size() > 4) {
    throw ConfigInvalid(key, "expected 'name, numeric|categorical, worker|firm[, cardinality]'");
  }
  Column c;
  c.name = parts[0];
  try {
    c.kind = feature_kind_from_string(parts[1]);
    c.side = column_side_from_string(parts[2]);
  } catch (const ValidationError& e) {
    throw ConfigInvalid(key, e.what());
  }
  if (parts.size() == 4) c.cardinality = as_size(key, parts[3]);
  return c;
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> s = {
      {"out", [](RunConfig& c, const auto&, const auto& v) { c.out_dir = v; }},
      {"seed", [](RunConfig& c, const auto& k, const auto& v) { c.seed = parse_uint_value(k, v); }},
      {"input", [](RunConfig& c, const auto&, const auto& v) { c.input = v; }},
      {"column", [](RunConfig& c, const auto& k, const auto& v) { c.columns.push_back(parse_column(k, v)); }},
      {"B", [](RunConfig& c, const auto& k, const auto& v) { c.B = as_size(k, v); }},
      {"K_grid", [](RunConfig& c, const auto& k, const auto& v) { c.K_grid = parse_size_list(k, v); }},
      {"L_grid", [](RunConfig& c, const auto& k, const auto& v) { c.L_grid = parse_size_list(k, v); }},
      {"K", [](RunConfig& c, const auto& k, const auto& v) { c.K = as_size(k, v); }},
      {"L", [](RunConfig& c, const auto& k, const auto& v) { c.L = as_size(k, v); }},
      {"holdout.firm_fraction",
       [](RunConfig& c, const auto& k, const auto& v) { c.holdout_firm_fraction = parse_double_value(k, v); }},
      {"holdout.worker_fraction",
       [](RunConfig& c, const auto& k, const auto& v) { c.holdout_worker_fraction = parse_double_value(k, v); }},
      {"partition.firm_target",
       [](RunConfig& c, const auto& k, const auto& v) {
         try {
           c.partition.firm_target = firm_target_from_string(v);
         } catch (const ValidationError& e) {
           throw ConfigInvalid(k, e.what());
         }
       }},
      {"partition.weight_firm_years",
       [](RunConfig& c, const auto& k, const auto& v) { c.partition.weight_firm_years = parse_bool_value(k, v); }},
      {"partition.min_leaf_size",
       [](RunConfig& c, const auto& k, const auto& v) { c.partition.tree.min_leaf_size = parse_double_value(k, v); }},
      {"partition.max_depth",
       [](RunConfig& c, const auto& k, const auto& v) { c.partition.tree.max_depth = as_size(k, v); }},
      {"partition.numeric_candidate_quantiles",
       [](RunConfig& c, const auto& k, const auto& v) {
         c.partition.tree.numeric_candidate_quantiles = as_size(k, v);
       }},
      {"partition.residual_folds",
       [](RunConfig& c, const auto& k, const auto& v) { c.partition.residual_folds = as_size(k, v); }},
      {"boost.learning_rate",
       [](RunConfig& c, const auto& k, const auto& v) { c.boost.learning_rate = parse_double_value(k, v); }},
      {"boost.early_stop_patience",
       [](RunConfig& c, const auto& k, const auto& v) { c.boost.early_stop_patience = as_size(k, v); }},
      {"boost.max_depth", [](RunConfig& c, const auto& k, const auto& v) { c.boost.max_depth = as_size(k, v); }},
      {"boost.min_leaf_size",
       [](RunConfig& c, const auto& k, const auto& v) { c.boost.min_leaf_size = parse_double_value(k, v); }},
      {"boost.max_leaves", [](RunConfig& c, const auto& k, const auto& v) { c.boost.max_leaves = as_size(k, v); }},
      {"boost.max_rounds", [](RunConfig& c, const auto& k, const auto& v) { c.boost.max_rounds = as_size(k, v); }},
      {"boost.validation_fraction",
       [](RunConfig& c, const auto& k, const auto& v) { c.boost.validation_fraction = parse_double_value(k, v); }},
      {"boost.numeric_candidate_quantiles",
       [](RunConfig& c, const auto& k, const auto& v) { c.boost.numeric_candidate_quantiles = as_size(k, v); }},
      {"akm.year_effects",
       [](RunConfig& c, const auto& k, const auto& v) { c.akm.year_effects = parse_bool_value(k, v); }},
      {"akm.age_column", [](RunConfig& c, const auto&, const auto& v) { c.akm.age_column = v; }},
      {"akm.reference_age",
       [](RunConfig& c, const auto& k, const auto& v) { c.akm.reference_age = parse_double_value(k, v); }},
      {"akm.age_degree", [](RunConfig& c, const auto& k, const auto& v) { c.akm.age_degree = as_size(k, v); }},
      {"akm.cg_tol", [](RunConfig& c, const auto& k, const auto& v) { c.akm.cg_tol = parse_double_value(k, v); }},
      {"ols.degrees", [](RunConfig& c, const auto& k, const auto& v) { c.ols.degrees = parse_size_list(k, v); }},
      {"ols.poly_columns", [](RunConfig& c, const auto& k, const auto& v) { c.ols.poly_columns = string_list(k, v); }},
      {"explain.features",
       [](RunConfig& c, const auto& k, const auto& v) { c.explain.features = string_list(k, v); }},
      {"explain.variants",
       [](RunConfig& c, const auto& k, const auto& v) {
         c.explain.variants.clear();
         for (const auto& name : string_list(k, v)) {
           try {
             c.explain.variants.push_back(curve_variant_from_string(name));
           } catch (const ValidationError& e) {
             throw ConfigInvalid(k, e.what());
           }
         }
       }},
      {"explain.grid_points",
       [](RunConfig& c, const auto& k, const auto& v) { c.explain.grid_points = as_size(k, v); }},
      {"explain.lower_trim",
       [](RunConfig& c, const auto& k, const auto& v) { c.explain.lower_trim = parse_double_value(k, v); }},
      {"explain.upper_trim",
       [](RunConfig& c, const auto& k, const auto& v) { c.explain.upper_trim = parse_double_value(k, v); }},
      {"explain.max_rows", [](RunConfig& c, const auto& k, const auto& v) { c.explain.max_rows = as_size(k, v); }},
      {"explain.pin", [](RunConfig& c, const auto&, const auto& v) { c.explain.conditional_pins.push_back(v); }},
      {"explain.subgroup", [](RunConfig& c, const auto&, const auto& v) { c.explain.subgroup = v; }},
      {"eventstudy.quantiles",
       [](RunConfig& c, const auto& k, const auto& v) { c.event_study.quantiles = as_size(k, v); }},
      {"eventstudy.pre_years",
       [](RunConfig& c, const auto& k, const auto& v) {
         c.event_study.pre_years = static_cast<int>(parse_uint_value(k, v));
       }},
      {"eventstudy.post_years",
       [](RunConfig& c, const auto& k, const auto& v) {
         c.event_study.post_years = static_cast<int>(parse_uint_value(k, v));
       }},
      {"robustness.targets",
       [](RunConfig& c, const auto& k, const auto& v) {
         c.robustness_targets.clear();
         for (const auto& name : string_list(k, v)) {
           try {
             c.robustness_targets.push_back(firm_target_from_string(name));
           } catch (const ValidationError& e) {
             throw ConfigInvalid(k, e.what());
           }
         }
       }},
      {"decompose.write_xi", [](RunConfig& c, const auto& k, const auto& v) { c.write_xi = parse_bool_value(k, v); }},
  };
  return s;
}

bool repeatable(const std::string& key) { return key == "column" || key == "explain.pin"; }

}  // namespace

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

RunConfig RunConfig::from_key_values(const KeyValues& kv) {
  RunConfig c;
  KeyValues synthetic;
  std::ostringstream canon;
  for (const auto& [key, value] : kv) {
    if (!repeatable(key) && kv.count(key) > 1) throw ConfigInvalid(key, "given more than once");
    if (key != "out" && key != "seed") canon << key << " = " << value << '\n';
    if (key.rfind("synthetic.", 0) == 0) {
      const std::string field = key.substr(10);
      if (field == "seed") throw ConfigInvalid(key, "the simulation seed is derived from the master seed");
      synthetic.emplace(field, value);
      continue;
    }
    auto it = setters().find(key);
    if (it == setters().end()) throw ConfigInvalid(key, "unknown key");
    it->second(c, key, value);
  }
  try {
    c.synthetic = SyntheticSpec::from_key_values(synthetic);
  } catch (const ConfigInvalid& e) {
    throw ConfigInvalid("synthetic." + e.key(), e.what());
  }
  c.canonical_text = canon.str();
  c.validate();
  c.finalize();
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  if (!fs::exists(path)) throw ConfigInvalid("--config", "file '" + path + "' does not exist");
  return from_key_values(read_key_value_file(path));
}

void RunConfig::validate() const {
  if (out_dir.empty()) throw ConfigInvalid("out", "must not be empty");
  if (!input.empty() && columns.empty()) throw ConfigInvalid("column", "an input file needs its columns declared");
  if (input.empty() && !columns.empty()) throw ConfigInvalid("column", "columns are declared but there is no input");
  if (B < 2) throw ConfigInvalid("B", "must be at least 2");
  if (K_grid.empty()) throw ConfigInvalid("K_grid", "must not be empty");
  if (L_grid.empty()) throw ConfigInvalid("L_grid", "must not be empty");
  for (auto k : K_grid)
    if (k < 1) throw ConfigInvalid("K_grid", "entries must be at least 1");
  for (auto l : L_grid)
    if (l < 1) throw ConfigInvalid("L_grid", "entries must be at least 1");
  if (K.has_value() != L.has_value()) throw ConfigInvalid(K ? "L" : "K", "K and L must be given together");
  if (K && (*K < 1 || *L < 1)) throw ConfigInvalid("K", "K and L must be at least 1");
  if (!(holdout_firm_fraction > 0 && holdout_firm_fraction < 1))
    throw ConfigInvalid("holdout.firm_fraction", "must lie in (0, 1)");
  if (!(holdout_worker_fraction > 0 && holdout_worker_fraction <= 1))
    throw ConfigInvalid("holdout.worker_fraction", "must lie in (0, 1]");
  try {
    boost.validate();
  } catch (const ValidationError& e) {
    throw ConfigInvalid("boost", e.what());
  }
  try {
    partition.tree.validate();
  } catch (const ValidationError& e) {
    throw ConfigInvalid("partition", e.what());
  }
  if (partition.residual_folds < 2) throw ConfigInvalid("partition.residual_folds", "must be at least 2");
  if (explain.grid_points < 2) throw ConfigInvalid("explain.grid_points", "must be at least 2");
  if (!(explain.lower_trim >= 0 && explain.lower_trim < explain.upper_trim && explain.upper_trim <= 1))
    throw ConfigInvalid("explain.lower_trim", "trims must satisfy 0 <= lower < upper <= 1");
  if (event_study.quantiles < 1) throw ConfigInvalid("eventstudy.quantiles", "must be at least 1");
  if (event_study.pre_years < 1 || event_study.post_years < 1)
    throw ConfigInvalid("eventstudy.pre_years", "spell lengths must be at least 1");
  if (robustness_targets.empty()) throw ConfigInvalid("robustness.targets", "must not be empty");
}

void RunConfig::finalize() {
  synthetic.seed = stage_seed("simulate");
  boost.seed = stage_seed("boost");
  partition.seed = stage_seed("partition");
  partition.tree.seed = partition.seed;
  partition.residual_model = boost;
  partition.residual_model.seed = stage_seed("residual");
  config_hash = fnv1a(canonical_text + "seed = " + std::to_string(seed) + "\n");
}

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names = {"simulate", "connect", "tune",       "fit",       "decompose",
                                                 "akm",      "explain", "eventstudy", "robustness"};
  return names;
}

nlohmann::json RunManifest::to_json() const {
  nlohmann::json st = nlohmann::json::object();
  for (const auto& [name, rec] : stages) {
    nlohmann::json files = nlohmann::json::array();
    for (const auto& a : rec.artifacts) files.push_back({{"file", a.file}, {"bytes", a.bytes}, {"fnv1a", a.fnv1a}});
    st[name] = {{"seed", rec.seed}, {"seconds", rec.seconds}, {"artifacts", std::move(files)}};
  }
  return {{"tool_version", tool_version}, {"config_hash", config_hash}, {"stages", std::move(st)}};
}

RunManifest RunManifest::load(const std::string& out_dir) {
  RunManifest m;
  const fs::path p = fs::path(out_dir) / "manifest.json";
  if (!fs::exists(p)) return m;
  std::ifstream in(p);
  nlohmann::json j;
  try {
    in >> j;
    m.tool_version = j.at("tool_version").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::string>();
    for (const auto& [name, rec] : j.at("stages").items()) {
      StageRecord r;
      r.seed = rec.at("seed").get<std::uint64_t>();
      r.seconds = rec.at("seconds").get<double>();
      for (const auto& a : rec.at("artifacts"))
        r.artifacts.push_back({a.at("file").get<std::string>(), a.at("bytes").get<std::uint64_t>(),
                               a.at("fnv1a").get<std::string>()});
      m.stages[name] = std::move(r);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("unreadable manifest " + p.string() + ": " + e.what());
  }
  return m;
}

void RunManifest::save(const std::string& out_dir) const {
  fs::create_directories(out_dir);
  std::ofstream out(fs::path(out_dir) / "manifest.json");
  out << to_json().dump(2) << '\n';
}

bool RunManifest::has(const std::string& out_dir, const std::string& stage) const {
  auto it = stages.find(stage);
  if (it == stages.end()) return false;
  return std::all_of(it->second.artifacts.begin(), it->second.artifacts.end(),
                     [&](const ArtifactRecord& a) { return fs::exists(fs::path(out_dir) / a.file); });
}

void RunManifest::require(const std::string& out_dir, const std::string& stage) const {
  if (!has(out_dir, stage)) throw MissingArtifact(stage);
}

}  // namespace twice
