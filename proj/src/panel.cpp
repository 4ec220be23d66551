#include "twice/panel.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <set>

#include "twice/error.hpp"
#include "twice/util.hpp"

namespace twice {

const char* to_string(ColumnSide side) { return side == ColumnSide::worker ? "worker" : "firm"; }

ColumnSide column_side_from_string(std::string_view s) {
  if (s == "worker") return ColumnSide::worker;
  if (s == "firm") return ColumnSide::firm;
  throw InvalidArgument("unknown column side '" + std::string(s) + "'");
}

namespace {
bool reserved_name(std::string_view n) {
  return n == "worker_id" || n == "firm_id" || n == "year" || n == "log_wage";
}
}  // namespace

ColumnSchema::ColumnSchema(std::vector<Column> columns) : columns_(std::move(columns)) {
  std::set<std::string> seen;
  for (const auto& c : columns_) {
    if (c.name.empty()) throw SchemaMismatch("column with empty name");
    if (reserved_name(c.name)) throw SchemaMismatch("column name '" + c.name + "' is reserved");
    if (!seen.insert(c.name).second) throw SchemaMismatch("duplicate column '" + c.name + "'");
  }
  levels_.resize(columns_.size());
  codes_.resize(columns_.size());
}

std::optional<std::size_t> ColumnSchema::find(std::string_view name) const {
  for (std::size_t j = 0; j < columns_.size(); ++j) {
    if (columns_[j].name == name) return j;
  }
  return std::nullopt;
}

std::size_t ColumnSchema::index_of(std::string_view name) const {
  if (auto j = find(name)) return *j;
  throw SchemaMismatch("column '" + std::string(name) + "' not in schema");
}

std::vector<std::size_t> ColumnSchema::side_columns(ColumnSide side) const {
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < columns_.size(); ++j) {
    if (columns_[j].side == side) out.push_back(j);
  }
  return out;
}

std::uint32_t ColumnSchema::intern(std::size_t col, std::string_view level) {
  auto& codes = codes_.at(col);
  std::string key(level);
  if (auto it = codes.find(key); it != codes.end()) return it->second;
  const Column& c = columns_[col];
  if (c.kind != FeatureKind::categorical) {
    throw SchemaMismatch("column '" + c.name + "' is not categorical");
  }
  if (c.cardinality > 0 && levels_[col].size() >= c.cardinality) {
    throw SchemaMismatch("column '" + c.name + "' exceeds its declared cardinality " +
                         std::to_string(c.cardinality));
  }
  auto code = static_cast<std::uint32_t>(levels_[col].size());
  levels_[col].push_back(key);
  codes.emplace(std::move(key), code);
  return code;
}

std::optional<std::uint32_t> ColumnSchema::code_of(std::size_t col, std::string_view level) const {
  const auto& codes = codes_.at(col);
  if (auto it = codes.find(std::string(level)); it != codes.end()) return it->second;
  return std::nullopt;
}

const std::string& ColumnSchema::level_name(std::size_t col, std::uint32_t code) const {
  return levels_.at(col).at(code);
}

nlohmann::json ColumnSchema::to_json() const {
  nlohmann::json cols = nlohmann::json::array();
  for (std::size_t j = 0; j < columns_.size(); ++j) {
    const Column& c = columns_[j];
    nlohmann::json e = {{"name", c.name}, {"kind", to_string(c.kind)}, {"side", to_string(c.side)}};
    if (c.kind == FeatureKind::categorical) {
      e["cardinality"] = c.cardinality;
      e["levels"] = levels_[j];
    }
    cols.push_back(std::move(e));
  }
  return {{"columns", std::move(cols)}};
}

ColumnSchema ColumnSchema::from_json(const nlohmann::json& j) {
  std::vector<Column> cols;
  for (const auto& e : j.at("columns")) {
    Column c;
    c.name = e.at("name").get<std::string>();
    c.kind = feature_kind_from_string(e.at("kind").get<std::string>());
    c.side = column_side_from_string(e.at("side").get<std::string>());
    if (e.contains("cardinality")) c.cardinality = e.at("cardinality").get<std::size_t>();
    cols.push_back(std::move(c));
  }
  ColumnSchema s(std::move(cols));
  std::size_t k = 0;
  for (const auto& e : j.at("columns")) {
    if (e.contains("levels")) {
      for (const auto& lv : e.at("levels")) s.intern(k, lv.get<std::string>());
    }
    ++k;
  }
  return s;
}

std::optional<std::uint32_t> Panel::find_worker(std::string_view id) const {
  if (auto it = worker_lookup_.find(std::string(id)); it != worker_lookup_.end()) return it->second;
  return std::nullopt;
}

std::optional<std::uint32_t> Panel::find_firm(std::string_view id) const {
  if (auto it = firm_lookup_.find(std::string(id)); it != firm_lookup_.end()) return it->second;
  return std::nullopt;
}

Observation Panel::observation(std::size_t row) const {
  Observation o;
  o.worker_id = worker_names_[workers_[row]];
  o.firm_id = firm_names_[firms_[row]];
  o.year = years_[row];
  o.log_wage = wages_[row];
  for (std::size_t j = 0; j < schema_.size(); ++j) {
    if (schema_.column(j).side == ColumnSide::worker) {
      o.worker_covariates.push_back(covariates_[j][row]);
    } else {
      o.firm_covariates.push_back(covariates_[j][row]);
    }
  }
  return o;
}

void Panel::build_indexes() {
  worker_rows_.assign(worker_names_.size(), {});
  firm_rows_.assign(firm_names_.size(), {});
  for (std::size_t r = 0; r < wages_.size(); ++r) {
    worker_rows_[workers_[r]].push_back(static_cast<std::uint32_t>(r));
    firm_rows_[firms_[r]].push_back(static_cast<std::uint32_t>(r));
  }
  year_values_.assign(years_.begin(), years_.end());
}

Panel Panel::select(std::span<const std::size_t> rows) const {
  Panel out;
  out.schema_ = schema_;
  out.covariates_.assign(schema_.size(), {});
  std::vector<std::uint32_t> wmap(worker_names_.size(), UINT32_MAX);
  std::vector<std::uint32_t> fmap(firm_names_.size(), UINT32_MAX);
  out.workers_.reserve(rows.size());
  out.firms_.reserve(rows.size());
  out.years_.reserve(rows.size());
  out.wages_.reserve(rows.size());
  for (auto& c : out.covariates_) c.reserve(rows.size());
  for (std::size_t r : rows) {
    if (r >= size()) throw InvalidArgument("select: row index out of range");
    const std::uint32_t w = workers_[r], f = firms_[r];
    if (wmap[w] == UINT32_MAX) {
      wmap[w] = static_cast<std::uint32_t>(out.worker_names_.size());
      out.worker_names_.push_back(worker_names_[w]);
      out.worker_lookup_.emplace(worker_names_[w], wmap[w]);
    }
    if (fmap[f] == UINT32_MAX) {
      fmap[f] = static_cast<std::uint32_t>(out.firm_names_.size());
      out.firm_names_.push_back(firm_names_[f]);
      out.firm_lookup_.emplace(firm_names_[f], fmap[f]);
    }
    out.workers_.push_back(wmap[w]);
    out.firms_.push_back(fmap[f]);
    out.years_.push_back(years_[r]);
    out.wages_.push_back(wages_[r]);
    for (std::size_t j = 0; j < covariates_.size(); ++j) out.covariates_[j].push_back(covariates_[j][r]);
  }
  out.build_indexes();
  return out;
}

std::vector<std::size_t> Panel::canonical_order() const {
  std::vector<std::uint32_t> by_name(worker_names_.size());
  std::iota(by_name.begin(), by_name.end(), 0U);
  std::sort(by_name.begin(), by_name.end(),
            [&](std::uint32_t a, std::uint32_t b) { return worker_names_[a] < worker_names_[b]; });
  std::vector<std::uint32_t> rank(worker_names_.size());
  for (std::size_t i = 0; i < by_name.size(); ++i) rank[by_name[i]] = static_cast<std::uint32_t>(i);
  std::vector<std::size_t> order(size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (rank[workers_[a]] != rank[workers_[b]]) return rank[workers_[a]] < rank[workers_[b]];
    return years_[a] < years_[b];
  });
  return order;
}

FeatureView Panel::base_features() const {
  FeatureView v;
  v.rows = size();
  for (std::size_t j = 0; j < schema_.size(); ++j) {
    const Column& c = schema_.column(j);
    FeatureInfo fi{c.name, c.kind, c.kind == FeatureKind::categorical ? schema_.level_count(j) : 0U};
    v.info.push_back(std::move(fi));
    v.columns.emplace_back(covariates_[j]);
  }
  v.info.push_back({kYearFeature, FeatureKind::numeric, 0});
  v.columns.emplace_back(year_values_);
  return v;
}

PanelBuilder::PanelBuilder(ColumnSchema schema) {
  panel_.schema_ = std::move(schema);
  panel_.covariates_.assign(panel_.schema_.size(), {});
  worker_cols_ = panel_.schema_.side_columns(ColumnSide::worker);
  firm_cols_ = panel_.schema_.side_columns(ColumnSide::firm);
}

std::uint32_t PanelBuilder::intern_worker(std::string_view id) {
  auto [it, inserted] = panel_.worker_lookup_.emplace(std::string(id), 0U);
  if (inserted) {
    it->second = static_cast<std::uint32_t>(panel_.worker_names_.size());
    panel_.worker_names_.emplace_back(id);
  }
  return it->second;
}

std::uint32_t PanelBuilder::intern_firm(std::string_view id) {
  auto [it, inserted] = panel_.firm_lookup_.emplace(std::string(id), 0U);
  if (inserted) {
    it->second = static_cast<std::uint32_t>(panel_.firm_names_.size());
    panel_.firm_names_.emplace_back(id);
  }
  return it->second;
}

void PanelBuilder::add(std::string_view worker_id, std::string_view firm_id, int year, double log_wage,
                       std::span<const double> covariates) {
  const ColumnSchema& s = panel_.schema_;
  if (covariates.size() != s.size()) {
    throw SchemaMismatch("observation has " + std::to_string(covariates.size()) +
                         " covariates, schema declares " + std::to_string(s.size()));
  }
  if (!std::isfinite(log_wage)) throw InvalidArgument("non-finite log wage");
  for (std::size_t j = 0; j < s.size(); ++j) {
    const double v = covariates[j];
    if (!std::isfinite(v)) throw InvalidArgument("non-finite value in column '" + s.column(j).name + "'");
    if (s.column(j).kind == FeatureKind::categorical) {
      if (v < 0 || v != std::floor(v) || v >= s.level_count(j)) {
        throw SchemaMismatch("category code out of range in column '" + s.column(j).name + "'");
      }
    }
  }
  const std::uint32_t w = intern_worker(worker_id);
  const std::uint64_t key = (static_cast<std::uint64_t>(w) << 32) | static_cast<std::uint32_t>(year);
  if (!seen_worker_year_.insert(key).second) throw DuplicateWorkerYear(std::string(worker_id), year);
  const std::uint32_t f = intern_firm(firm_id);
  panel_.workers_.push_back(w);
  panel_.firms_.push_back(f);
  panel_.years_.push_back(year);
  panel_.wages_.push_back(log_wage);
  for (std::size_t j = 0; j < s.size(); ++j) panel_.covariates_[j].push_back(covariates[j]);
}

void PanelBuilder::add(const Observation& obs) {
  if (obs.worker_covariates.size() != worker_cols_.size() ||
      obs.firm_covariates.size() != firm_cols_.size()) {
    throw SchemaMismatch("observation covariate arity differs from schema");
  }
  std::vector<double> cov(panel_.schema_.size());
  for (std::size_t i = 0; i < worker_cols_.size(); ++i) cov[worker_cols_[i]] = obs.worker_covariates[i];
  for (std::size_t i = 0; i < firm_cols_.size(); ++i) cov[firm_cols_[i]] = obs.firm_covariates[i];
  add(obs.worker_id, obs.firm_id, obs.year, obs.log_wage, cov);
}

Panel PanelBuilder::build() && {
  panel_.build_indexes();
  return std::move(panel_);
}

namespace {

template <class T>
bool parse_number(const std::string& field, T& out) {
  std::string t = trim(field);
  if (t.empty()) return false;
  const char* b = t.data();
  const char* e = t.data() + t.size();
  if (*b == '+') ++b;
  auto res = std::from_chars(b, e, out);
  return res.ec == std::errc() && res.ptr == e;
}

}  // namespace

Panel ingest_csv(std::istream& in, ColumnSchema schema) {
  std::string line;
  if (!std::getline(in, line)) throw SchemaMismatch("input has no header row");
  const auto header = split_csv_line(line, 1);
  static const char* fixed[] = {"worker_id", "firm_id", "year", "log_wage"};
  if (header.size() < 4) throw SchemaMismatch("header must start with worker_id, firm_id, year, log_wage");
  for (std::size_t i = 0; i < 4; ++i) {
    if (trim(header[i]) != fixed[i]) {
      throw SchemaMismatch("header column " + std::to_string(i + 1) + " must be '" + fixed[i] + "'");
    }
  }
  // Map each covariate column of the file to its schema position.
  std::vector<std::size_t> target(header.size(), 0);
  std::vector<bool> present(schema.size(), false);
  for (std::size_t i = 4; i < header.size(); ++i) {
    const std::string name = trim(header[i]);
    auto j = schema.find(name);
    if (!j) throw SchemaMismatch("header column '" + name + "' is not declared in the schema");
    if (present[*j]) throw SchemaMismatch("header repeats column '" + name + "'");
    present[*j] = true;
    target[i] = *j;
  }
  for (std::size_t j = 0; j < schema.size(); ++j) {
    if (!present[j]) throw SchemaMismatch("declared column '" + schema.column(j).name + "' missing from header");
  }

  PanelBuilder builder(std::move(schema));
  std::vector<double> cov(builder.schema().size());
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto fields = split_csv_line(line, line_no);
    if (fields.size() != header.size()) {
      throw MalformedRow(line_no, "expected " + std::to_string(header.size()) + " fields, found " +
                                      std::to_string(fields.size()));
    }
    const std::string worker = trim(fields[0]);
    const std::string firm = trim(fields[1]);
    if (worker.empty()) throw MalformedRow(line_no, "empty worker_id");
    if (firm.empty()) throw MalformedRow(line_no, "empty firm_id");
    int year = 0;
    if (!parse_number(fields[2], year)) throw MalformedRow(line_no, "year is not an integer");
    double wage = 0;
    if (!parse_number(fields[3], wage) || !std::isfinite(wage)) {
      throw MalformedRow(line_no, "log_wage is not a finite number");
    }
    for (std::size_t i = 4; i < fields.size(); ++i) {
      const std::size_t j = target[i];
      const Column& c = builder.schema().column(j);
      if (c.kind == FeatureKind::categorical) {
        if (fields[i].empty()) throw MalformedRow(line_no, "missing value in column '" + c.name + "'");
        try {
          cov[j] = builder.schema().intern(j, fields[i]);
        } catch (const SchemaMismatch& e) {
          throw MalformedRow(line_no, e.what());
        }
      } else {
        double v = 0;
        if (!parse_number(fields[i], v) || !std::isfinite(v)) {
          throw MalformedRow(line_no, "column '" + c.name + "' is not a finite number");
        }
        cov[j] = v;
      }
    }
    builder.add(worker, firm, year, wage, cov);
  }
  return std::move(builder).build();
}

Panel ingest_csv(const std::string& path, ColumnSchema schema) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open input file '" + path + "'");
  return ingest_csv(in, std::move(schema));
}

void emit_csv(const Panel& panel, std::ostream& out) {
  const ColumnSchema& s = panel.schema();
  out << "worker_id,firm_id,year,log_wage";
  for (const auto& c : s.columns()) out << ',' << csv_field(c.name);
  out << '\n';
  std::string line;
  for (std::size_t r = 0; r < panel.size(); ++r) {
    line.clear();
    line += csv_field(panel.worker_name(panel.worker(r)));
    line += ',';
    line += csv_field(panel.firm_name(panel.firm(r)));
    line += ',';
    line += std::to_string(panel.year(r));
    line += ',';
    line += format_double(panel.log_wage(r));
    for (std::size_t j = 0; j < s.size(); ++j) {
      line += ',';
      const double v = panel.covariate(r, j);
      if (s.column(j).kind == FeatureKind::categorical) {
        line += csv_quote(s.level_name(j, static_cast<std::uint32_t>(v)));
      } else {
        line += format_double(v);
      }
    }
    line += '\n';
    out << line;
  }
}

void emit_csv(const Panel& panel, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidArgument("cannot write '" + path + "'");
  emit_csv(panel, out);
}

HoldoutSplit holdout_split(const Panel& panel, double firm_fraction, double worker_fraction,
                           std::uint64_t seed) {
  if (panel.empty()) throw EmptyInput("holdout_split: empty panel");
  if (!(firm_fraction > 0.0 && firm_fraction < 1.0)) throw InvalidArgument("firm_fraction must be in (0,1)");
  if (!(worker_fraction > 0.0 && worker_fraction <= 1.0)) {
    throw InvalidArgument("worker_fraction must be in (0,1]");
  }
  Rng rng(seed);
  // Ids are ordered by name before shuffling so the split does not depend on row order.
  std::vector<std::uint32_t> firms(panel.firm_count());
  std::iota(firms.begin(), firms.end(), 0U);
  std::sort(firms.begin(), firms.end(),
            [&](std::uint32_t a, std::uint32_t b) { return panel.firm_name(a) < panel.firm_name(b); });
  rng.shuffle(firms);
  const auto n_out = static_cast<std::size_t>(
      std::llround(firm_fraction * static_cast<double>(firms.size())));
  std::vector<bool> held(panel.firm_count(), false);
  for (std::size_t i = 0; i < std::min(n_out, firms.size()); ++i) held[firms[i]] = true;

  std::set<std::string> candidate_names;
  for (std::size_t r = 0; r < panel.size(); ++r) {
    if (held[panel.firm(r)]) candidate_names.insert(panel.worker_name(panel.worker(r)));
  }
  std::vector<std::string> candidates(candidate_names.begin(), candidate_names.end());
  rng.shuffle(candidates);
  const auto n_sampled = static_cast<std::size_t>(
      std::llround(worker_fraction * static_cast<double>(candidates.size())));
  std::vector<bool> sampled(panel.worker_count(), false);
  for (std::size_t i = 0; i < std::min(n_sampled, candidates.size()); ++i) {
    sampled[*panel.find_worker(candidates[i])] = true;
  }

  std::vector<std::size_t> train_rows, test_rows;
  for (std::size_t r = 0; r < panel.size(); ++r) {
    if (!held[panel.firm(r)]) {
      train_rows.push_back(r);
    } else if (sampled[panel.worker(r)]) {
      test_rows.push_back(r);
    }
  }
  if (train_rows.empty()) throw DegenerateSplit("holdout split leaves the training side empty");
  if (test_rows.empty()) throw DegenerateSplit("holdout split leaves the test side empty");
  return {panel.select(train_rows), panel.select(test_rows)};
}

PanelSummary summarize(const Panel& panel) {
  PanelSummary s;
  s.rows = panel.size();
  s.workers = panel.worker_count();
  s.firms = panel.firm_count();
  if (panel.empty()) return s;
  s.mean_log_wage = mean(panel.log_wages());
  struct Acc {
    std::set<std::uint32_t> firms, workers;
    std::size_t rows = 0;
    double sum = 0;
  };
  std::map<int, Acc> by_year;
  for (std::size_t r = 0; r < panel.size(); ++r) {
    Acc& a = by_year[panel.year(r)];
    a.firms.insert(panel.firm(r));
    a.workers.insert(panel.worker(r));
    ++a.rows;
    a.sum += panel.log_wage(r);
  }
  for (const auto& [year, a] : by_year) {
    s.years.push_back({year, a.firms.size(), a.workers.size(), a.rows, a.sum / static_cast<double>(a.rows)});
  }
  return s;
}

void write_summary_csv(const PanelSummary& summary, std::ostream& out) {
  out << "year,firms,workers,rows,mean_log_wage\n";
  for (const auto& y : summary.years) {
    out << y.year << ',' << y.firms << ',' << y.workers << ',' << y.rows << ',' << format_double(y.mean_log_wage)
        << '\n';
  }
}

}  // namespace twice
