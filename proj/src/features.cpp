#include "twice/features.hpp"

#include "twice/error.hpp"

namespace twice {

const char* to_string(FeatureKind kind) {
  return kind == FeatureKind::numeric ? "numeric" : "categorical";
}

FeatureKind feature_kind_from_string(std::string_view s) {
  if (s == "numeric") return FeatureKind::numeric;
  if (s == "categorical") return FeatureKind::categorical;
  throw InvalidArgument("unknown feature kind '" + std::string(s) + "'");
}

std::size_t FeatureView::index_of(std::string_view name) const {
  for (std::size_t j = 0; j < info.size(); ++j) {
    if (info[j].name == name) return j;
  }
  throw UnknownFeature("unknown feature '" + std::string(name) + "'");
}

bool FeatureView::contains(std::string_view name) const {
  for (const auto& f : info) {
    if (f.name == name) return true;
  }
  return false;
}

FeatureView FeatureView::select(std::span<const std::string> names) const {
  FeatureView out;
  out.rows = rows;
  for (const auto& name : names) {
    std::size_t j = info.size();
    for (std::size_t k = 0; k < info.size(); ++k) {
      if (info[k].name == name) {
        j = k;
        break;
      }
    }
    if (j == info.size()) throw SchemaMismatch("feature '" + name + "' not present in input");
    out.info.push_back(info[j]);
    out.columns.push_back(columns[j]);
  }
  return out;
}

void FeatureView::append(FeatureInfo feature, std::span<const double> column) {
  if (column.size() != rows) throw LengthMismatch("feature column length differs from row count");
  info.push_back(std::move(feature));
  columns.push_back(column);
}

std::vector<std::string> FeatureView::names() const {
  std::vector<std::string> out;
  out.reserve(info.size());
  for (const auto& f : info) out.push_back(f.name);
  return out;
}

void FeatureTable::add(FeatureInfo feature, std::vector<double> column) {
  if (info_.empty() && columns_.empty() && rows_ == 0) rows_ = column.size();
  if (column.size() != rows_) throw LengthMismatch("feature column length differs from row count");
  info_.push_back(std::move(feature));
  columns_.push_back(std::move(column));
}

FeatureView FeatureTable::view() const {
  FeatureView v;
  v.rows = rows_;
  v.info = info_;
  for (const auto& c : columns_) v.columns.emplace_back(c);
  return v;
}

FeatureTable take_rows(const FeatureView& x, std::span<const std::uint32_t> rows) {
  FeatureTable t(rows.size());
  for (std::size_t j = 0; j < x.size(); ++j) {
    std::vector<double> col(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) col[i] = x.columns[j][rows[i]];
    t.add(x.info[j], std::move(col));
  }
  return t;
}

}  // namespace twice
