#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace twice {

enum class FeatureKind : std::uint8_t { numeric, categorical };

const char* to_string(FeatureKind kind);
FeatureKind feature_kind_from_string(std::string_view s);

struct FeatureInfo {
  std::string name;
  FeatureKind kind = FeatureKind::numeric;
  // Number of known levels for categorical features. Codes at or above this
  // value are "unseen" and are routed by the trees' default branches.
  std::uint32_t cardinality = 0;
};

// Non-owning column-major view. Categorical values are integer codes stored
// as doubles.
struct FeatureView {
  std::vector<FeatureInfo> info;
  std::vector<std::span<const double>> columns;
  std::size_t rows = 0;

  std::size_t size() const noexcept { return info.size(); }
  std::size_t index_of(std::string_view name) const;  // throws UnknownFeature
  bool contains(std::string_view name) const;
  // Columns re-ordered to `names`; throws SchemaMismatch on a missing name.
  FeatureView select(std::span<const std::string> names) const;
  void append(FeatureInfo feature, std::span<const double> column);
  std::vector<std::string> names() const;
};

// Owning counterpart used when columns have to be materialised.
class FeatureTable {
 public:
  FeatureTable() = default;
  explicit FeatureTable(std::size_t rows) : rows_(rows) {}

  void add(FeatureInfo feature, std::vector<double> column);
  std::size_t rows() const noexcept { return rows_; }
  std::size_t size() const noexcept { return info_.size(); }
  std::vector<double>& column(std::size_t j) { return columns_[j]; }
  const std::vector<double>& column(std::size_t j) const { return columns_[j]; }
  const FeatureInfo& info(std::size_t j) const { return info_[j]; }
  FeatureView view() const;

 private:
  std::size_t rows_ = 0;
  std::vector<FeatureInfo> info_;
  std::vector<std::vector<double>> columns_;
};

// Copies the given rows of every column.
FeatureTable take_rows(const FeatureView& x, std::span<const std::uint32_t> rows);

}  // namespace twice
