#pragma once

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "twice/crossfit.hpp"
#include "twice/features.hpp"

namespace twice {

using Predictor = std::function<std::vector<double>(const FeatureView&)>;

// One predictor per fitted cross-fitting model.
std::vector<Predictor> predictors_of(const CrossFitResult& result);
Predictor predictor_of(const WageModel& model);

enum class CurveVariant { pdp_full, pdp_reference, pdp_conditional, ale };

const char* to_string(CurveVariant v);
CurveVariant curve_variant_from_string(std::string_view s);

// A column held fixed. Without a value it is pinned at its sample median
// (numeric) or mode (categorical).
struct Pin {
  std::string column;
  std::optional<double> value;
};

struct CurveSpec {
  std::string feature;
  std::size_t grid_points = 40;
  double lower_trim = 0.10;
  double upper_trim = 0.90;
  CurveVariant variant = CurveVariant::pdp_full;
  // Reference variant: the subgroup columns and their values; every other
  // non-focal column is set to its median or mode.
  // Conditional variant: columns fixed while the rest keep observed values.
  std::vector<Pin> pins;
  // Evaluate on at most this many evenly spaced rows; 0 uses all rows.
  std::size_t max_rows = 0;
  // Empty picks "log" for tenure and "linear" otherwise.
  std::string axis_hint;

  void validate() const;
};

struct Curve {
  std::string feature;
  std::string variant;  // includes the subgroup for reference curves
  std::string axis_hint;
  std::vector<double> grid;
  std::vector<double> value;
  std::vector<std::size_t> support;
};

// Median for numeric columns, mode (smallest code on ties) for categoricals.
double baseline_value(const FeatureView& x, std::size_t column);

Curve pdp(std::span<const Predictor> models, const FeatureView& x, const CurveSpec& spec);
Curve ale(std::span<const Predictor> models, const FeatureView& x, const CurveSpec& spec);
// Dispatches on spec.variant.
Curve compute_curve(std::span<const Predictor> models, const FeatureView& x, const CurveSpec& spec);

void write_curves_csv(std::span<const Curve> curves, std::ostream& out);

}  // namespace twice
