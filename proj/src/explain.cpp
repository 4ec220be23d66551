#include "twice/explain.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>

#include "twice/error.hpp"
#include "twice/util.hpp"

namespace twice {

std::vector<Predictor> predictors_of(const CrossFitResult& result) {
  std::vector<Predictor> out;
  for (const auto& m : result.models)
    if (m) out.push_back(predictor_of(*m));
  return out;
}

Predictor predictor_of(const WageModel& model) {
  return [&model](const FeatureView& x) { return model.predict(x); };
}

const char* to_string(CurveVariant v) {
  switch (v) {
    case CurveVariant::pdp_full: return "pdp_full";
    case CurveVariant::pdp_reference: return "pdp_reference";
    case CurveVariant::pdp_conditional: return "pdp_conditional";
    case CurveVariant::ale: return "ale";
  }
  return "?";
}

CurveVariant curve_variant_from_string(std::string_view s) {
  if (s == "pdp_full" || s == "pdp") return CurveVariant::pdp_full;
  if (s == "pdp_reference") return CurveVariant::pdp_reference;
  if (s == "pdp_conditional") return CurveVariant::pdp_conditional;
  if (s == "ale") return CurveVariant::ale;
  throw InvalidArgument("unknown curve variant '" + std::string(s) + "'");
}

void CurveSpec::validate() const {
  if (feature.empty()) throw InvalidArgument("curve needs a focal feature");
  if (grid_points < 2) throw InvalidArgument("curve grid needs at least 2 points");
  if (!(lower_trim >= 0.0 && lower_trim < upper_trim && upper_trim <= 1.0))
    throw InvalidArgument("trim quantiles must satisfy 0 <= lower < upper <= 1");
  if (!pins.empty() && (variant == CurveVariant::pdp_full || variant == CurveVariant::ale))
    throw InvalidArgument(std::string("pinned columns are not used by the ") + to_string(variant) + " variant");
  for (const auto& p : pins)
    if (p.column == feature) throw InvalidArgument("the focal feature cannot be pinned");
}

double baseline_value(const FeatureView& x, std::size_t column) {
  const auto col = x.columns.at(column);
  if (col.empty()) throw EmptyInput("baseline of an empty column");
  if (x.info[column].kind == FeatureKind::numeric) return median(std::vector<double>(col.begin(), col.end()));
  std::map<double, std::size_t> counts;
  for (double v : col) ++counts[v];
  double best = counts.begin()->first;
  std::size_t best_n = 0;
  for (const auto& [v, n] : counts) {
    if (n > best_n) {
      best = v;
      best_n = n;
    }
  }
  return best;
}

namespace {

std::vector<std::uint32_t> evaluation_rows(std::size_t n, std::size_t max_rows) {
  std::vector<std::uint32_t> rows;
  if (max_rows == 0 || n <= max_rows) {
    rows.resize(n);
    for (std::size_t r = 0; r < n; ++r) rows[r] = static_cast<std::uint32_t>(r);
    return rows;
  }
  for (std::size_t i = 0; i < max_rows; ++i) rows.push_back(static_cast<std::uint32_t>(i * n / max_rows));
  return rows;
}

std::string axis_hint_for(const CurveSpec& spec) {
  if (!spec.axis_hint.empty()) return spec.axis_hint;
  return spec.feature == "tenure" ? "log" : "linear";
}

std::vector<double> sorted_column(std::span<const double> col) {
  std::vector<double> v(col.begin(), col.end());
  std::sort(v.begin(), v.end());
  return v;
}

// Inverse empirical CDF: the smallest value with F(v) >= p. Grid points are
// observed values and do not move when the sample is duplicated.
double ecdf_quantile(const std::vector<double>& sorted, double p) {
  const double h = std::ceil(p * static_cast<double>(sorted.size()));
  const auto k = static_cast<std::size_t>(std::max(h, 1.0)) - 1;
  return sorted[std::min(k, sorted.size() - 1)];
}

// Deduplicated quantiles at G evenly spaced levels between the trims.
std::vector<double> trimmed_quantiles(const std::vector<double>& sorted, const CurveSpec& spec) {
  std::vector<double> q;
  const std::size_t G = spec.grid_points;
  for (std::size_t g = 0; g < G; ++g) {
    const double p = spec.lower_trim + (spec.upper_trim - spec.lower_trim) * static_cast<double>(g) /
                                           static_cast<double>(G - 1);
    q.push_back(ecdf_quantile(sorted, p));
  }
  q.erase(std::unique(q.begin(), q.end()), q.end());
  return q;
}

// Mean over rows, then over models.
double average_prediction(std::span<const Predictor> models, const FeatureView& x) {
  double total = 0.0;
  for (const auto& m : models) {
    const auto p = m(x);
    double s = 0.0;
    for (double v : p) s += v;
    total += s / static_cast<double>(p.size());
  }
  return total / static_cast<double>(models.size());
}

}  // namespace

Curve pdp(std::span<const Predictor> models, const FeatureView& x, const CurveSpec& spec) {
  spec.validate();
  if (models.empty()) throw InvalidArgument("pdp needs at least one model");
  const std::size_t focal = x.index_of(spec.feature);
  const bool categorical = x.info[focal].kind == FeatureKind::categorical;

  Curve curve;
  curve.feature = spec.feature;
  curve.variant = to_string(spec.variant);
  curve.axis_hint = axis_hint_for(spec);

  const auto sorted = sorted_column(x.columns[focal]);
  if (sorted.empty()) throw EmptyGrid("pdp: no rows");
  if (categorical) {
    curve.grid = sorted;
    curve.grid.erase(std::unique(curve.grid.begin(), curve.grid.end()), curve.grid.end());
    for (double g : curve.grid)
      curve.support.push_back(static_cast<std::size_t>(std::upper_bound(sorted.begin(), sorted.end(), g) -
                                                       std::lower_bound(sorted.begin(), sorted.end(), g)));
  } else {
    curve.grid = trimmed_quantiles(sorted, spec);
    if (curve.grid.size() < 2)
      throw EmptyGrid("pdp grid for '" + spec.feature + "' has fewer than 2 distinct points after trimming");
    // Rows nearest to each grid point, split at the midpoints.
    for (std::size_t g = 0; g < curve.grid.size(); ++g) {
      auto lo = g == 0 ? sorted.begin()
                       : std::lower_bound(sorted.begin(), sorted.end(), 0.5 * (curve.grid[g - 1] + curve.grid[g]));
      auto hi = g + 1 == curve.grid.size()
                    ? sorted.end()
                    : std::lower_bound(sorted.begin(), sorted.end(), 0.5 * (curve.grid[g] + curve.grid[g + 1]));
      curve.support.push_back(static_cast<std::size_t>(hi - lo));
    }
  }

  FeatureTable base = take_rows(x, evaluation_rows(x.rows, spec.max_rows));
  if (spec.variant == CurveVariant::pdp_reference || spec.variant == CurveVariant::pdp_conditional) {
    std::vector<bool> pinned(x.size(), false);
    for (const auto& p : spec.pins) {
      const std::size_t c = x.index_of(p.column);
      pinned[c] = true;
      const double v = p.value ? *p.value : baseline_value(x, c);
      std::fill(base.column(c).begin(), base.column(c).end(), v);
    }
    if (spec.variant == CurveVariant::pdp_reference) {
      for (std::size_t c = 0; c < x.size(); ++c) {
        if (c == focal || pinned[c]) continue;
        const double v = baseline_value(x, c);
        std::fill(base.column(c).begin(), base.column(c).end(), v);
      }
      std::string label;
      for (const auto& p : spec.pins) {
        label += label.empty() ? ":" : ";";
        label += p.column + "=" + format_double(p.value ? *p.value : baseline_value(x, x.index_of(p.column)));
      }
      curve.variant += label;
    }
  }

  curve.value.assign(curve.grid.size(), 0.0);
  parallel_for(curve.grid.size(), [&](std::size_t g) {
    FeatureTable t = base;
    std::fill(t.column(focal).begin(), t.column(focal).end(), curve.grid[g]);
    curve.value[g] = average_prediction(models, t.view());
  });
  return curve;
}

Curve ale(std::span<const Predictor> models, const FeatureView& x, const CurveSpec& spec) {
  spec.validate();
  if (models.empty()) throw InvalidArgument("ale needs at least one model");
  const std::size_t focal = x.index_of(spec.feature);
  if (x.info[focal].kind != FeatureKind::numeric)
    throw InvalidArgument("ale needs a numeric focal feature; '" + spec.feature + "' is categorical");

  const auto rows = evaluation_rows(x.rows, spec.max_rows);
  std::vector<double> focal_values;
  for (auto r : rows) focal_values.push_back(x.columns[focal][r]);
  std::vector<double> sorted = focal_values;
  std::sort(sorted.begin(), sorted.end());
  if (sorted.empty()) throw DegenerateSupport("ale: no rows");
  std::vector<double> edges = trimmed_quantiles(sorted, spec);
  if (edges.size() < 2)
    throw DegenerateSupport("ale: '" + spec.feature + "' has fewer than 2 distinct values in the trimmed range");

  // Bin k (1-based) holds values in (z[k-1], z[k]]; the first bin also takes z[0].
  auto bin_of = [&](double v) -> std::size_t {
    if (v < edges.front() || v > edges.back()) return 0;
    const auto k = static_cast<std::size_t>(std::lower_bound(edges.begin(), edges.end(), v) - edges.begin());
    return std::max<std::size_t>(k, 1);
  };
  // Merge empty bins into the next one (the last into the previous).
  for (bool changed = true; changed;) {
    changed = false;
    std::vector<std::size_t> count(edges.size(), 0);
    for (double v : focal_values) ++count[bin_of(v)];
    for (std::size_t k = 1; k < edges.size(); ++k) {
      if (count[k] > 0) continue;
      if (edges.size() <= 2) throw DegenerateSupport("ale: no rows inside the trimmed range");
      edges.erase(edges.begin() + static_cast<std::ptrdiff_t>(k + 1 < edges.size() ? k : k - 1));
      changed = true;
      break;
    }
  }

  std::vector<std::uint32_t> used;
  std::vector<std::size_t> bin;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto k = bin_of(focal_values[i]);
    if (k == 0) continue;
    used.push_back(rows[i]);
    bin.push_back(k);
  }
  FeatureTable lo = take_rows(x, used), hi = take_rows(x, used);
  for (std::size_t i = 0; i < used.size(); ++i) {
    lo.column(focal)[i] = edges[bin[i] - 1];
    hi.column(focal)[i] = edges[bin[i]];
  }
  const std::size_t K = edges.size() - 1;
  std::vector<double> diff_sum(K + 1, 0.0);
  std::vector<std::size_t> count(K + 1, 0);
  for (auto k : bin) ++count[k];
  for (const auto& m : models) {
    const auto plo = m(lo.view()), phi = m(hi.view());
    for (std::size_t i = 0; i < used.size(); ++i) diff_sum[bin[i]] += phi[i] - plo[i];
  }
  Curve curve;
  curve.feature = spec.feature;
  curve.variant = to_string(CurveVariant::ale);
  curve.axis_hint = axis_hint_for(spec);
  curve.grid = edges;
  curve.value.assign(K + 1, 0.0);
  curve.support.assign(K + 1, 0);
  for (std::size_t k = 1; k <= K; ++k) {
    const double effect = diff_sum[k] / (static_cast<double>(count[k]) * static_cast<double>(models.size()));
    curve.value[k] = curve.value[k - 1] + effect;
    curve.support[k] = count[k];
  }
  double centre = 0.0;
  for (std::size_t k = 1; k <= K; ++k) centre += static_cast<double>(count[k]) * curve.value[k];
  centre /= static_cast<double>(used.size());
  for (auto& v : curve.value) v -= centre;
  return curve;
}

Curve compute_curve(std::span<const Predictor> models, const FeatureView& x, const CurveSpec& spec) {
  return spec.variant == CurveVariant::ale ? ale(models, x, spec) : pdp(models, x, spec);
}

void write_curves_csv(std::span<const Curve> curves, std::ostream& out) {
  out << "grid,value,support,variant,feature,axis_hint\n";
  for (const auto& c : curves) {
    for (std::size_t g = 0; g < c.grid.size(); ++g) {
      out << format_double(c.grid[g]) << ',' << format_double(c.value[g]) << ',' << c.support[g] << ','
          << csv_field(c.variant) << ',' << csv_field(c.feature) << ',' << c.axis_hint << '\n';
    }
  }
}

}  // namespace twice
