#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace twice {

// Portable deterministic RNG. The engine output is fixed by the standard;
// the distributions below are implemented here so that draws are identical
// across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  double uniform();                       // [0, 1)
  std::uint64_t uniform_int(std::uint64_t n);  // [0, n)
  double normal();

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t derive_seed(std::uint64_t master, std::string_view stage);

// Shortest round-trip decimal representation.
std::string format_double(double x);

double normal_cdf(double x);
double normal_quantile(double p);

// TWICE_THREADS caps the worker count; defaults to hardware concurrency.
std::size_t thread_count();

// Runs body(i) for i in [0, n) on up to thread_count() threads. Each index is
// executed exactly once; callers write results into per-index slots.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

std::vector<std::string> split_csv_line(std::string_view line, std::size_t line_no);
std::string csv_quote(std::string_view field);
std::string csv_field(std::string_view field);  // quotes only when needed

// "key = value" lines, '#' comments. Repeated keys keep every value in order.
using KeyValues = std::multimap<std::string, std::string>;
KeyValues parse_key_values(std::istream& in);
KeyValues read_key_value_file(const std::string& path);

// Typed parsing of config values; failures throw ConfigInvalid(key).
double parse_double_value(const std::string& key, const std::string& value);
std::uint64_t parse_uint_value(const std::string& key, const std::string& value);
bool parse_bool_value(const std::string& key, const std::string& value);
std::vector<std::size_t> parse_size_list(const std::string& key, const std::string& value);

std::string trim(std::string_view s);
std::vector<std::string> split(std::string_view s, char sep);

// Descriptive statistics over rows (population normalisation, 1/n).
double mean(std::span<const double> x);
double variance(std::span<const double> x);
double covariance(std::span<const double> x, std::span<const double> y);
double pearson(std::span<const double> x, std::span<const double> y);
double median(std::vector<double> x);

// Linear-interpolated quantile of already sorted data (type 7).
double sorted_quantile(std::span<const double> sorted, double p);

}  // namespace twice
