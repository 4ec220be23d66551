#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "twice/akm.hpp"
#include "twice/boost.hpp"
#include "twice/explain.hpp"
#include "twice/graph.hpp"
#include "twice/panel.hpp"
#include "twice/partition.hpp"
#include "twice/synthetic.hpp"
#include "twice/util.hpp"

namespace twice {

inline constexpr const char* kToolVersion = "1.0.0";

struct ExplainSettings {
  // Empty means every numeric base feature.
  std::vector<std::string> features;
  std::vector<CurveVariant> variants{CurveVariant::pdp_full, CurveVariant::ale};
  std::size_t grid_points = 40;
  double lower_trim = 0.10;
  double upper_trim = 0.90;
  std::size_t max_rows = 2000;
  // Columns held fixed by the conditional variant, as "column" (median or
  // mode) or "column=value" (a number or a category level name).
  std::vector<std::string> conditional_pins;
  // Subgroup column of the reference variant; one curve per level
  // (categorical) or one at the median (numeric).
  std::string subgroup;
};

// Everything a pipeline run reads from its key-value config file.
struct RunConfig {
  std::string out_dir = "twice_out";
  std::uint64_t seed = 1;
  std::uint64_t config_hash = 0;
  // Sorted "key = value" lines of the config file, minus `out` and `seed`.
  std::string canonical_text;

  // CSV input with its declared columns; empty input means the simulate
  // stage supplies the panel.
  std::string input;
  std::vector<Column> columns;
  SyntheticSpec synthetic;

  std::size_t B = 5;
  std::vector<std::size_t> K_grid{4, 8, 16};
  std::vector<std::size_t> L_grid{4, 8, 16};
  std::optional<std::size_t> K;
  std::optional<std::size_t> L;
  double holdout_firm_fraction = 0.2;
  double holdout_worker_fraction = 1.0;

  PartitionConfig partition;
  BoostConfig boost;
  AkmConfig akm;
  OlsConfig ols;
  ExplainSettings explain;
  EventStudyConfig event_study;
  std::vector<FirmTargetKind> robustness_targets{FirmTargetKind::mean, FirmTargetKind::median,
                                                 FirmTargetKind::residual};
  bool write_xi = false;

  // Unknown keys, bad values and inconsistent settings throw ConfigInvalid.
  static RunConfig from_key_values(const KeyValues& kv);
  static RunConfig load(const std::string& path);
  void validate() const;
  // Re-derives the per-stage seeds and the hash; call after overriding
  // out_dir or seed.
  void finalize();

  std::uint64_t stage_seed(std::string_view stage) const { return derive_seed(seed, stage); }
};

// 64-bit FNV-1a, printed as 16 hex digits.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);

struct ArtifactRecord {
  std::string file;
  std::uint64_t bytes = 0;
  std::string fnv1a;
};

struct StageRecord {
  std::uint64_t seed = 0;
  double seconds = 0;
  std::vector<ArtifactRecord> artifacts;
};

// manifest.json in the output directory. Stage timings live here and only
// here, so every other artifact is reproducible byte for byte.
class RunManifest {
 public:
  std::string tool_version = kToolVersion;
  std::string config_hash;
  std::map<std::string, StageRecord> stages;

  static RunManifest load(const std::string& out_dir);
  void save(const std::string& out_dir) const;

  // Throws MissingArtifact(stage) unless the stage ran and its files exist.
  void require(const std::string& out_dir, const std::string& stage) const;
  bool has(const std::string& out_dir, const std::string& stage) const;

  nlohmann::json to_json() const;
};

// Pipeline stages in execution order.
const std::vector<std::string>& stage_names();

void cmd_simulate(const RunConfig& config);
void cmd_connect(const RunConfig& config);
void cmd_tune(const RunConfig& config);
void cmd_fit(const RunConfig& config);
void cmd_decompose(const RunConfig& config);
void cmd_akm(const RunConfig& config);
void cmd_explain(const RunConfig& config);
void cmd_eventstudy(const RunConfig& config);
void cmd_robustness(const RunConfig& config);

// Runs one stage by name ("eventstudy" also answers to "event-study").
void run_stage(const std::string& name, const RunConfig& config);
// Every stage in order; simulate only when the config has no input file.
void run_all(const RunConfig& config);

}  // namespace twice
