#pragma once

#include <map>
#include <string>
#include <vector>

#include "tsa/adaptation.hpp"
#include "tsa/backbone.hpp"
#include "tsa/episodes.hpp"

namespace tsa {


/// CSV header for ablation grids; rows are emitted in this column order.
inline constexpr const char* kGridCsvHeader =
    "method,dataset,seen_flag,protocol,n_episodes,mean_acc,ci95,"
    "params_fraction,seed";

/// One dataset reference in a run configuration: a synthetic domain generated
/// on the fly, or an IDX image/label pair resolved against TSA_DATA_DIR when
/// the paths are relative.
struct DatasetRef {
  std::string name;
  std::string kind = "synthetic";  // "synthetic" | "idx"
  bool seen = false;
  SyntheticDomainSpec synthetic;  // kind == "synthetic"; name/seen mirrored
  std::string images_path;        // kind == "idx"
  std::string labels_path;
};

/// Everything one evaluation run needs. Weights come from `weights_path`;
/// when that is empty a randomly initialized `backbone` (seeded by
/// `init_seed`) is used instead, which is only good for smoke tests.
/// adapt.lr_beta < 0 selects the per-dataset preset: 0.1 on seen domains,
/// 1.0 on unseen ones.
struct RunConfig {
  std::string weights_path;
  std::string backbone = "resnet-s";
  uint64_t init_seed = 0;
  std::string adapter_code = "Ad-R-M-PA";
  std::string head_code = "ncc";
  AdaptConfig adapt;
  Protocol protocol = Protocol::Varying;
  std::vector<DatasetRef> datasets;
  int episodes = 600;
  uint64_t seed = 0;
  uint64_t data_seed = 90;
  int workers = 1;
  std::string out_path;

  RunConfig() { adapt.lr_beta = -1; }
};

RunConfig parse_run_config(const std::string& json_text);
std::string run_config_json(const RunConfig& cfg);

/// The backbone loaded from weights_path when set, otherwise freshly
/// initialized from the named spec ("resnet-s" or "resnet18-replica").
BackboneWeights load_run_backbone(const RunConfig& cfg);

/// Generates the synthetic domains (seeded by data_seed, in listed order)
/// and loads the IDX ones, preserving the config's dataset order.
std::vector<Dataset> resolve_datasets(const RunConfig& cfg);

double mean_of(const std::vector<double>& xs);
/// 1.96 * s / sqrt(n) with s the sample standard deviation; 0 when n < 2.
double ci95(const std::vector<double>& xs);
/// FNV-1a (64-bit) over the doubles' little-endian bytes, as 16 hex chars.
std::string fnv1a_digest(const std::vector<double>& xs);

struct EpisodeFailure {
  int index = 0;
  std::string reason;
};

struct DatasetResult {
  std::string name;
  bool seen = false;
  int episodes_done = 0;
  std::vector<double> accuracies;  // completed episodes, in episode order
  double mean_acc = 0;
  double ci = 0;
  std::string digest;
  double seconds = 0;
  real lr_beta_used = 0;
  std::vector<EpisodeFailure> failures;
};

struct ParamAccounting {
  int64_t trainable = 0;  // adapter + alignment parameters
  int64_t backbone = 0;   // frozen backbone parameters, heads excluded
  double fraction = 0;
};

struct RunReport {
  int format_version = kReportFormatVersion;
  RunConfig config;
  ParamAccounting params;
  std::vector<DatasetResult> datasets;
  double wall_seconds = 0;
};

std::string report_json(const RunReport& report);
RunReport parse_report(const std::string& json_text);

/// Evaluates `episodes` seeded episodes per dataset, each on a freshly
/// attached task model over the shared frozen weights, and aggregates.
/// Episodes are independent and deterministic, so the per-episode results
/// do not depend on the worker count. Per-episode errors are recorded; the
/// run aborts only when more than 1% of a dataset's episodes fail.
RunReport run_experiment(const RunConfig& cfg, BackboneWeights& weights,
                         const std::vector<Dataset>& datasets);
/// Same, loading the backbone and datasets from the config first.
RunReport run_experiment(const RunConfig& cfg);

/// Average rank per method over datasets (rank 1 = best mean accuracy; ties
/// share the mean of the tied ranks). All methods must cover the same
/// datasets.
std::map<std::string, double> aggregate_rank(
    const std::map<std::string, std::map<std::string, double>>& means);

/// One axis of the ablation grid; empty vectors fall back to the base
/// config's value.
struct AblationAxes {
  std::vector<Connection> connections;
  std::vector<Form> forms;
  std::vector<std::vector<int>> attachments;
  std::vector<int> group_widths;  // decomposed bottleneck divisor N
  std::vector<int> iterations;
};

struct SkippedCombo {
  std::string method;
  std::string reason;
};

struct AblationResult {
  std::vector<std::string> rows;  // kGridCsvHeader columns
  std::vector<SkippedCombo> skipped;
};

/// Runs the Cartesian product of the axes over the base config, one row per
/// (method, dataset). Infeasible combinations (nothing trainable, or a run
/// that aborts) are skipped with a reason. Method codes are deduplicated so
/// each (method, dataset) pair runs exactly once.
AblationResult ablation_grid(const RunConfig& base, const AblationAxes& axes,
                             BackboneWeights& weights,
                             const std::vector<Dataset>& datasets);

}  // namespace tsa
