#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "lowrank/analysis.hpp"

namespace lowrank {

// ----------------------------------------------------------------- datasets

struct DatasetHandle {
  std::vector<Tensor3> inputs;
  std::vector<std::size_t> labels;  // class indices
  std::size_t classes = 0;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> test_indices;
  std::size_t skipped_zero = 0;  // all-zero inputs dropped on load

  std::size_t size() const noexcept { return inputs.size(); }
  Shape3 input_shape() const;
};

/// Number of output units a loss needs for `classes` classes: 1 for the
/// logistic loss, `classes` otherwise.
std::size_t output_width(LossKind loss, std::size_t classes);

/// Targets are one-hot when k_out > 1, otherwise the label itself (0 or 1).
std::vector<Sample> to_samples(const DatasetHandle& d, std::span<const std::size_t> indices,
                               std::size_t k_out);

inline constexpr double kSyntheticStddev = 0.5;
inline constexpr double kDefaultTestFraction = 0.2;

/// Gaussian clusters in R^n (inputs n x 1 x 1). The class means are
/// orthogonal with norm sqrt(2), so every pair sits at distance exactly 2.
/// Sample i belongs to class i mod classes. The split is stratified.
/// Throws BadShape unless 2 <= classes <= min(n, m).
DatasetHandle gen_synthetic(std::size_t n, std::size_t m, std::size_t classes, std::uint64_t seed,
                            double test_fraction = kDefaultTestFraction);

/// Class means used by gen_synthetic for the given seed.
std::vector<std::vector<double>> synthetic_means(std::size_t n, std::size_t classes,
                                                 std::uint64_t seed);

/// IDX image/label pair. Pixels are value / 255. `subset` > 0 keeps the
/// first `subset` images of a seeded shuffle. Throws BadMagic,
/// TruncatedFile, CountMismatch, Io.
DatasetHandle load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                       std::size_t subset = 0, std::uint64_t seed = 0,
                       double test_fraction = kDefaultTestFraction);
DatasetHandle idx_from_bytes(const std::string& images, const std::string& labels,
                             std::size_t subset = 0, std::uint64_t seed = 0,
                             double test_fraction = kDefaultTestFraction);
std::string idx_images_bytes(const std::vector<std::vector<std::uint8_t>>& images, std::size_t rows,
                             std::size_t cols);
std::string idx_labels_bytes(const std::vector<std::uint8_t>& labels);

/// Rows `label,x0,x1,...`, with a header line. Inputs are d x 1 x 1.
DatasetHandle load_csv_dataset(const std::filesystem::path& path, std::uint64_t seed = 0,
                               double test_fraction = kDefaultTestFraction);
DatasetHandle csv_dataset_from_text(const std::string& text, std::uint64_t seed = 0,
                                    double test_fraction = kDefaultTestFraction);
std::string dataset_csv(const DatasetHandle& d);

/// Per-feature standardization with statistics of the train split only.
/// Features with zero spread are centered but not scaled.
void standardize(DatasetHandle& d);

// ------------------------------------------------------------------ config

struct SyntheticSpec {
  std::size_t n = 16, m = 200, classes = 4;
  std::uint64_t seed = 0;
};
struct IdxSpec {
  std::filesystem::path images, labels;
  std::size_t subset = 0;
  std::uint64_t seed = 0;
};
struct CsvSpec {
  std::filesystem::path path;
  std::uint64_t seed = 0;
};

struct DatasetSpec {
  std::variant<SyntheticSpec, IdxSpec, CsvSpec> source;
  bool standardize = false;
  double test_fraction = kDefaultTestFraction;
};

/// Either a preset name ("mlp-L-H", "resmlp-L-H", "cnn-C") or a network JSON
/// file. Presets take their input shape and output width from the data.
struct NetworkSpec {
  std::string preset = "mlp-3-32";
  std::filesystem::path file;
};

enum class SweepAxis { BatchSize, WeightDecay, LearningRate };
std::string to_string(SweepAxis axis);
SweepAxis sweep_axis_from_string(const std::string& name);

struct AnalysisSettings {
  double epsilon = 1e-3;
  std::vector<std::size_t> ks;  // empty: thinned powers of two
  std::size_t k_max = 64;
  std::size_t batch_budget = kSampledBatchCount;
  MatrixNorm norm = MatrixNorm::Frobenius;
  bool bound_report = true;
  bool noise_report = true;
};

struct ExperimentConfig {
  NetworkSpec network;
  DatasetSpec dataset;
  LossKind loss = LossKind::SoftmaxCE;
  SgdConfig sgd;
  bool step_schedule = false;  // proportional x0.1 decay, overrides sgd.schedule
  SweepAxis sweep_axis = SweepAxis::BatchSize;
  std::vector<double> sweep_values;
  AnalysisSettings analysis;
  std::filesystem::path output_dir = "runs";
  std::string source_text;  // TOML the config was parsed from, if any

  /// Throws BadConfig or BadParams.
  void validate() const;
  /// SgdConfig for one sweep value.
  SgdConfig run_config(std::size_t run_index) const;
};

/// Throws BadConfig (with the offending key) or Io.
ExperimentConfig parse_config(const std::string& toml_text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// LOWRANK_SEED, when set, replaces sgd.seed. Throws BadConfig when it is not
/// an unsigned integer.
void apply_env_overrides(ExperimentConfig& cfg);
/// Human-readable description of the TOML keys.
std::string config_schema();

DatasetHandle load_dataset(const DatasetSpec& spec);
/// Network for the data; initialization uses `init_seed`.
Network make_network(const NetworkSpec& spec, const Shape3& input, std::size_t k_out,
                     std::uint64_t init_seed);
/// Preset only. Throws BadConfig for unknown names.
Network network_preset(const std::string& name, const Shape3& input, std::size_t k_out,
                       std::uint64_t init_seed);

// ----------------------------------------------------------------- metrics

struct MetricsRow {
  std::string run_id;
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double avg_rank = 0.0;
  double d_metric = 0.0;
  std::vector<std::size_t> edge_ranks;
};

MetricsRow metrics_row(const std::string& run_id, const EpochMetrics& m);
/// Header run_id,epoch,train_loss,train_acc,test_acc,avg_rank,d_metric then
/// rank_edge_<i> for i < edge_count.
std::string metrics_header(std::size_t edge_count);
std::string metrics_csv(const std::vector<MetricsRow>& rows, std::size_t edge_count);
/// Throws BadConfig on a malformed header or row.
std::vector<MetricsRow> parse_metrics_csv(const std::string& text);

// ------------------------------------------------------------------- plots

struct PlotSeries {
  std::string name;
  std::vector<double> x, y;
};

struct PlotOptions {
  std::string title;
  std::string x_label = "epoch";
  std::string y_label;
  bool log_y = false;  // non-positive points are dropped
  double width = 640, height = 400;
};

/// Standalone SVG with one polyline per series.
std::string render_svg(const std::vector<PlotSeries>& series, const PlotOptions& options);
/// One series per run_id. `metric` is a CSV column name.
std::vector<PlotSeries> series_from_metrics(const std::vector<MetricsRow>& rows,
                                            const std::string& metric);

// ------------------------------------------------------------- experiments

inline constexpr const char* kCodeVersion = "lowrank 0.1.0";

struct RunOutcome {
  std::size_t index = 0;
  std::string run_id;
  double sweep_value = 0.0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  std::filesystem::path directory;
  std::vector<MetricsRow> rows;
  std::optional<BoundReport> bounds;
};

struct ExperimentResult {
  std::vector<RunOutcome> runs;
  std::filesystem::path metrics_path;
  std::size_t edge_count = 0;
  bool all_ok() const;
};

/// FNV-1a over the canonical config text.
std::string config_hash(const ExperimentConfig& cfg);
/// Canonical TOML rendering of the resolved config.
std::string config_toml(const ExperimentConfig& cfg);

/// One run per sweep value (a single run with the base SgdConfig when the
/// sweep is empty). Runs execute on up to `threads` workers and each writes
/// into <output_dir>/<run_id>/. A failed run is recorded in its manifest and
/// the remaining runs continue. Aggregated metrics.csv, manifest.json and
/// rank/accuracy/d_metric SVG plots go to output_dir.
ExperimentResult run_experiment(const ExperimentConfig& cfg, std::size_t threads = 1);

}  // namespace lowrank
