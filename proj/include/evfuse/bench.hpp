#pragma once

#include "evfuse/config.hpp"
#include "evfuse/learn.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace evfuse {

using Logger = std::function<void(const std::string&)>;

/// Raised when stored artifacts were produced by a different configuration.
class ResumeMismatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- datasets ----------------------------------------------------------------

/// Writes <dir>/train/bag_NN, <dir>/test/bag_NN and <dir>/dataset.json.
/// Complete datasets with the same hash are left untouched.
void generate_dataset(const RunConfig& cfg, const std::filesystem::path& dir, const Logger& log = {});

/// Bag directories under <dir>/<split>, sorted by name.
std::vector<std::filesystem::path> list_bags(const std::filesystem::path& split_dir);

/// Triplets of every bag, in bag then time order.
std::vector<SampleTriplet> load_triplets(const std::vector<std::filesystem::path>& bags, bool with_events);

struct Dataset {
  std::string hash;
  Normalizer norm;
  std::vector<Sample> train, test;
  double generation_seconds = 0.0;
};

/// Generates the dataset when missing and loads it with events.
Dataset load_dataset(const RunConfig& cfg, const std::filesystem::path& dir, const Logger& log = {});

// ---- grid cells ----------------------------------------------------------------

struct CellSpec {
  FusionVariant variant = FusionVariant::low_rank_gated;
  int latent = 16;
  double lambda = 0.25;
  std::uint64_t seed = 1;
};

struct CellResult {
  CellSpec spec;
  std::string hash;
  std::int64_t params = 0, flops = 0, fusion_params = 0;
  double rmse = 0.0, mae = 0.0, eva = 0.0;
  double train_seconds = 0.0, eval_seconds = 0.0;
};

/// Table row: one configuration aggregated over seeds by the median.
struct TableRow {
  std::string label;
  CellSpec spec;  // seed field unused
  std::vector<CellResult> runs;
  double median_rmse = 0.0, median_mae = 0.0, median_eva = 0.0;
};

struct MisalignmentPoint {
  double deg = 0.0, meters = 0.0;
  double rmse_no_kl = 0.0, rmse_kl = 0.0;  // medians over seeds
  double degradation_no_kl = 0.0, degradation_kl = 0.0;
  std::vector<double> per_seed_no_kl, per_seed_kl;
};

struct BenchReport {
  std::vector<TableRow> table1, table2, table3;
  std::vector<MisalignmentPoint> misalignment;
  /// Summed train + eval time of the Table I cells plus dataset generation.
  double table1_seconds = 0.0;
};

double median(std::vector<double> v);

/// Runs the desk-scale experiment grid under <out>. Each cell lives in
/// <out>/cells/<hash>/ and is skipped when its result.json already exists.
class Bench {
 public:
  Bench(RunConfig cfg, std::filesystem::path out, Logger log = {}, int workers = 1);

  /// `only` is empty (everything) or one of table1, table2, table3, misalignment.
  BenchReport run(const std::string& only = {});

  /// Cell configuration as hashed; includes the dataset hash.
  nlohmann::json cell_json(const CellSpec& spec) const;
  std::filesystem::path cell_dir(const CellSpec& spec) const;
  ModelConfig model_config(const CellSpec& spec) const;
  TrainConfig train_config(const CellSpec& spec) const;

  const Dataset& dataset();

 private:
  std::vector<CellResult> run_cells(const std::vector<CellSpec>& specs);
  CellResult run_cell(const CellSpec& spec);
  std::vector<TableRow> rows(const std::vector<std::pair<std::string, CellSpec>>& configs,
                             const std::map<std::string, CellResult>& results) const;
  std::vector<MisalignmentPoint> misalignment(const std::map<std::string, CellResult>& results);

  RunConfig cfg_;
  std::filesystem::path out_;
  Logger log_;
  int workers_;
  std::optional<Dataset> data_;
};

/// Table configurations, in report order.
std::vector<std::pair<std::string, CellSpec>> table1_configs();
std::vector<std::pair<std::string, CellSpec>> table2_configs(const std::vector<int>& latent_values);
std::vector<std::pair<std::string, CellSpec>> table3_configs();

/// Writes tables/*.md, results.csv and misalignment.csv under `out`.
void write_reports(const std::filesystem::path& out, const BenchReport& report);

/// Rebuilds plots/*.svg from results.csv, misalignment.csv and cell histories.
void write_plots(const std::filesystem::path& out);

CellResult read_cell_result(const std::filesystem::path& result_json);

}  // namespace evfuse
