#ifndef BRANCHCONNECT_TOOLS_EXPERIMENT_H_
#define BRANCHCONNECT_TOOLS_EXPERIMENT_H_

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "branchconnect/checkpoint.h"
#include "branchconnect/data.h"
#include "branchconnect/trainer.h"
#include "branchconnect/trajectory.h"

namespace branchconnect::cli {

/// Bad flags, unreadable files or invalid configs (exit code 2).
class UsageError : public Error {
 public:
  using Error::Error;
};

enum class Baseline {
  kNone,           // BranchConnect with learned gates
  kBase,           // the arch file as a single-column network ("base_v1", "base_v2")
  kRandomConnect,  // frozen random K-subsets per class
};

std::string BaselineName(Baseline b);
Baseline ParseBaseline(const std::string& text);

struct DatasetConfig {
  std::string kind = "synthetic";  // synthetic | cifar10 | cifar100
  std::vector<std::string> train_paths;
  std::vector<std::string> test_paths;
  std::size_t classes = 10;
  /// Record counts. Synthetic data defaults to 400/400; CIFAR uses all
  /// records unless a prefix length is given.
  std::optional<std::size_t> train;
  std::optional<std::size_t> test;
  std::size_t side = 16;
  double noise = 1.0;
  std::uint64_t seed = 7;
};

/// JSON schema (every key optional, defaults shown by ToJson):
///   {"arch": path, "m": int, "k": int, "baseline": "none|base_v1|base_v2|random_connect",
///    "dataset": {"kind", "train_paths", "test_paths", "classes", "train", "test", "side", "noise", "seed"},
///    "train": {"lr_schedule": "0:0.01,1000:0.001", "gate_lr_mult", "momentum", "weight_decay",
///              "batch_size", "eval_batch_size", "iters", "eval_every", "seed", "crop", "mirror",
///              "record_wall_time"},
///    "out": dir}
/// Relative paths in a config file resolve against the file's directory.
struct ExperimentConfig {
  std::string arch;
  std::optional<std::size_t> m;  // defaults to the sectioned file's M, else 5
  std::optional<std::size_t> k;  // defaults to the sectioned file's K, else 2
  Baseline baseline = Baseline::kNone;
  DatasetConfig dataset;
  TrainConfig train;
  std::string out;
};

nlohmann::ordered_json ToJson(const ExperimentConfig& cfg);
/// Throws UsageError on unknown keys or invalid values.
ExperimentConfig FromJson(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
ExperimentConfig LoadExperimentConfig(const std::string& path);

/// Output root: $BRANCHCONNECT_OUT if set, else "runs".
std::filesystem::path DefaultOutputRoot();

struct Datasets {
  Dataset train;
  Dataset test;
};
Datasets LoadDatasets(const DatasetConfig& cfg);

/// Network spec for the config: the arch file reshaped with (M, K), a
/// sectioned file used as is, or the single-column base for kBase.
BranchNetSpec ResolveSpec(const ExperimentConfig& cfg, const Datasets& data);

/// Fresh state including the Random-Connect assignment when requested.
NetworkState BuildInitialState(const ExperimentConfig& cfg, const BranchNetSpec& spec);

struct RunResult {
  std::vector<MetricsRecord> records;
  NetworkState state;
};

/// Full training run. When `out_dir` is non-empty it receives metrics.csv,
/// checkpoint.bin, config.json (resolved) and dataset.json.
RunResult RunTraining(const ExperimentConfig& cfg, const std::filesystem::path& out_dir);
RunResult RunTraining(const ExperimentConfig& cfg, const Datasets& data, const std::filesystem::path& out_dir);

struct SweepRow {
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::optional<double> final_test_accuracy;
  std::optional<double> final_test_loss;
  std::string error;  // empty on success
};

struct SweepResult {
  std::vector<SweepRow> runs;
  /// (K, mean final test accuracy over the successful seeds), ascending K.
  std::vector<std::pair<std::size_t, double>> mean_accuracy;
};

/// Sorted, de-duplicated K values; warns about duplicates.
std::vector<std::size_t> NormalizeKList(const std::vector<std::size_t>& ks);

/// One training run per (K, seed). Runs that throw are recorded and skipped.
/// `jobs` > 1 runs configurations on worker threads, each in its own directory.
SweepResult RunSweep(const ExperimentConfig& cfg, const std::vector<std::size_t>& ks,
                     const std::vector<std::uint64_t>& seeds, const std::filesystem::path& out_dir,
                     std::size_t jobs = 1);

std::string FormatSweepCsv(const SweepResult& result);
std::string FormatSweepRunsCsv(const SweepResult& result);

struct NamedTrajectory {
  std::string model;
  std::vector<TrajectoryPoint> points;
};

/// Rows `iter,model,train_loss,test_loss`.
std::string FormatTrajectoriesCsv(const std::vector<NamedTrajectory>& runs);
/// Rows `baseline,level,branchconnect_test_loss,baseline_test_loss,gap`.
std::string FormatGapsCsv(const std::vector<std::pair<std::string, LevelComparison>>& comparisons);

/// Throws UsageError unless all runs share the same evaluation iterations.
void RequireSameCadence(const std::vector<NamedTrajectory>& runs);

struct GroupError {
  std::string group;  // parameter name or "gates"
  std::size_t coordinates = 0;
  double max_rel_error = 0;
};

inline constexpr std::size_t kGradCheckParameterLimit = 50000;

/// Finite-difference check of every weight tensor and of a random relaxed
/// gate matrix in (0.1, 0.9), on a random batch. `inject_fault` names a group
/// whose analytic gradient is corrupted before comparison. Throws UsageError
/// for networks with kGradCheckParameterLimit or more parameters.
std::vector<GroupError> CheckNetworkGradients(const BranchNetSpec& spec, std::uint64_t seed, std::size_t batch,
                                              double eps, const std::string& inject_fault = "");

void WriteTextFile(const std::filesystem::path& path, const std::string& text);
std::vector<std::uint8_t> ReadBinaryFile(const std::filesystem::path& path);

}  // namespace branchconnect::cli

#endif  // BRANCHCONNECT_TOOLS_EXPERIMENT_H_
