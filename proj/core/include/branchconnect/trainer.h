#ifndef BRANCHCONNECT_TRAINER_H_
#define BRANCHCONNECT_TRAINER_H_

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "branchconnect/data.h"
#include "branchconnect/network.h"
#include "branchconnect/random.h"

namespace branchconnect {

struct LrStage {
  std::size_t iteration = 0;
  double rate = 0;
};

struct TrainConfig {
  /// Piecewise-constant schedule; the first stage must start at iteration 0.
  std::vector<LrStage> lr_schedule{{0, 0.001}};
  double gate_lr_multiplier = 10.0;
  double momentum = 0.9;
  double weight_decay = 0.004;
  std::size_t batch_size = 64;
  std::size_t eval_batch_size = 100;
  std::size_t max_iters = 1000;
  std::size_t eval_every = 100;
  std::uint64_t seed = 1;
  PreprocessOptions preprocess;
  /// Off by default so metrics files are byte-reproducible (wall_ms = 0).
  bool record_wall_time = false;

  void Validate() const;
  double LearningRateAt(std::size_t iteration) const;
};

/// Parses "0:1e-3,100:1e-4" into stages.
std::vector<LrStage> ParseLrSchedule(const std::string& text);
std::string FormatLrSchedule(const std::vector<LrStage>& schedule);

struct MetricsRecord {
  std::size_t iteration = 0;
  /// Mean minibatch loss over the steps since the previous record; for the
  /// iteration-0 row, the inference-mode loss on the training set.
  double train_loss = 0;
  std::optional<double> test_loss;
  std::optional<double> test_accuracy;
  double lr = 0;  // rate in effect from this iteration on
  std::int64_t wall_ms = 0;

  friend bool operator==(const MetricsRecord&, const MetricsRecord&) = default;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// One stochastic-gate training iteration on a preprocessed batch:
/// resample binary gates, forward, backward, momentum SGD with weight decay
/// on the weights (v = mu*v - lr*(g + wd*w); w += v), and a plain clipped
/// step on the real gates with rate gate_lr_multiplier * lr. Returns the
/// minibatch loss measured before the update.
double TrainStep(NetworkState& state, const Batch& batch, const TrainConfig& cfg, double lr, Rng& rng);

struct EvalResult {
  double loss = 0;
  double accuracy = 0;
};

/// Mean cross-entropy and top-1 accuracy with top-K gates and eval
/// preprocessing, visiting every record once.
EvalResult Evaluate(const NetworkState& state, const Dataset& ds, std::size_t batch_size,
                    const PreprocessOptions& preprocess = {});

/// Seeded epoch-wise shuffling; reshuffles when a pass is exhausted.
class BatchSampler {
 public:
  explicit BatchSampler(std::size_t records) : records_(records) {}
  std::vector<std::size_t> Next(std::size_t batch_size, Rng& rng);

 private:
  std::size_t records_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

/// Called after every training step with the 1-based iteration count.
using StepObserver = std::function<void(std::size_t iteration, const NetworkState& state, double loss)>;

/// Records at iteration 0, every eval_every steps and at max_iters. Test
/// metrics are absent when `test` is empty.
std::vector<MetricsRecord> TrainLoop(NetworkState& state, const Dataset& train, const Dataset& test,
                                     const TrainConfig& cfg, Rng& rng, const StepObserver& observer = {});

/// Random-Connect baseline: each class gets K branches drawn uniformly once;
/// the binary gates stay fixed for training and inference.
void MakeRandomConnect(NetworkState& state, std::size_t active, std::uint64_t seed);

std::string FormatMetricsCsv(const std::vector<MetricsRecord>& records);
std::vector<MetricsRecord> ParseMetricsCsv(const std::string& text);
void WriteMetricsCsv(const std::string& path, const std::vector<MetricsRecord>& records);
std::vector<MetricsRecord> ReadMetricsCsv(const std::string& path);

}  // namespace branchconnect

#endif  // BRANCHCONNECT_TRAINER_H_
