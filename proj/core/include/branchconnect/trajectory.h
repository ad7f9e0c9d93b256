#ifndef BRANCHCONNECT_TRAJECTORY_H_
#define BRANCHCONNECT_TRAJECTORY_H_

#include <optional>
#include <string>
#include <vector>

#include "branchconnect/trainer.h"

namespace branchconnect {

struct TrajectoryPoint {
  std::size_t iteration = 0;
  double train_loss = 0;
  double test_loss = 0;
};

/// Evaluation rows of a run. Throws when a row lacks a test loss, naming `run`.
std::vector<TrajectoryPoint> ToTrajectory(const std::vector<MetricsRecord>& records, const std::string& run);

/// Pointwise mean of runs recorded at identical iterations (e.g. seeds).
std::vector<TrajectoryPoint> AverageTrajectories(const std::vector<std::vector<TrajectoryPoint>>& runs);

/// Test loss where the train loss first reaches `level`, interpolating
/// linearly between neighbouring evaluation rows. Empty if never reached.
std::optional<double> TestLossAtTrainLevel(const std::vector<TrajectoryPoint>& trajectory, double level);

struct MatchedLevel {
  double level = 0;
  double reference_test_loss = 0;
  double baseline_test_loss = 0;
  double gap = 0;  // reference - baseline; negative favours the reference
};

struct LevelComparison {
  std::vector<MatchedLevel> levels;  // only levels both runs reach
  std::size_t candidate_levels = 0;
  /// Share of candidate levels where the reference is matched and its test
  /// loss does not exceed the baseline's.
  double fraction_reference_not_worse = 0;
};

/// Candidate levels are `count` evenly spaced train-loss values spanning the
/// reference run's train losses over its final `tail_fraction` of iterations.
LevelComparison CompareAtMatchedTrainLoss(const std::vector<TrajectoryPoint>& reference,
                                          const std::vector<TrajectoryPoint>& baseline, std::size_t count = 20,
                                          double tail_fraction = 1.0 / 3.0);

}  // namespace branchconnect

#endif  // BRANCHCONNECT_TRAJECTORY_H_
