#include "branchconnect/trajectory.h"

#include <algorithm>
#include <cmath>

namespace branchconnect {

std::vector<TrajectoryPoint> ToTrajectory(const std::vector<MetricsRecord>& records, const std::string& run) {
  if (records.empty()) throw Error("run '" + run + "' has no metrics rows");
  std::vector<TrajectoryPoint> out;
  out.reserve(records.size());
  for (const MetricsRecord& r : records) {
    if (!r.test_loss) {
      throw Error("run '" + run + "' is missing the test loss at iteration " + std::to_string(r.iteration));
    }
    out.push_back({r.iteration, r.train_loss, *r.test_loss});
  }
  return out;
}

std::vector<TrajectoryPoint> AverageTrajectories(const std::vector<std::vector<TrajectoryPoint>>& runs) {
  if (runs.empty()) throw Error("no trajectories to average");
  std::vector<TrajectoryPoint> mean = runs.front();
  for (std::size_t r = 1; r < runs.size(); ++r) {
    if (runs[r].size() != mean.size()) throw Error("trajectories have different evaluation cadences");
    for (std::size_t i = 0; i < mean.size(); ++i) {
      if (runs[r][i].iteration != mean[i].iteration) throw Error("trajectories have different evaluation cadences");
      mean[i].train_loss += runs[r][i].train_loss;
      mean[i].test_loss += runs[r][i].test_loss;
    }
  }
  const double n = static_cast<double>(runs.size());
  for (TrajectoryPoint& p : mean) {
    p.train_loss /= n;
    p.test_loss /= n;
  }
  return mean;
}

std::optional<double> TestLossAtTrainLevel(const std::vector<TrajectoryPoint>& t, double level) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i].train_loss == level) return t[i].test_loss;
    if (i + 1 < t.size()) {
      const double a = t[i].train_loss, b = t[i + 1].train_loss;
      if ((a - level) * (b - level) < 0) {
        const double w = (a - level) / (a - b);
        return t[i].test_loss + w * (t[i + 1].test_loss - t[i].test_loss);
      }
    }
  }
  return std::nullopt;
}

LevelComparison CompareAtMatchedTrainLoss(const std::vector<TrajectoryPoint>& reference,
                                          const std::vector<TrajectoryPoint>& baseline, std::size_t count,
                                          double tail_fraction) {
  if (reference.empty() || baseline.empty()) throw Error("cannot compare empty trajectories");
  const double last_iter = static_cast<double>(reference.back().iteration);
  // Slack so that e.g. iteration 60 of 90 counts as the start of the final third.
  const double tail_start = last_iter * (1.0 - tail_fraction) - 1e-9 * std::max(last_iter, 1.0);
  double lo = INFINITY, hi = -INFINITY;
  for (const TrajectoryPoint& p : reference) {
    if (static_cast<double>(p.iteration) >= tail_start) {
      lo = std::min(lo, p.train_loss);
      hi = std::max(hi, p.train_loss);
    }
  }
  LevelComparison out;
  std::vector<double> levels;
  if (count <= 1 || hi == lo) {
    levels.push_back(lo);
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      levels.push_back(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(count - 1));
    }
  }
  out.candidate_levels = levels.size();
  std::size_t not_worse = 0;
  for (double level : levels) {
    const std::optional<double> ref = TestLossAtTrainLevel(reference, level);
    const std::optional<double> base = TestLossAtTrainLevel(baseline, level);
    if (!ref || !base) continue;
    out.levels.push_back({level, *ref, *base, *ref - *base});
    if (*ref <= *base) ++not_worse;
  }
  out.fraction_reference_not_worse = static_cast<double>(not_worse) / static_cast<double>(levels.size());
  return out;
}

}  // namespace branchconnect
