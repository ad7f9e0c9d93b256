// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "branchconnect/arch.h"
#include "branchconnect/gates.h"
#include "branchconnect/log.h"
#include "branchconnect/network.h"
#include "branchconnect/random.h"
#include "branchconnect/trainer.h"
#include "branchconnect/trajectory.h"
#include "experiment.h"

namespace fs = std::filesystem;
using namespace branchconnect;
using namespace branchconnect::cli;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string SourcePath(const std::string& relative) { return std::string(BRANCHCONNECT_SOURCE_DIR) + "/" + relative; }

std::string Format(const char* fmt, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), fmt, v);
  return buf;
}

std::string Slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig DeskConfig(const std::string& name) { return LoadExperimentConfig(SourcePath("configs/" + name)); }

// Gate constraints after every iteration of a 500-step run.
Outcome GateConstraints(const fs::path& work) {
  ExperimentConfig cfg = DeskConfig("desk_branchconnect.json");
  cfg.train.max_iters = 500;
  cfg.train.eval_every = 500;
  const Datasets data = LoadDatasets(cfg.dataset);
  const BranchNetSpec spec = ResolveSpec(cfg, data);
  NetworkState state = BuildInitialState(cfg, spec);
  Rng rng(cfg.train.seed);
  std::size_t steps = 0, violations = 0;
  TrainLoop(state, data.train, data.test, cfg.train, rng, [&](std::size_t, const NetworkState& s, double) {
    ++steps;
    const GateBank& g = s.gates;
    bool ok = true;
    for (std::size_t c = 0; c < g.classes(); ++c) {
      std::size_t ones = 0;
      for (std::size_t m = 0; m < g.branches(); ++m) {
        const std::uint8_t b = g.binary(c, m);
        const Scalar r = g.real(c, m);
        if (b == 1) ++ones;
        if (b != 0 && b != 1) ok = false;
        if (!(r >= 0 && r <= 1)) ok = false;
      }
      if (ones != g.active()) ok = false;
    }
    if (!ok) ++violations;
  });
  (void)work;
  return {steps == 500 && violations == 0,
          std::to_string(steps) + " iterations, " + std::to_string(violations) + " with violations (M=" +
              std::to_string(spec.branches) + ", K=" + std::to_string(spec.active) + ")"};
}

// Finite-difference check of the tiny two-branch network in 64-bit mode.
Outcome GradientFidelity() {
  if (sizeof(Scalar) != 8) return {false, "built with 32-bit scalars; the check needs 64-bit mode"};
  const BranchNetSpec spec =
      ReshapeToBranchConnect(ParseArchSpec(ReadTextFile(SourcePath("configs/gradcheck_tiny.arch"))), 2, 1);
  const bool shape_ok = spec.input_shape == Shape{3, 8, 8} && spec.num_classes == 4 && spec.stem.size() == 1 &&
                        spec.stem[0].kind == LayerKind::kConv && spec.stem[0].kernel == 3 &&
                        spec.stem[0].outputs == 8 && spec.branch.size() == 2 && spec.branch[0].outputs == 8 &&
                        spec.branch[1].kind == LayerKind::kFullyConnected && spec.branch[1].outputs == 16;
  if (!shape_ok) return {false, "tiny network does not have the required layout"};
  const std::vector<GroupError> groups = CheckNetworkGradients(spec, 1, 2, 1e-6);
  double worst_weight = 0, worst_gate = -1;
  for (const GroupError& g : groups) {
    if (g.group == "gates") {
      worst_gate = g.max_rel_error;
    } else {
      worst_weight = std::max(worst_weight, g.max_rel_error);
    }
  }
  const bool pass = worst_gate >= 0 && worst_gate < 1e-4 && worst_weight < 1e-4;
  return {pass, std::to_string(groups.size()) + " groups, weights max rel " + Format("%.2e", worst_weight) +
                    ", gates max rel " + Format("%.2e", worst_gate) + " (tolerance 1e-4)"};
}

// Empirical 2-subset law against enumeration of both draw orders.
Outcome SamplingLaw() {
  const std::vector<Scalar> row{0.6, 0.2, 0.1, 0.1};
  const std::vector<double> p = NormalizeRow(row);
  std::map<std::pair<std::size_t, std::size_t>, double> oracle;
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      if (i == j) continue;
      oracle[{std::min(i, j), std::max(i, j)}] += p[i] * p[j] / (1.0 - p[i]);
    }
  }
  constexpr std::size_t kDraws = 100000;
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> counts;
  Rng rng(DeriveSeed(2024, 3));
  for (std::size_t n = 0; n < kDraws; ++n) {
    std::vector<std::size_t> s = SampleActiveSet(p, 2, rng);
    std::sort(s.begin(), s.end());
    ++counts[{s[0], s[1]}];
  }
  double worst = 0;
  for (const auto& [pair, prob] : oracle) {
    const double freq = static_cast<double>(counts[pair]) / kDraws;
    worst = std::max(worst, std::abs(freq - prob));
  }
  const double p01 = static_cast<double>(counts[{0, 1}]) / kDraws;
  const bool pass = worst <= 0.01 && std::abs(oracle[{0, 1}] - 0.45) < 1e-12;
  return {pass, "P({0,1}) oracle " + Format("%.4f", oracle[{0, 1}]) + " empirical " + Format("%.4f", p01) +
                    ", max abs deviation " + Format("%.4f", worst) + " over 6 subsets"};
}

// K = M gated logits against the ungated sum-fusion network.
Outcome FullConnectivityReduction() {
  double worst = 0;
  std::size_t inputs = 0;
  const std::vector<std::string> archs = {"configs/gradcheck_tiny.arch", "configs/desk_base.arch"};
  for (std::size_t a = 0; a < archs.size(); ++a) {
    const std::string& arch = archs[a];
    BranchNetSpec spec = ReshapeToBranchConnect(ParseArchSpec(ReadTextFile(SourcePath(arch))), 3, 3);
    NetworkState state = InitNetwork(spec, 11);
    Rng rng(DeriveSeed(11, a));
    std::vector<Scalar> real(state.gates.real_values().size());
    for (Scalar& v : real) v = static_cast<Scalar>(Uniform01(rng));
    state.gates.set_real_values(real);
    Shape shape = spec.input_shape;
    shape.insert(shape.begin(), 50);
    Tensor images(shape);
    for (Scalar& v : images.data()) v = static_cast<Scalar>(StandardNormal(rng));
    const Tensor gated = InferLogits(state, images);
    const Tensor summed = SumFusionLogits(state, images);
    for (std::size_t i = 0; i < gated.size(); ++i) worst = std::max(worst, std::abs(double(gated[i] - summed[i])));
    inputs += 50;
  }
  return {worst <= 1e-10, std::to_string(inputs) + " random inputs, max |logit difference| " + Format("%.2e", worst)};
}

struct ModelRuns {
  std::vector<std::vector<TrajectoryPoint>> trajectories;
  std::vector<double> final_accuracy;
  std::vector<fs::path> dirs;

  double MeanAccuracy() const {
    double s = 0;
    for (double a : final_accuracy) s += a;
    return s / static_cast<double>(final_accuracy.size());
  }
};

constexpr std::uint64_t kSeeds[] = {1, 2, 3};

ModelRuns TrainSeeds(const std::string& config, const std::string& model, const fs::path& work) {
  ModelRuns runs;
  const ExperimentConfig base = DeskConfig(config);
  for (std::uint64_t seed : kSeeds) {
    ExperimentConfig cfg = base;
    cfg.train.seed = seed;
    const fs::path dir = work / (model + "_seed" + std::to_string(seed));
    const auto start = std::chrono::steady_clock::now();
    const RunResult r = RunTraining(cfg, dir);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    runs.trajectories.push_back(ToTrajectory(r.records, model));
    runs.final_accuracy.push_back(r.records.back().test_accuracy.value_or(0));
    runs.dirs.push_back(dir);
    std::cout << "  " << model << " seed " << seed << ": final test loss "
              << Format("%.4f", r.records.back().test_loss.value_or(NAN)) << ", accuracy "
              << Format("%.4f", runs.final_accuracy.back()) << " (" << Format("%.0f", secs) << " s)" << std::endl;
  }
  return runs;
}

struct DeskResults {
  ModelRuns branchconnect;
  bool trained = false;
};

// Matched train-loss comparison against V2 and Random-Connect.
Outcome Regularization(const fs::path& work, DeskResults& desk) {
  desk.branchconnect = TrainSeeds("desk_branchconnect.json", "branchconnect", work);
  desk.trained = true;
  const ModelRuns v2 = TrainSeeds("desk_base_v2.json", "base_v2", work);
  const ModelRuns rc = TrainSeeds("desk_random_connect.json", "random_connect", work);
  const std::vector<TrajectoryPoint> bc_mean = AverageTrajectories(desk.branchconnect.trajectories);
  const LevelComparison vs_v2 = CompareAtMatchedTrainLoss(bc_mean, AverageTrajectories(v2.trajectories), 20);
  const LevelComparison vs_rc = CompareAtMatchedTrainLoss(bc_mean, AverageTrajectories(rc.trajectories), 20);
  const double bc_acc = desk.branchconnect.MeanAccuracy();
  const double v2_acc = v2.MeanAccuracy();
  const bool pass = vs_v2.fraction_reference_not_worse >= 0.7 && vs_rc.fraction_reference_not_worse >= 0.7 &&
                    bc_acc >= v2_acc;
  std::ostringstream d;
  d << "not-worse fraction vs base_v2 " << Format("%.2f", vs_v2.fraction_reference_not_worse) << " ("
    << vs_v2.levels.size() << "/" << vs_v2.candidate_levels << " matched), vs random_connect "
    << Format("%.2f", vs_rc.fraction_reference_not_worse) << " (" << vs_rc.levels.size() << "/"
    << vs_rc.candidate_levels << " matched), need >= 0.70; final accuracy branchconnect " << Format("%.4f", bc_acc)
    << " vs base_v2 " << Format("%.4f", v2_acc);
  return {pass, d.str()};
}

// Peak of the K sweep is not at full connectivity.
Outcome KSweep(const fs::path& work, DeskResults& desk) {
  ExperimentConfig cfg = DeskConfig("desk_branchconnect.json");
  const std::size_t m = cfg.m.value_or(5);
  std::vector<std::size_t> ks;
  for (std::size_t k = 1; k <= m; ++k) {
    if (!(desk.trained && cfg.k == k)) ks.push_back(k);
  }
  const std::vector<std::uint64_t> seeds(std::begin(kSeeds), std::end(kSeeds));
  SweepResult sweep = RunSweep(cfg, ks, seeds, work / "sweep");
  for (const SweepRow& row : sweep.runs) {
    if (!row.error.empty()) return {false, "run K=" + std::to_string(row.k) + " failed: " + row.error};
  }
  if (desk.trained) sweep.mean_accuracy.emplace_back(*cfg.k, desk.branchconnect.MeanAccuracy());
  std::sort(sweep.mean_accuracy.begin(), sweep.mean_accuracy.end());
  double best = -1, full = -1;
  std::size_t best_k = 0;
  std::ostringstream d;
  for (const auto& [k, acc] : sweep.mean_accuracy) {
    d << "K=" << k << ":" << Format("%.4f", acc) << " ";
    if (acc > best) best = acc, best_k = k;
    if (k == m) full = acc;
  }
  d << "; peak at K=" << best_k;
  return {sweep.mean_accuracy.size() == m && full >= 0 && best > full, d.str()};
}

// Golden-file reshaping of the two transcribed architectures.
Outcome ReshaperGoldens() {
  struct Case {
    std::string arch, golden;
    std::size_t stem, branch, head;  // hand shape walk, 32x32 input, floor pooling
  };
  // Quick: conv 5x5x3x32 (2432), pool 32->15, conv 5x5x32x32 (25632), pool 15->7 | conv 5x5x32x64 (51264),
  // pool 7->3, FC 576->64 (36928) | FC_Gates 64->100 (6500).
  // Full: same stem, LRN layers carry no weights | conv 5x5x32x64 (51264), pool 7->3 | FC_Gates 576->100 (57700).
  const std::vector<Case> cases = {
      {"configs/alexnet_quick.arch", "tests/golden/alexnet_quick_m10.txt", 28064, 88192, 6500},
      {"configs/alexnet_full.arch", "tests/golden/alexnet_full_m10.txt", 28064, 51264, 57700},
  };
  std::ostringstream d;
  bool pass = true;
  for (const Case& c : cases) {
    const BranchNetSpec spec = ReshapeToBranchConnect(ParseArchSpec(ReadTextFile(SourcePath(c.arch))), 10, 5);
    const bool text_ok = FormatBranchNetSpec(spec) == Slurp(SourcePath(c.golden));
    const ParameterCounts counts = CountParameters(spec);
    const std::size_t total = c.stem + 10 * c.branch + c.head;
    const bool count_ok = counts.stem == c.stem && counts.branch == c.branch && counts.head == c.head &&
                          counts.total == total && counts.gates == 1000;
    std::size_t init_params = CountStateParameters(InitNetwork(spec, 1));
    const bool state_ok = init_params == total;
    pass = pass && text_ok && count_ok && state_ok;
    d << fs::path(c.arch).stem().string() << ": text " << (text_ok ? "match" : "MISMATCH") << ", total " << counts.total
      << " = " << c.stem << " + 10 x " << c.branch << " + " << c.head << (count_ok && state_ok ? "" : " MISMATCH")
      << "; ";
  }
  return {pass, d.str()};
}

// The resolved config records its own output directory, which differs by design.
std::string DropOutLine(const std::string& text) {
  std::istringstream in(text);
  std::string line, kept;
  while (std::getline(in, line))
    if (line.find("\"out\":") == std::string::npos) kept += line + '\n';
  return kept;
}

// Byte-identical repeat of a training run.
Outcome Determinism(const fs::path& work, const DeskResults& desk) {
  ExperimentConfig cfg = DeskConfig("desk_branchconnect.json");
  cfg.train.seed = kSeeds[0];
  fs::path first = desk.trained ? desk.branchconnect.dirs[0] : work / "determinism_a";
  if (!desk.trained) RunTraining(cfg, first);
  const fs::path second = work / "determinism_repeat";
  RunTraining(cfg, second);
  bool pass = true;
  std::ostringstream d;
  for (const char* name : {"metrics.csv", "checkpoint.bin", "config.json"}) {
    std::string a = Slurp(first / name), b = Slurp(second / name);
    if (std::string(name) == "config.json") a = DropOutLine(a), b = DropOutLine(b);
    const bool same = !a.empty() && a == b;
    pass = pass && same;
    d << name << " " << (same ? "identical" : "DIFFERENT") << " (" << a.size() << " bytes); ";
  }
  return {pass, d.str()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::string work_dir = "acceptance_runs";
  std::vector<int> only;
  app.add_option("--work-dir", work_dir, "directory for training outputs");
  app.add_option("--only", only, "criteria to run, e.g. 1,2,7")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  const fs::path work(work_dir);
  fs::remove_all(work);
  fs::create_directories(work);
  SetWarningSink([](const std::string&) {});

  DeskResults desk;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gate constraints", [&] { return GateConstraints(work); }},
      {"gradient fidelity", [] { return GradientFidelity(); }},
      {"sampling law", [] { return SamplingLaw(); }},
      {"K=M reduction", [] { return FullConnectivityReduction(); }},
      {"regularization signature", [&] { return Regularization(work, desk); }},
      {"K-sweep shape", [&] { return KSweep(work, desk); }},
      {"reshaper golden files", [] { return ReshaperGoldens(); }},
      {"determinism", [&] { return Determinism(work, desk); }},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!o.pass) ++failures;
    std::cout << "criterion " << id << " " << (o.pass ? "PASS" : "FAIL") << " [" << criteria[i].first << "] "
              << o.detail << " (" << Format("%.1f", secs) << " s)" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
