#include "cli.h"

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <map>
#include <sstream>

#include "branchconnect/arch.h"
#include "branchconnect/checkpoint.h"
#include "branchconnect/log.h"
#include "experiment.h"

namespace branchconnect::cli {

namespace fs = std::filesystem;

namespace {

/// Flags shared by train, sweep-k and compare-trajectories. Values given on
/// the command line override the config file, which overrides the defaults.
struct CommonFlags {
  std::string config;
  std::string arch;
  std::string dataset;
  std::vector<std::string> train_data;
  std::vector<std::string> test_data;
  std::size_t m = 0;
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::string out;
  std::size_t iters = 0;
  std::string lr_schedule;
  double gate_lr_mult = 10.0;
  double momentum = 0.9;
  double weight_decay = 0.004;
  std::size_t batch_size = 0;
  std::size_t eval_every = 0;
  double noise = 0;
  std::string baseline;
  std::map<std::string, CLI::Option*> options;

  void Add(CLI::App* app, bool with_arch = true) {
    options["config"] = app->add_option("--config", config, "JSON experiment config")->check(CLI::ExistingFile);
    if (with_arch) options["arch"] = app->add_option("--arch", arch, "architecture file");
    options["dataset"] = app->add_option("--dataset", dataset, "synthetic | cifar10 | cifar100");
    options["train-data"] = app->add_option("--train-data", train_data, "CIFAR binary training files");
    options["test-data"] = app->add_option("--test-data", test_data, "CIFAR binary test files");
    options["m"] = app->add_option("--m", m, "number of branches M");
    options["k"] = app->add_option("--k", k, "active connections per class K");
    options["seed"] = app->add_option("--seed", seed, "training seed");
    options["out"] = app->add_option("--out", out, "output directory");
    options["iters"] = app->add_option("--iters", iters, "training iterations");
    options["lr-schedule"] = app->add_option("--lr-schedule", lr_schedule, "e.g. 0:0.01,1000:0.001");
    options["gate-lr-mult"] = app->add_option("--gate-lr-mult", gate_lr_mult, "gate rate / weight rate (default 10)");
    options["momentum"] = app->add_option("--momentum", momentum, "SGD momentum (default 0.9)");
    options["weight-decay"] = app->add_option("--weight-decay", weight_decay, "weight decay (default 0.004)");
    options["batch-size"] = app->add_option("--batch-size", batch_size, "minibatch size");
    options["eval-every"] = app->add_option("--eval-every", eval_every, "evaluation cadence in iterations");
    options["noise"] = app->add_option("--noise", noise, "synthetic pixel noise");
    options["baseline"] = app->add_option("--baseline", baseline, "none | base_v1 | base_v2 | random_connect");
  }

  bool Given(const std::string& name) const {
    auto it = options.find(name);
    return it != options.end() && it->second->count() > 0;
  }

  ExperimentConfig Resolve() const {
    ExperimentConfig cfg = config.empty() ? ExperimentConfig{} : LoadExperimentConfig(config);
    if (Given("arch")) cfg.arch = arch;
    if (Given("dataset")) {
      if (dataset != "synthetic" && dataset != "cifar10" && dataset != "cifar100") {
        throw UsageError("unknown dataset kind '" + dataset + "'");
      }
      cfg.dataset.kind = dataset;
    }
    if (Given("train-data")) cfg.dataset.train_paths = train_data;
    if (Given("test-data")) cfg.dataset.test_paths = test_data;
    if (Given("noise")) cfg.dataset.noise = noise;
    if (Given("m")) cfg.m = m;
    if (Given("k")) cfg.k = k;
    if (Given("seed")) cfg.train.seed = seed;
    if (Given("out")) cfg.out = out;
    if (Given("iters")) cfg.train.max_iters = iters;
    if (Given("lr-schedule")) {
      try {
        cfg.train.lr_schedule = ParseLrSchedule(lr_schedule);
      } catch (const Error& e) {
        throw UsageError(e.what());
      }
    }
    if (Given("gate-lr-mult")) cfg.train.gate_lr_multiplier = gate_lr_mult;
    if (Given("momentum")) cfg.train.momentum = momentum;
    if (Given("weight-decay")) cfg.train.weight_decay = weight_decay;
    if (Given("batch-size")) cfg.train.batch_size = batch_size;
    if (Given("eval-every")) cfg.train.eval_every = eval_every;
    if (Given("baseline")) cfg.baseline = ParseBaseline(baseline);
    try {
      cfg.train.Validate();
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
    return cfg;
  }
};

fs::path OutputDir(const ExperimentConfig& cfg, const std::string& command) {
  return cfg.out.empty() ? DefaultOutputRoot() / command : fs::path(cfg.out);
}

std::string Fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string JoinIndices(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + std::to_string(v[i]);
  return s;
}

int CmdReshape(const std::string& arch, std::size_t m, std::size_t k, const std::string& out_path, std::ostream& out,
               std::ostream& err) {
  if (!fs::exists(arch)) throw UsageError("architecture file '" + arch + "' does not exist");
  BaseArchSpec base;
  BranchNetSpec spec;
  try {
    base = ParseArchSpec(ReadTextFile(arch));
    spec = ReshapeToBranchConnect(base, m, k);
  } catch (const Error& e) {
    throw UsageError(arch + ": " + e.what());
  }
  if (m == 1) Warn("M=1 gives a single-branch network equivalent to the base model");
  const std::string text = FormatBranchNetSpec(spec);
  std::ostream& report = out_path.empty() ? err : out;
  if (out_path.empty()) {
    out << text;
  } else {
    WriteTextFile(out_path, text);
  }
  const ParameterCounts counts = CountParameters(spec);
  report << "base parameters: " << CountParameters(base) << "\n";
  report << "branchconnect parameters: " << counts.total << " (stem " << counts.stem << " + " << spec.branches
         << " x branch " << counts.branch << " + head " << counts.head << ")\n";
  report << "gates: " << spec.num_classes << " x " << spec.branches << " = " << counts.gates << "\n";
  return kExitOk;
}

void PrintRecord(std::ostream& out, const MetricsRecord& r) {
  out << "iter " << r.iteration << ": train_loss " << Fixed(r.train_loss, 4);
  if (r.test_loss) out << ", test_loss " << Fixed(*r.test_loss, 4);
  if (r.test_accuracy) out << ", test_acc " << Fixed(*r.test_accuracy, 4);
  out << "\n";
}

int CmdTrain(const CommonFlags& flags, std::ostream& out) {
  const ExperimentConfig cfg = flags.Resolve();
  const fs::path dir = OutputDir(cfg, "train");
  const RunResult result = RunTraining(cfg, dir);
  PrintRecord(out, result.records.back());
  out << "wrote " << (dir / "metrics.csv").string() << " and " << (dir / "checkpoint.bin").string() << "\n";
  return kExitOk;
}

ExperimentConfig ConfigForCheckpoint(const std::string& checkpoint, const std::string& config) {
  const fs::path path = config.empty() ? fs::path(checkpoint).parent_path() / "config.json" : fs::path(config);
  if (!fs::exists(path)) throw UsageError("no config found at '" + path.string() + "' (use --config)");
  return LoadExperimentConfig(path.string());
}

Checkpoint ReadCheckpoint(const std::string& path) {
  if (!fs::exists(path)) throw UsageError("checkpoint '" + path + "' does not exist");
  return LoadCheckpoint(path);
}

int CmdEval(const std::string& checkpoint, const std::string& config, const std::string& split, std::ostream& out) {
  const Checkpoint ckpt = ReadCheckpoint(checkpoint);
  const ExperimentConfig cfg = ConfigForCheckpoint(checkpoint, config);
  Datasets data = LoadDatasets(cfg.dataset);
  Dataset& ds = split == "train" ? data.train : data.test;
  if (auto it = ckpt.extras.find("data/mean_image"); it != ckpt.extras.end()) {
    if (it->second.shape() != ds.mean_image.shape()) throw UsageError("checkpoint mean image does not match the data");
    ds.mean_image = it->second;
  }
  const EvalResult r = Evaluate(ckpt.state, ds, cfg.train.eval_batch_size, cfg.train.preprocess);
  out << "split " << split << ": records " << ds.size() << ", loss " << Fixed(r.loss, 6) << ", accuracy "
      << Fixed(r.accuracy, 4) << "\n";
  return kExitOk;
}

int CmdInspectGates(const std::string& checkpoint, const std::string& csv_path, std::ostream& out) {
  const Checkpoint ckpt = ReadCheckpoint(checkpoint);
  const GateBank& g = ckpt.state.gates;
  std::vector<std::size_t> load(g.branches(), 0);
  std::string csv = "class";
  for (std::size_t m = 0; m < g.branches(); ++m) csv += ",g" + std::to_string(m);
  csv += ",active\n";
  out << "gates: C=" << g.classes() << " M=" << g.branches() << " K=" << g.active()
      << (g.frozen() ? " (frozen)" : "") << "\n";
  for (std::size_t c = 0; c < g.classes(); ++c) {
    const std::vector<std::size_t> active = TopK(g.real_row(c), g.active());
    for (std::size_t m : active) ++load[m];
    out << "class " << std::setw(3) << c << ":";
    csv += std::to_string(c);
    for (Scalar v : g.real_row(c)) {
      out << " " << Fixed(v, 4);
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.17g", static_cast<double>(v));
      csv += std::string(",") + buf;
    }
    out << "  active {" << JoinIndices(active) << "}\n";
    csv += "," + JoinIndices(active) + "\n";
  }
  out << "branch load:";
  for (std::size_t m = 0; m < load.size(); ++m) out << " " << m << ":" << load[m];
  out << "\n";
  if (!csv_path.empty()) WriteTextFile(csv_path, csv);
  return kExitOk;
}

int CmdGradcheck(const std::string& arch, std::size_t m, std::size_t k, std::uint64_t seed, std::size_t batch,
                 double eps, const std::string& fault, std::ostream& out) {
  if (!fs::exists(arch)) throw UsageError("architecture file '" + arch + "' does not exist");
  BranchNetSpec spec;
  try {
    const std::string text = ReadTextFile(arch);
    if (IsSectionedSpec(text)) {
      spec = ParseBranchNetSpec(text);
      spec.branches = m;
      spec.active = k;
      spec.Validate();
    } else {
      spec = ReshapeToBranchConnect(ParseArchSpec(text), m, k);
    }
  } catch (const Error& e) {
    throw UsageError(arch + ": " + e.what());
  }
  const std::vector<GroupError> groups = CheckNetworkGradients(spec, seed, batch, eps, fault);
  constexpr double kTolerance = 1e-3;
  std::vector<std::string> failed;
  double worst = 0;
  for (const GroupError& g : groups) {
    const bool ok = g.max_rel_error < kTolerance;
    if (!ok) failed.push_back(g.group);
    worst = std::max(worst, g.max_rel_error);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3e", g.max_rel_error);
    out << std::left << std::setw(24) << g.group << std::right << std::setw(8) << g.coordinates << "  max_rel_error "
        << buf << (ok ? "" : "  FAIL") << "\n";
  }
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3e", worst);
  if (failed.empty()) {
    out << "gradcheck passed: max relative error " << buf << "\n";
    return kExitOk;
  }
  out << "gradcheck failed for:";
  for (const std::string& f : failed) out << " " << f;
  out << "\n";
  return kExitCheckFailed;
}

std::vector<std::uint64_t> SeedList(const std::vector<std::uint64_t>& seeds, std::uint64_t fallback) {
  return seeds.empty() ? std::vector<std::uint64_t>{fallback} : seeds;
}

int CmdSweepK(const CommonFlags& flags, const std::vector<std::size_t>& ks, const std::vector<std::uint64_t>& seeds,
              std::size_t jobs, std::ostream& out) {
  ExperimentConfig cfg = flags.Resolve();
  const std::size_t m = cfg.m.value_or(5);
  for (std::size_t k : ks) {
    if (k < 1 || k > m) throw UsageError("K=" + std::to_string(k) + " is outside 1..M=" + std::to_string(m));
  }
  cfg.m = m;
  const fs::path dir = OutputDir(cfg, "sweep-k");
  const SweepResult r = RunSweep(cfg, ks, SeedList(seeds, cfg.train.seed), dir, jobs);
  out << FormatSweepCsv(r);
  out << "wrote " << (dir / "sweep.csv").string() << "\n";
  const bool any_failed = std::any_of(r.runs.begin(), r.runs.end(), [](const SweepRow& row) { return !row.error.empty(); });
  return any_failed ? kExitCheckFailed : kExitOk;
}

/// A run given to compare-trajectories: a metrics CSV used as is, or a JSON
/// config trained once per seed and averaged.
std::vector<TrajectoryPoint> LoadOrTrain(const std::string& source, const std::string& model,
                                         const std::vector<std::uint64_t>& seeds, const fs::path& dir) {
  if (!fs::exists(source)) throw UsageError("'" + source + "' does not exist");
  if (fs::path(source).extension() == ".csv") {
    try {
      return ToTrajectory(ReadMetricsCsv(source), model);
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
  }
  const ExperimentConfig cfg = LoadExperimentConfig(source);
  std::vector<std::vector<TrajectoryPoint>> runs;
  for (std::uint64_t s : SeedList(seeds, cfg.train.seed)) {
    ExperimentConfig run = cfg;
    run.train.seed = s;
    const RunResult r = RunTraining(run, dir / (model + "_seed" + std::to_string(s)));
    runs.push_back(ToTrajectory(r.records, model));
  }
  try {
    return AverageTrajectories(runs);
  } catch (const Error& e) {
    throw UsageError(model + ": " + e.what());
  }
}

int CmdCompare(const std::string& bc, const std::string& base, const std::string& random,
               const std::vector<std::uint64_t>& seeds, const std::string& out_dir, std::size_t levels,
               std::ostream& out) {
  const fs::path dir = out_dir.empty() ? DefaultOutputRoot() / "compare-trajectories" : fs::path(out_dir);
  fs::create_directories(dir);
  std::vector<NamedTrajectory> runs;
  runs.push_back({"branchconnect", LoadOrTrain(bc, "branchconnect", seeds, dir)});
  if (!base.empty()) runs.push_back({"base_v2", LoadOrTrain(base, "base_v2", seeds, dir)});
  if (!random.empty()) runs.push_back({"random_connect", LoadOrTrain(random, "random_connect", seeds, dir)});
  RequireSameCadence(runs);
  std::vector<std::pair<std::string, LevelComparison>> comparisons;
  for (std::size_t i = 1; i < runs.size(); ++i) {
    comparisons.emplace_back(runs[i].model, CompareAtMatchedTrainLoss(runs[0].points, runs[i].points, levels));
  }
  WriteTextFile(dir / "trajectories.csv", FormatTrajectoriesCsv(runs));
  WriteTextFile(dir / "gaps.csv", FormatGapsCsv(comparisons));
  for (const auto& [name, cmp] : comparisons) {
    out << "vs " << name << ": branchconnect test loss <= baseline at " << cmp.levels.size() << " matched of "
        << cmp.candidate_levels << " levels, fraction not worse " << Fixed(cmp.fraction_reference_not_worse, 3) << "\n";
  }
  out << "wrote " << (dir / "trajectories.csv").string() << " and " << (dir / "gaps.csv").string() << "\n";
  return kExitOk;
}

}  // namespace

int RunCli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"BranchConnect: class-gated multi-branch CNNs", "branchconnect"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  CLI::App* reshape = app.add_subcommand("reshape", "reshape a base architecture into stem, branches and gated head");
  std::string arch;
  std::size_t m = 10, k = 5;
  std::string out_path;
  reshape->add_option("--arch", arch, "base architecture file")->required();
  reshape->add_option("--m", m, "number of branches M")->capture_default_str();
  reshape->add_option("--k", k, "active connections K")->capture_default_str();
  reshape->add_option("--out", out_path, "output file (default: stdout)");

  CommonFlags train_flags;
  CLI::App* train = app.add_subcommand("train", "train a model and write metrics, checkpoint and config");
  train_flags.Add(train);

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint with deterministic gates");
  std::string checkpoint, config, split = "test";
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--config", config, "experiment config (default: config.json next to the checkpoint)");
  eval->add_option("--split", split, "test | train")->check(CLI::IsMember({"test", "train"}));

  CLI::App* inspect = app.add_subcommand("inspect-gates", "print real gates, active sets and branch loads");
  std::string csv_path;
  inspect->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  inspect->add_option("--csv", csv_path, "also write the gate table as CSV");

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of weight and gate gradients");
  std::uint64_t seed = 1;
  std::size_t batch = 2;
  double eps = 1e-5;
  std::string fault;
  std::size_t gc_m = 2, gc_k = 1;
  gradcheck->add_option("--arch", arch, "base or sectioned architecture file")->required();
  gradcheck->add_option("--m", gc_m, "number of branches M")->capture_default_str();
  gradcheck->add_option("--k", gc_k, "active connections K")->capture_default_str();
  gradcheck->add_option("--seed", seed, "seed for weights and probe batch")->capture_default_str();
  gradcheck->add_option("--batch", batch, "probe batch size")->capture_default_str();
  gradcheck->add_option("--eps", eps, "finite-difference step")->capture_default_str();
  gradcheck->add_option("--inject-fault", fault, "corrupt the analytic gradient of this group");

  CommonFlags sweep_flags;
  CLI::App* sweep = app.add_subcommand("sweep-k", "train one model per K and tabulate final test accuracy");
  sweep_flags.Add(sweep);
  std::vector<std::size_t> ks;
  std::vector<std::uint64_t> seeds;
  std::size_t jobs = 1;
  sweep->add_option("--k-list", ks, "K values, e.g. 1,2,3")->delimiter(',')->required();
  sweep->add_option("--seeds", seeds, "seeds to average over, e.g. 1,2,3")->delimiter(',');
  sweep->add_option("--jobs", jobs, "worker threads (default 1)");

  CLI::App* compare = app.add_subcommand("compare-trajectories", "align train/test loss trajectories of three models");
  std::string bc_src, base_src, random_src, compare_out;
  std::size_t levels = 20;
  compare->add_option("--branchconnect", bc_src, "config (.json) or metrics (.csv)")->required();
  compare->add_option("--base", base_src, "base model V2 config or metrics");
  compare->add_option("--random", random_src, "Random-Connect config or metrics");
  compare->add_option("--seeds", seeds, "seeds to average configs over")->delimiter(',');
  compare->add_option("--levels", levels, "matched train-loss levels")->capture_default_str();
  compare->add_option("--out", compare_out, "output directory");

  std::vector<std::string> argv_storage{"branchconnect"};
  argv_storage.insert(argv_storage.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (std::string& s : argv_storage) argv.push_back(s.data());

  WarningSink previous = SetWarningSink([&err](const std::string& msg) { err << "warning: " << msg << "\n"; });
  struct RestoreSink {
    WarningSink sink;
    ~RestoreSink() { SetWarningSink(std::move(sink)); }
  } restore{std::move(previous)};

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*reshape) return CmdReshape(arch, m, k, out_path, out, err);
    if (*train) return CmdTrain(train_flags, out);
    if (*eval) return CmdEval(checkpoint, config, split, out);
    if (*inspect) return CmdInspectGates(checkpoint, csv_path, out);
    if (*gradcheck) return CmdGradcheck(arch, gc_m, gc_k, seed, batch, eps, fault, out);
    if (*sweep) return CmdSweepK(sweep_flags, ks, seeds, jobs, out);
    if (*compare) return CmdCompare(bc_src, base_src, random_src, seeds, compare_out, levels, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NonFiniteError& e) {
    err << "error: " << e.what() << "\n";
    return kExitCheckFailed;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitCheckFailed;
  }
  return kExitUsage;
}

}  // namespace branchconnect::cli
