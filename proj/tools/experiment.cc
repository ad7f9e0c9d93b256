#include "experiment.h"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "branchconnect/arch.h"
#include "branchconnect/grad_check.h"
#include "branchconnect/ops.h"
#include "branchconnect/log.h"

namespace branchconnect::cli {

namespace fs = std::filesystem;

namespace {

std::string Num(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

void RequireKeys(const nlohmann::json& j, const char* where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw UsageError(std::string(where) + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }) == allowed.end()) {
      throw UsageError(std::string("unknown key '") + key + "' in " + where);
    }
  }
}

template <typename T>
void Read(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw UsageError(std::string("config key '") + key + "' has the wrong type");
  }
}

std::size_t ReadCount(const nlohmann::json& j, const char* key, std::size_t fallback) {
  if (!j.contains(key)) return fallback;
  const nlohmann::json& v = j.at(key);
  if (!v.is_number_unsigned()) throw UsageError(std::string("config key '") + key + "' must be a non-negative integer");
  return v.get<std::size_t>();
}

std::string ResolvePath(const std::string& p, const fs::path& base_dir) {
  if (p.empty() || base_dir.empty() || fs::path(p).is_absolute()) return p;
  return (base_dir / p).lexically_normal().string();
}

std::vector<std::string> ReadPaths(const nlohmann::json& j, const char* key, const fs::path& base_dir) {
  std::vector<std::string> out;
  if (!j.contains(key)) return out;
  const nlohmann::json& v = j.at(key);
  if (v.is_string()) {
    out.push_back(v.get<std::string>());
  } else if (v.is_array()) {
    for (const auto& e : v) {
      if (!e.is_string()) throw UsageError(std::string("config key '") + key + "' must hold strings");
      out.push_back(e.get<std::string>());
    }
  } else {
    throw UsageError(std::string("config key '") + key + "' must be a string or a list of strings");
  }
  for (auto& p : out) p = ResolvePath(p, base_dir);
  return out;
}

Dataset Concatenate(std::vector<Dataset> parts, const std::string& name) {
  if (parts.size() == 1) {
    parts.front().name = name;
    return std::move(parts.front());
  }
  Dataset out;
  out.name = name;
  out.classes = parts.front().classes;
  out.height = parts.front().height;
  out.width = parts.front().width;
  std::vector<Scalar> pixels;
  for (const Dataset& d : parts) {
    if (d.height != out.height || d.width != out.width || d.classes != out.classes) {
      throw UsageError("dataset files have different layouts");
    }
    pixels.insert(pixels.end(), d.images.storage().begin(), d.images.storage().end());
    out.labels.insert(out.labels.end(), d.labels.begin(), d.labels.end());
  }
  out.images = Tensor({out.labels.size(), 3, out.height, out.width}, std::move(pixels));
  return out;
}

Dataset Prefix(const Dataset& ds, std::size_t n) {
  if (n >= ds.size()) return ds;
  if (n == 0) throw UsageError("dataset record count must be positive");
  Dataset out = ds;
  out.labels.resize(n);
  std::vector<Scalar> pixels(ds.images.storage().begin(),
                             ds.images.storage().begin() + static_cast<std::ptrdiff_t>(n * ds.image_size()));
  out.images = Tensor({n, 3, ds.height, ds.width}, std::move(pixels));
  return out;
}

Dataset LoadCifarFiles(const std::vector<std::string>& paths, CifarVariant variant, const std::string& name) {
  if (paths.empty()) throw UsageError("CIFAR datasets need train_paths and test_paths");
  std::vector<Dataset> parts;
  for (const std::string& p : paths) {
    if (!fs::exists(p)) throw UsageError("dataset file '" + p + "' does not exist");
    parts.push_back(LoadCifarBinary(p, variant));
  }
  return Concatenate(std::move(parts), name);
}

}  // namespace

std::string BaselineName(Baseline b) {
  switch (b) {
    case Baseline::kNone:
      return "none";
    case Baseline::kBase:
      return "base";
    case Baseline::kRandomConnect:
      return "random_connect";
  }
  return "none";
}

Baseline ParseBaseline(const std::string& text) {
  if (text == "none") return Baseline::kNone;
  if (text == "base" || text == "base_v1" || text == "base_v2") return Baseline::kBase;
  if (text == "random_connect") return Baseline::kRandomConnect;
  throw UsageError("unknown baseline '" + text + "' (none, base_v1, base_v2, random_connect)");
}

nlohmann::ordered_json ToJson(const ExperimentConfig& cfg) {
  nlohmann::ordered_json j;
  j["arch"] = cfg.arch;
  if (cfg.m) j["m"] = *cfg.m;
  if (cfg.k) j["k"] = *cfg.k;
  j["baseline"] = BaselineName(cfg.baseline);
  nlohmann::ordered_json d;
  const DatasetConfig& ds = cfg.dataset;
  d["kind"] = ds.kind;
  if (ds.kind == "synthetic") {
    d["classes"] = ds.classes;
    d["side"] = ds.side;
    d["noise"] = ds.noise;
    d["seed"] = ds.seed;
  } else {
    d["train_paths"] = ds.train_paths;
    d["test_paths"] = ds.test_paths;
  }
  if (ds.train) d["train"] = *ds.train;
  if (ds.test) d["test"] = *ds.test;
  j["dataset"] = d;
  const TrainConfig& t = cfg.train;
  nlohmann::ordered_json tj;
  tj["lr_schedule"] = FormatLrSchedule(t.lr_schedule);
  tj["gate_lr_mult"] = t.gate_lr_multiplier;
  tj["momentum"] = t.momentum;
  tj["weight_decay"] = t.weight_decay;
  tj["batch_size"] = t.batch_size;
  tj["eval_batch_size"] = t.eval_batch_size;
  tj["iters"] = t.max_iters;
  tj["eval_every"] = t.eval_every;
  tj["seed"] = t.seed;
  if (t.preprocess.crop) tj["crop"] = *t.preprocess.crop;
  tj["mirror"] = t.preprocess.mirror;
  tj["record_wall_time"] = t.record_wall_time;
  j["train"] = tj;
  if (!cfg.out.empty()) j["out"] = cfg.out;
  return j;
}

ExperimentConfig FromJson(const nlohmann::json& j, const fs::path& base_dir) {
  RequireKeys(j, "config", {"arch", "m", "k", "baseline", "dataset", "train", "out"});
  ExperimentConfig cfg;
  Read(j, "arch", cfg.arch);
  cfg.arch = ResolvePath(cfg.arch, base_dir);
  if (j.contains("m")) cfg.m = ReadCount(j, "m", 0);
  if (j.contains("k")) cfg.k = ReadCount(j, "k", 0);
  if (j.contains("baseline")) {
    std::string b;
    Read(j, "baseline", b);
    cfg.baseline = ParseBaseline(b);
  }
  if (j.contains("dataset")) {
    const nlohmann::json& d = j.at("dataset");
    RequireKeys(d, "dataset", {"kind", "train_paths", "test_paths", "classes", "train", "test", "side", "noise", "seed"});
    DatasetConfig& ds = cfg.dataset;
    Read(d, "kind", ds.kind);
    if (ds.kind != "synthetic" && ds.kind != "cifar10" && ds.kind != "cifar100") {
      throw UsageError("unknown dataset kind '" + ds.kind + "' (synthetic, cifar10, cifar100)");
    }
    ds.train_paths = ReadPaths(d, "train_paths", base_dir);
    ds.test_paths = ReadPaths(d, "test_paths", base_dir);
    ds.classes = ReadCount(d, "classes", ds.classes);
    if (d.contains("train")) ds.train = ReadCount(d, "train", 0);
    if (d.contains("test")) ds.test = ReadCount(d, "test", 0);
    ds.side = ReadCount(d, "side", ds.side);
    Read(d, "noise", ds.noise);
    ds.seed = ReadCount(d, "seed", ds.seed);
  }
  if (j.contains("train")) {
    const nlohmann::json& t = j.at("train");
    RequireKeys(t, "train",
                {"lr_schedule", "gate_lr_mult", "momentum", "weight_decay", "batch_size", "eval_batch_size", "iters",
                 "eval_every", "seed", "crop", "mirror", "record_wall_time"});
    TrainConfig& tc = cfg.train;
    if (t.contains("lr_schedule")) {
      std::string s;
      Read(t, "lr_schedule", s);
      try {
        tc.lr_schedule = ParseLrSchedule(s);
      } catch (const Error& e) {
        throw UsageError(e.what());
      }
    }
    Read(t, "gate_lr_mult", tc.gate_lr_multiplier);
    Read(t, "momentum", tc.momentum);
    Read(t, "weight_decay", tc.weight_decay);
    tc.batch_size = ReadCount(t, "batch_size", tc.batch_size);
    tc.eval_batch_size = ReadCount(t, "eval_batch_size", tc.eval_batch_size);
    tc.max_iters = ReadCount(t, "iters", tc.max_iters);
    tc.eval_every = ReadCount(t, "eval_every", tc.eval_every);
    tc.seed = ReadCount(t, "seed", tc.seed);
    if (t.contains("crop") && !t.at("crop").is_null()) tc.preprocess.crop = ReadCount(t, "crop", 0);
    Read(t, "mirror", tc.preprocess.mirror);
    Read(t, "record_wall_time", tc.record_wall_time);
  }
  Read(j, "out", cfg.out);
  cfg.out = ResolvePath(cfg.out, base_dir);
  return cfg;
}

ExperimentConfig LoadExperimentConfig(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw UsageError("config '" + path + "': " + e.what());
  }
  return FromJson(j, fs::path(path).parent_path());
}

fs::path DefaultOutputRoot() {
  const char* env = std::getenv("BRANCHCONNECT_OUT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

Datasets LoadDatasets(const DatasetConfig& cfg) {
  Datasets out;
  if (cfg.kind == "synthetic") {
    const std::size_t n_train = cfg.train.value_or(400), n_test = cfg.test.value_or(400);
    if (cfg.classes < 2 || n_train == 0) throw UsageError("synthetic data needs >= 2 classes and training records");
    const std::size_t per_class = (n_train + n_test + cfg.classes - 1) / cfg.classes;
    const Dataset all = GenerateSynthetic(cfg.classes, per_class, cfg.side, cfg.seed, cfg.noise);
    auto [train, test] = Split(all, n_train, n_test, DeriveSeed(cfg.seed, 1));
    out.train = std::move(train);
    out.test = std::move(test);
    return out;
  }
  const CifarVariant variant = cfg.kind == "cifar10" ? CifarVariant::kCifar10 : CifarVariant::kCifar100;
  out.train = LoadCifarFiles(cfg.train_paths, variant, cfg.kind + "-train");
  out.test = LoadCifarFiles(cfg.test_paths, variant, cfg.kind + "-test");
  if (cfg.train) out.train = Prefix(out.train, *cfg.train);
  if (cfg.test) out.test = Prefix(out.test, *cfg.test);
  out.train.mean_image = ComputeMeanImage(out.train);
  out.test.mean_image = out.train.mean_image;
  return out;
}

BranchNetSpec ResolveSpec(const ExperimentConfig& cfg, const Datasets& data) {
  if (cfg.arch.empty()) throw UsageError("no architecture file given (--arch or \"arch\")");
  if (!fs::exists(cfg.arch)) throw UsageError("architecture file '" + cfg.arch + "' does not exist");
  const std::size_t crop = cfg.train.preprocess.crop.value_or(data.train.height);
  const Shape input{3, crop, crop};
  const std::string text = ReadTextFile(cfg.arch);
  BranchNetSpec spec;
  try {
    if (IsSectionedSpec(text)) {
      if (cfg.baseline == Baseline::kBase) throw UsageError("the base baseline needs an unsectioned base arch file");
      spec = ParseBranchNetSpec(text);
      if (cfg.m) spec.branches = *cfg.m;
      if (cfg.k) spec.active = *cfg.k;
      spec.Validate();
    } else {
      const BaseArchSpec base = ParseArchSpec(text, input);
      spec = cfg.baseline == Baseline::kBase ? ReshapeToBranchConnect(base, 1, 1)
                                             : ReshapeToBranchConnect(base, cfg.m.value_or(5), cfg.k.value_or(2));
    }
  } catch (const ParseError& e) {
    throw UsageError(cfg.arch + ": " + e.what());
  }
  if (spec.input_shape != input) {
    throw UsageError("network input " + ShapeString(spec.input_shape) + " does not match the preprocessed data " +
                     ShapeString(input));
  }
  if (spec.num_classes != data.train.classes) {
    throw UsageError("network has " + std::to_string(spec.num_classes) + " outputs but the dataset has " +
                     std::to_string(data.train.classes) + " classes");
  }
  return spec;
}

NetworkState BuildInitialState(const ExperimentConfig& cfg, const BranchNetSpec& spec) {
  NetworkState state = InitNetwork(spec, cfg.train.seed);
  if (cfg.baseline == Baseline::kRandomConnect) MakeRandomConnect(state, spec.active, DeriveSeed(cfg.train.seed, 2));
  return state;
}

RunResult RunTraining(const ExperimentConfig& cfg, const fs::path& out_dir) {
  return RunTraining(cfg, LoadDatasets(cfg.dataset), out_dir);
}

RunResult RunTraining(const ExperimentConfig& cfg, const Datasets& data, const fs::path& out_dir) {
  try {
    cfg.train.Validate();
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  const BranchNetSpec spec = ResolveSpec(cfg, data);
  RunResult result{{}, BuildInitialState(cfg, spec)};
  Rng rng(DeriveSeed(cfg.train.seed, 1));
  result.records = TrainLoop(result.state, data.train, data.test, cfg.train, rng);
  if (out_dir.empty()) return result;

  fs::create_directories(out_dir);
  WriteMetricsCsv((out_dir / "metrics.csv").string(), result.records);
  Checkpoint ckpt{result.state, SerializeRng(rng), {{"data/mean_image", data.train.mean_image}}};
  SaveCheckpoint((out_dir / "checkpoint.bin").string(), ckpt);
  ExperimentConfig resolved = cfg;
  resolved.m = spec.branches;
  resolved.k = spec.active;
  resolved.out = out_dir.string();
  WriteTextFile(out_dir / "config.json", ToJson(resolved).dump(2) + "\n");
  WriteTextFile(out_dir / "network.arch", FormatBranchNetSpec(spec));
  nlohmann::ordered_json meta;
  meta["train"] = nlohmann::ordered_json::parse(DatasetMetadataJson(data.train));
  meta["test"] = nlohmann::ordered_json::parse(DatasetMetadataJson(data.test));
  WriteTextFile(out_dir / "dataset.json", meta.dump(2) + "\n");
  return result;
}

std::vector<std::size_t> NormalizeKList(const std::vector<std::size_t>& ks) {
  std::set<std::size_t> unique(ks.begin(), ks.end());
  if (unique.size() != ks.size()) Warn("duplicate K values removed from the sweep");
  return {unique.begin(), unique.end()};
}

SweepResult RunSweep(const ExperimentConfig& cfg, const std::vector<std::size_t>& ks_in,
                     const std::vector<std::uint64_t>& seeds, const fs::path& out_dir, std::size_t jobs) {
  const std::vector<std::size_t> ks = NormalizeKList(ks_in);
  if (ks.empty() || seeds.empty()) throw UsageError("sweep needs at least one K and one seed");
  const Datasets data = LoadDatasets(cfg.dataset);

  SweepResult result;
  for (std::size_t k : ks) {
    for (std::uint64_t s : seeds) result.runs.push_back({k, s, std::nullopt, std::nullopt, ""});
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < result.runs.size(); i = next++) {
      SweepRow& row = result.runs[i];
      ExperimentConfig run = cfg;
      run.k = row.k;
      run.train.seed = row.seed;
      const fs::path dir =
          out_dir.empty() ? fs::path() : out_dir / ("K" + std::to_string(row.k) + "_seed" + std::to_string(row.seed));
      try {
        const RunResult r = RunTraining(run, data, dir);
        row.final_test_accuracy = r.records.back().test_accuracy;
        row.final_test_loss = r.records.back().test_loss;
      } catch (const std::exception& e) {
        row.error = e.what();
        Warn("sweep run K=" + std::to_string(row.k) + " seed=" + std::to_string(row.seed) + " failed: " + e.what());
      }
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(jobs, 1, result.runs.size());
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }

  for (std::size_t k : ks) {
    double sum = 0;
    std::size_t n = 0;
    for (const SweepRow& row : result.runs) {
      if (row.k == k && row.final_test_accuracy) {
        sum += *row.final_test_accuracy;
        ++n;
      }
    }
    if (n > 0) result.mean_accuracy.emplace_back(k, sum / static_cast<double>(n));
  }
  if (!out_dir.empty()) {
    WriteTextFile(out_dir / "sweep.csv", FormatSweepCsv(result));
    WriteTextFile(out_dir / "sweep_runs.csv", FormatSweepRunsCsv(result));
  }
  return result;
}

std::string FormatSweepCsv(const SweepResult& result) {
  std::string out = "K,final_test_acc\n";
  for (const auto& [k, acc] : result.mean_accuracy) out += std::to_string(k) + "," + Num(acc) + "\n";
  return out;
}

std::string FormatSweepRunsCsv(const SweepResult& result) {
  std::string out = "K,seed,final_test_acc,final_test_loss,status\n";
  for (const SweepRow& row : result.runs) {
    std::string status = row.error.empty() ? "ok" : row.error;
    std::replace(status.begin(), status.end(), ',', ';');
    std::replace(status.begin(), status.end(), '\n', ' ');
    out += std::to_string(row.k) + "," + std::to_string(row.seed) + "," +
           (row.final_test_accuracy ? Num(*row.final_test_accuracy) : "") + "," +
           (row.final_test_loss ? Num(*row.final_test_loss) : "") + "," + status + "\n";
  }
  return out;
}

std::string FormatTrajectoriesCsv(const std::vector<NamedTrajectory>& runs) {
  std::string out = "iter,model,train_loss,test_loss\n";
  for (const NamedTrajectory& run : runs) {
    for (const TrajectoryPoint& p : run.points) {
      out += std::to_string(p.iteration) + "," + run.model + "," + Num(p.train_loss) + "," + Num(p.test_loss) + "\n";
    }
  }
  return out;
}

std::string FormatGapsCsv(const std::vector<std::pair<std::string, LevelComparison>>& comparisons) {
  std::string out = "baseline,level,branchconnect_test_loss,baseline_test_loss,gap\n";
  for (const auto& [name, cmp] : comparisons) {
    for (const MatchedLevel& m : cmp.levels) {
      out += name + "," + Num(m.level) + "," + Num(m.reference_test_loss) + "," + Num(m.baseline_test_loss) + "," +
             Num(m.gap) + "\n";
    }
  }
  return out;
}

void RequireSameCadence(const std::vector<NamedTrajectory>& runs) {
  for (const NamedTrajectory& run : runs) {
    const auto& a = runs.front().points;
    const auto& b = run.points;
    const bool same = a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](const auto& x, const auto& y) {
                        return x.iteration == y.iteration;
                      });
    if (!same) {
      throw UsageError("evaluation cadence of '" + run.model + "' differs from '" + runs.front().model + "'");
    }
  }
}

std::vector<GroupError> CheckNetworkGradients(const BranchNetSpec& spec, std::uint64_t seed, std::size_t batch,
                                              double eps, const std::string& inject_fault) {
  const NetworkState state = InitNetwork(spec, seed);
  const std::size_t params = CountStateParameters(state);
  if (params >= kGradCheckParameterLimit) {
    throw UsageError("network has " + std::to_string(params) + " parameters; gradcheck is limited to fewer than " +
                     std::to_string(kGradCheckParameterLimit));
  }
  if (batch == 0) throw UsageError("gradcheck batch must be positive");
  Rng rng(DeriveSeed(seed, 3));
  Shape image_shape{batch};
  image_shape.insert(image_shape.end(), spec.input_shape.begin(), spec.input_shape.end());
  Tensor images(image_shape);
  for (Scalar& v : images.data()) v = static_cast<Scalar>(StandardNormal(rng));
  std::vector<int> labels(batch);
  for (int& y : labels) y = static_cast<int>(UniformIndex(rng, spec.num_classes));
  Tensor gates({spec.num_classes, spec.branches});
  for (Scalar& g : gates.data()) g = static_cast<Scalar>(0.1 + 0.8 * Uniform01(rng));

  std::vector<std::string> names;
  std::vector<Tensor> inputs;
  for (const auto& [name, value] : state.parameters) {
    names.push_back(name);
    inputs.push_back(value);
  }
  names.push_back("gates");
  inputs.push_back(gates);

  const TapeFunction fn = [&](Tape& tape, std::span<const Var> vars) {
    std::map<std::string, Var> bound;
    for (std::size_t i = 0; i + 1 < vars.size(); ++i) bound[names[i]] = vars[i];
    const Var logits = BuildNetwork(tape, state, images, vars.back(), bound, true);
    return SoftmaxCrossEntropy(tape, logits, labels);
  };
  std::vector<Tensor> analytic = AnalyticGradients(fn, inputs);
  if (!inject_fault.empty()) {
    const auto it = std::find(names.begin(), names.end(), inject_fault);
    if (it == names.end()) throw UsageError("unknown gradient group '" + inject_fault + "'");
    Tensor& g = analytic[static_cast<std::size_t>(it - names.begin())];
    g[0] = g[0] * 1.5 + 1e-3;
  }
  const GradCheckReport report = CompareWithFiniteDifferences(fn, inputs, analytic, eps);
  std::vector<GroupError> out;
  for (std::size_t i = 0; i < names.size(); ++i) out.push_back({names[i], inputs[i].size(), report.per_input_max[i]});
  return out;
}

void WriteTextFile(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
}

std::vector<std::uint8_t> ReadBinaryFile(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace branchconnect::cli
