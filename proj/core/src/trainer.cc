#include "branchconnect/trainer.h"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "branchconnect/arch.h"
#include "branchconnect/ops.h"

namespace branchconnect {

void TrainConfig::Validate() const {
  if (lr_schedule.empty() || lr_schedule.front().iteration != 0) {
    throw Error("learning-rate schedule must start at iteration 0");
  }
  for (std::size_t i = 0; i < lr_schedule.size(); ++i) {
    if (!(lr_schedule[i].rate >= 0) || !std::isfinite(lr_schedule[i].rate)) {
      throw Error("learning rates must be finite and non-negative");
    }
    if (i > 0 && lr_schedule[i].iteration <= lr_schedule[i - 1].iteration) {
      throw Error("learning-rate schedule iterations must be strictly increasing");
    }
  }
  if (!(momentum >= 0 && momentum < 1)) throw Error("momentum must lie in [0, 1)");
  if (weight_decay < 0) throw Error("weight decay must be non-negative");
  if (gate_lr_multiplier < 0) throw Error("gate learning-rate multiplier must be non-negative");
  if (batch_size == 0 || eval_batch_size == 0) throw Error("batch sizes must be positive");
  if (eval_every == 0) throw Error("eval_every must be positive");
}

double TrainConfig::LearningRateAt(std::size_t iteration) const {
  double rate = lr_schedule.front().rate;
  for (const LrStage& stage : lr_schedule) {
    if (stage.iteration <= iteration) rate = stage.rate;
  }
  return rate;
}

namespace {

std::string FormatDouble(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

double ParseDouble(const std::string& s, const char* what) {
  double v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
    throw Error(std::string("invalid ") + what + " '" + s + "'");
  }
  return v;
}

std::vector<std::string> SplitFields(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, sep)) out.push_back(field);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

}  // namespace

std::vector<LrStage> ParseLrSchedule(const std::string& text) {
  std::vector<LrStage> stages;
  for (const std::string& item : SplitFields(text, ',')) {
    const std::size_t colon = item.find(':');
    LrStage stage;
    if (colon == std::string::npos) {
      if (!stages.empty()) throw Error("schedule entries after the first need 'iteration:rate'");
      stage.rate = ParseDouble(item, "learning rate");
    } else {
      stage.iteration = static_cast<std::size_t>(ParseDouble(item.substr(0, colon), "schedule iteration"));
      stage.rate = ParseDouble(item.substr(colon + 1), "learning rate");
    }
    stages.push_back(stage);
  }
  return stages;
}

std::string FormatLrSchedule(const std::vector<LrStage>& schedule) {
  std::string out;
  for (std::size_t i = 0; i < schedule.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(schedule[i].iteration) + ":" + FormatDouble(schedule[i].rate);
  }
  return out;
}

double TrainStep(NetworkState& state, const Batch& batch, const TrainConfig& cfg, double lr, Rng& rng) {
  ForwardPass pass = Forward(state, batch.images, Mode::kTrain, rng);
  Tape& tape = pass.tape;
  Var loss_var = SoftmaxCrossEntropy(tape, pass.logits, batch.labels);
  tape.set_label(loss_var, "loss");
  const double loss = tape.value(loss_var)[0];
  if (!std::isfinite(loss)) {
    const std::optional<Var> bad = tape.FirstNonFinite();
    std::string where = bad ? tape.label(*bad) : std::string("loss");
    if (where.empty()) where = "node " + std::to_string(bad->id);
    throw NonFiniteError("non-finite loss at iteration " + std::to_string(state.iteration) +
                         "; first non-finite tensor: " + where);
  }
  tape.Backward(loss_var);

  for (auto& [name, var] : pass.parameters) {
    Tensor& w = state.parameters.at(name);
    Tensor& v = state.momentum.at(name);
    const Tensor g = tape.grad(var);
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = static_cast<Scalar>(cfg.momentum * v[i] - lr * (g[i] + cfg.weight_decay * w[i]));
      w[i] += v[i];
    }
  }

  const Tensor gate_grad = tape.grad(pass.gates);
  std::copy(gate_grad.data().begin(), gate_grad.data().end(), state.gates.gate_grad().begin());
  UpdateRealGates(state.gates, cfg.gate_lr_multiplier * lr);
  ++state.iteration;
  if (!state.gates.SatisfiesConstraints()) throw Error("gate constraints violated after update");
  return loss;
}

EvalResult Evaluate(const NetworkState& state, const Dataset& ds, std::size_t batch_size,
                    const PreprocessOptions& preprocess) {
  if (ds.size() == 0) throw Error("cannot evaluate on an empty dataset");
  if (batch_size == 0) throw Error("evaluation batch size must be positive");
  Rng unused(0);
  double total_loss = 0;
  std::size_t correct = 0;
  std::vector<std::size_t> indices;
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    indices.clear();
    for (std::size_t i = start; i < std::min(ds.size(), start + batch_size); ++i) indices.push_back(i);
    const Batch batch = Preprocess(ds, indices, preprocess, PreprocessMode::kEval, unused);
    const Tensor logits = InferLogits(state, batch.images);
    Tape tape;
    const Var l = SoftmaxCrossEntropy(tape, tape.Constant(logits), batch.labels);
    total_loss += tape.value(l)[0] * static_cast<double>(indices.size());
    const std::size_t classes = logits.dim(1);
    for (std::size_t i = 0; i < indices.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < classes; ++c) {
        if (logits[i * classes + c] > logits[i * classes + best]) best = c;
      }
      if (static_cast<int>(best) == batch.labels[i]) ++correct;
    }
  }
  return {total_loss / static_cast<double>(ds.size()),
          static_cast<double>(correct) / static_cast<double>(ds.size())};
}

std::vector<std::size_t> BatchSampler::Next(std::size_t batch_size, Rng& rng) {
  if (records_ == 0) throw Error("cannot sample batches from an empty dataset");
  std::vector<std::size_t> out;
  out.reserve(batch_size);
  while (out.size() < batch_size) {
    if (cursor_ == order_.size()) {
      order_.resize(records_);
      for (std::size_t i = 0; i < records_; ++i) order_[i] = i;
      for (std::size_t i = records_; i > 1; --i) std::swap(order_[i - 1], order_[UniformIndex(rng, i)]);
      cursor_ = 0;
    }
    out.push_back(order_[cursor_++]);
  }
  return out;
}

std::vector<MetricsRecord> TrainLoop(NetworkState& state, const Dataset& train, const Dataset& test,
                                     const TrainConfig& cfg, Rng& rng, const StepObserver& observer) {
  cfg.Validate();
  using Clock = std::chrono::steady_clock;
  const auto start = Clock::now();
  auto elapsed_ms = [&]() -> std::int64_t {
    if (!cfg.record_wall_time) return 0;
    return std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - start).count();
  };
  std::vector<MetricsRecord> records;
  auto record = [&](std::size_t iteration, double train_loss) {
    MetricsRecord r;
    r.iteration = iteration;
    r.train_loss = train_loss;
    if (test.size() > 0) {
      const EvalResult e = Evaluate(state, test, cfg.eval_batch_size, cfg.preprocess);
      r.test_loss = e.loss;
      r.test_accuracy = e.accuracy;
    }
    r.lr = cfg.LearningRateAt(iteration);
    r.wall_ms = elapsed_ms();
    records.push_back(r);
  };

  record(0, Evaluate(state, train, cfg.eval_batch_size, cfg.preprocess).loss);
  BatchSampler sampler(train.size());
  double window_loss = 0;
  std::size_t window_steps = 0;
  for (std::size_t it = 0; it < cfg.max_iters; ++it) {
    const std::vector<std::size_t> indices = sampler.Next(cfg.batch_size, rng);
    const Batch batch = Preprocess(train, indices, cfg.preprocess, PreprocessMode::kTrain, rng);
    const double loss = TrainStep(state, batch, cfg, cfg.LearningRateAt(it), rng);
    window_loss += loss;
    ++window_steps;
    if (observer) observer(it + 1, state, loss);
    if ((it + 1) % cfg.eval_every == 0 || it + 1 == cfg.max_iters) {
      record(it + 1, window_loss / static_cast<double>(window_steps));
      window_loss = 0;
      window_steps = 0;
    }
  }
  return records;
}

void MakeRandomConnect(NetworkState& state, std::size_t active, std::uint64_t seed) {
  const std::size_t classes = state.spec.num_classes;
  const std::size_t branches = state.spec.branches;
  GateBank bank(classes, branches, active);
  Rng rng(seed);
  const std::vector<double> uniform(branches, 1.0 / static_cast<double>(branches));
  for (std::size_t c = 0; c < classes; ++c) bank.SetActive(c, SampleActiveSet(uniform, active, rng));
  bank.set_frozen(true);
  state.gates = std::move(bank);
  state.spec.active = active;
}

std::string FormatMetricsCsv(const std::vector<MetricsRecord>& records) {
  std::ostringstream os;
  os << "iter,train_loss,test_loss,test_acc,lr,wall_ms\n";
  for (const MetricsRecord& r : records) {
    os << r.iteration << ',' << FormatDouble(r.train_loss) << ','
       << (r.test_loss ? FormatDouble(*r.test_loss) : "") << ','
       << (r.test_accuracy ? FormatDouble(*r.test_accuracy) : "") << ',' << FormatDouble(r.lr) << ','
       << r.wall_ms << '\n';
  }
  return os.str();
}

std::vector<MetricsRecord> ParseMetricsCsv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "iter,train_loss,test_loss,test_acc,lr,wall_ms") {
    throw FormatError("metrics file does not start with the expected header");
  }
  std::vector<MetricsRecord> records;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> f = SplitFields(line, ',');
    if (f.size() != 6) throw FormatError("malformed metrics row '" + line + "'");
    MetricsRecord r;
    r.iteration = static_cast<std::size_t>(ParseDouble(f[0], "iteration"));
    r.train_loss = ParseDouble(f[1], "train_loss");
    if (!f[2].empty()) r.test_loss = ParseDouble(f[2], "test_loss");
    if (!f[3].empty()) r.test_accuracy = ParseDouble(f[3], "test_acc");
    r.lr = ParseDouble(f[4], "lr");
    r.wall_ms = static_cast<std::int64_t>(ParseDouble(f[5], "wall_ms"));
    records.push_back(r);
  }
  return records;
}

void WriteMetricsCsv(const std::string& path, const std::vector<MetricsRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write metrics file '" + path + "'");
  out << FormatMetricsCsv(records);
}

std::vector<MetricsRecord> ReadMetricsCsv(const std::string& path) { return ParseMetricsCsv(ReadTextFile(path)); }

}  // namespace branchconnect
