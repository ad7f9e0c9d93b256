#include "branchconnect/gates.h"

#include <algorithm>
#include <memory>
#include <numeric>
#include <string>

#include "branchconnect/log.h"

namespace branchconnect {

GateBank::GateBank(std::size_t classes, std::size_t branches, std::size_t active)
    : classes_(classes),
      branches_(branches),
      active_(active),
      real_(classes * branches, kInitialGate),
      binary_(classes * branches, 0),
      gate_grad_(classes * branches, 0) {
  if (classes == 0 || branches == 0) throw Error("gate bank needs at least one class and one branch");
  if (active < 1 || active > branches) {
    throw Error("active connections K=" + std::to_string(active) + " must satisfy 1 <= K <= M=" +
                std::to_string(branches));
  }
  if (branches >= classes) {
    Warn("M=" + std::to_string(branches) + " branches is not below C=" + std::to_string(classes) + " classes");
  }
  // Until the first binarization, the lowest-K branches are active.
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t m = 0; m < active; ++m) binary_[c * branches + m] = 1;
  }
}

std::span<const Scalar> GateBank::real_row(std::size_t c) const {
  return std::span<const Scalar>(real_).subspan(c * branches_, branches_);
}

std::span<const std::uint8_t> GateBank::binary_row(std::size_t c) const {
  return std::span<const std::uint8_t>(binary_).subspan(c * branches_, branches_);
}

void GateBank::set_real_values(std::span<const Scalar> values) {
  if (values.size() != real_.size()) throw Error("gate bank: wrong number of real gate values");
  for (Scalar v : values) {
    if (!(v >= 0 && v <= 1)) throw Error("gate bank: real gate value " + std::to_string(v) + " outside [0,1]");
  }
  std::copy(values.begin(), values.end(), real_.begin());
}

void GateBank::SetActive(std::size_t c, std::span<const std::size_t> indices) {
  std::fill_n(binary_.begin() + c * branches_, branches_, std::uint8_t{0});
  for (std::size_t m : indices) binary_.at(c * branches_ + m) = 1;
}

void GateBank::set_binary_values(std::span<const std::uint8_t> values) {
  if (values.size() != binary_.size()) throw Error("gate bank: wrong number of binary gate values");
  std::copy(values.begin(), values.end(), binary_.begin());
}

Tensor GateBank::BinaryMatrix() const {
  Tensor out({classes_, branches_});
  for (std::size_t i = 0; i < binary_.size(); ++i) out[i] = binary_[i];
  return out;
}

bool GateBank::SatisfiesConstraints() const {
  for (std::size_t c = 0; c < classes_; ++c) {
    std::size_t ones = 0;
    for (std::size_t m = 0; m < branches_; ++m) {
      const std::uint8_t b = binary(c, m);
      if (b > 1) return false;
      ones += b;
    }
    if (ones != active_) return false;
  }
  return std::all_of(real_.begin(), real_.end(), [](Scalar v) { return v >= 0 && v <= 1; });
}

std::vector<double> NormalizeRow(std::span<const Scalar> real_row) {
  std::vector<double> probs(real_row.size());
  double total = 0;
  for (std::size_t m = 0; m < real_row.size(); ++m) {
    probs[m] = std::max(static_cast<double>(real_row[m]), kGateProbabilityFloor);
    total += probs[m];
  }
  for (double& p : probs) p /= total;
  return probs;
}

std::vector<std::size_t> SampleActiveSet(std::span<const double> probs, std::size_t k, Rng& rng) {
  if (k < 1 || k > probs.size()) {
    throw Error("cannot draw " + std::to_string(k) + " distinct samples from " + std::to_string(probs.size()) +
                " branches");
  }
  std::vector<double> remaining(probs.begin(), probs.end());
  std::vector<std::size_t> picked;
  picked.reserve(k);
  for (std::size_t draw = 0; draw < k; ++draw) {
    double mass = 0;
    for (double p : remaining) mass += p;
    const double target = Uniform01(rng) * mass;
    double cumulative = 0;
    std::size_t choice = remaining.size();
    std::size_t last_available = remaining.size();
    for (std::size_t m = 0; m < remaining.size(); ++m) {
      if (remaining[m] <= 0) continue;
      last_available = m;
      cumulative += remaining[m];
      if (target < cumulative) {
        choice = m;
        break;
      }
    }
    // Rounding can leave target at the very top of the range.
    if (choice == remaining.size()) choice = last_available;
    picked.push_back(choice);
    remaining[choice] = 0;
  }
  return picked;
}

void BinarizeStochastic(GateBank& bank, Rng& rng) {
  if (bank.frozen()) return;
  for (std::size_t c = 0; c < bank.classes(); ++c) {
    const std::vector<double> probs = NormalizeRow(bank.real_row(c));
    const std::vector<std::size_t> picked = SampleActiveSet(probs, bank.active(), rng);
    bank.SetActive(c, picked);
  }
}

std::vector<std::size_t> TopK(std::span<const Scalar> values, std::size_t k) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  order.resize(std::min(k, order.size()));
  std::sort(order.begin(), order.end());
  return order;
}

Tensor DeterministicBinaryMatrix(const GateBank& bank) {
  if (bank.frozen()) return bank.BinaryMatrix();
  Tensor out({bank.classes(), bank.branches()});
  for (std::size_t c = 0; c < bank.classes(); ++c) {
    for (std::size_t m : TopK(bank.real_row(c), bank.active())) out[c * bank.branches() + m] = 1;
  }
  return out;
}

void BinarizeDeterministic(GateBank& bank) {
  if (bank.frozen()) return;
  for (std::size_t c = 0; c < bank.classes(); ++c) bank.SetActive(c, TopK(bank.real_row(c), bank.active()));
}

void UpdateRealGates(GateBank& bank, double gate_lr) {
  if (bank.frozen()) return;
  std::vector<Scalar> updated(bank.real_values().begin(), bank.real_values().end());
  auto grad = bank.gate_grad();
  for (std::size_t i = 0; i < updated.size(); ++i) {
    const double v = static_cast<double>(updated[i]) - gate_lr * static_cast<double>(grad[i]);
    updated[i] = static_cast<Scalar>(std::clamp(v, 0.0, 1.0));
  }
  bank.set_real_values(updated);
}

namespace {

void CheckBranchShapes(std::span<const Tensor> branch_outputs) {
  if (branch_outputs.empty()) throw ShapeError("gated head: no branch outputs");
  for (const Tensor& e : branch_outputs) {
    if (e.shape() != branch_outputs[0].shape()) {
      throw ShapeError("branch output shape " + ShapeString(e.shape()) + " differs from " +
                       ShapeString(branch_outputs[0].shape()));
    }
  }
}

}  // namespace

std::vector<Tensor> Fuse(const Tensor& gates, std::span<const Tensor> branch_outputs) {
  CheckBranchShapes(branch_outputs);
  if (gates.rank() != 2 || gates.dim(1) != branch_outputs.size()) {
    throw ShapeError("fuse: gate matrix " + ShapeString(gates.shape()) + " does not match " +
                     std::to_string(branch_outputs.size()) + " branches");
  }
  const std::size_t classes = gates.dim(0), branches = gates.dim(1);
  std::vector<Tensor> fused;
  fused.reserve(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    Tensor f(branch_outputs[0].shape(), 0);
    for (std::size_t m = 0; m < branches; ++m) {
      const Scalar g = gates[c * branches + m];
      if (g == 0) continue;
      const Tensor& e = branch_outputs[m];
      for (std::size_t i = 0; i < f.size(); ++i) f[i] += g * e[i];
    }
    fused.push_back(std::move(f));
  }
  return fused;
}

Tensor GatedHead::Forward(const Tensor& gates, std::span<const Tensor> branch_outputs, const Tensor& weight,
                          const Tensor& bias, HeadKind kind) {
  CheckBranchShapes(branch_outputs);
  const Shape& es = branch_outputs[0].shape();
  if (kind == HeadKind::kFullyConnected && es.size() != 2) {
    throw ShapeError("fully connected gated head expects N x D branch outputs, got " + ShapeString(es));
  }
  if (kind == HeadKind::kConvGlobalAvg && es.size() != 4) {
    throw ShapeError("conv gated head expects N x D x H x W branch outputs, got " + ShapeString(es));
  }
  const std::size_t n = es[0], d = es[1];
  const std::size_t s = es.size() == 4 ? es[2] * es[3] : 1;
  const std::size_t classes = gates.dim(0);
  if (weight.rank() != 2 || weight.dim(0) != d || weight.dim(1) != classes) {
    throw ShapeError("gated head weight " + ShapeString(weight.shape()) + " does not match fused depth " +
                     std::to_string(d) + " and " + std::to_string(classes) + " classes");
  }
  RequireShape(bias, {classes}, "gated head bias");

  Cache cache;
  cache.fused = Fuse(gates, branch_outputs);
  cache.gates = gates;
  cache.branch_outputs.assign(branch_outputs.begin(), branch_outputs.end());
  cache.weight = weight;
  cache.batch = n;
  cache.depth = d;
  cache.spatial = s;

  Tensor logits({n, classes});
  const Scalar inv_s = Scalar{1} / static_cast<Scalar>(s);
  for (std::size_t c = 0; c < classes; ++c) {
    const Tensor& f = cache.fused[c];
    for (std::size_t i = 0; i < n; ++i) {
      Scalar acc = 0;
      for (std::size_t k = 0; k < d; ++k) {
        const Scalar* plane = f.data().data() + (i * d + k) * s;
        Scalar pooled = 0;
        for (std::size_t p = 0; p < s; ++p) pooled += plane[p];
        acc += weight[k * classes + c] * pooled;
      }
      logits[i * classes + c] = acc * inv_s + bias[c];
    }
  }
  cache_ = std::move(cache);
  return logits;
}

const std::vector<Tensor>& GatedHead::fused() const {
  if (!cache_) throw Error("gated head: no cached forward pass");
  return cache_->fused;
}

HeadGradients GatedHead::Backward(const Tensor& d_logits) const {
  if (!cache_) throw Error("gated head: backward called without a cached forward pass");
  const Cache& k = *cache_;
  const std::size_t classes = k.gates.dim(0), branches = k.gates.dim(1);
  const std::size_t n = k.batch, d = k.depth, s = k.spatial;
  RequireShape(d_logits, {n, classes}, "gated head d_logits");
  const Scalar inv_s = Scalar{1} / static_cast<Scalar>(s);
  const Shape& es = k.branch_outputs[0].shape();

  HeadGradients grads;
  grads.branch_outputs.assign(branches, Tensor(es, 0));
  grads.gates = Tensor({classes, branches}, 0);
  grads.weight = Tensor({d, classes}, 0);
  grads.bias = Tensor({classes}, 0);

  Tensor d_fused(es);
  for (std::size_t c = 0; c < classes; ++c) {
    // dF_c[n,d,s] = dlogit[n,c] * w[d,c] / S
    for (std::size_t i = 0; i < n; ++i) {
      const Scalar dl = d_logits[i * classes + c];
      grads.bias[c] += dl;
      for (std::size_t j = 0; j < d; ++j) {
        const Scalar v = dl * k.weight[j * classes + c] * inv_s;
        Scalar* plane = d_fused.data().data() + (i * d + j) * s;
        const Scalar* fplane = k.fused[c].data().data() + (i * d + j) * s;
        Scalar pooled = 0;
        for (std::size_t p = 0; p < s; ++p) {
          plane[p] = v;
          pooled += fplane[p];
        }
        grads.weight[j * classes + c] += dl * pooled * inv_s;
      }
    }
    for (std::size_t m = 0; m < branches; ++m) {
      const Scalar g = k.gates[c * branches + m];
      const Tensor& e = k.branch_outputs[m];
      Tensor& de = grads.branch_outputs[m];
      Scalar dot = 0;
      for (std::size_t i = 0; i < d_fused.size(); ++i) {
        dot += d_fused[i] * e[i];
        de[i] += g * d_fused[i];
      }
      grads.gates[c * branches + m] = dot;
    }
  }
  return grads;
}

Var GatedHeadOp(Tape& tape, std::span<const Var> branch_outputs, Var gates, Var weight, Var bias, HeadKind kind) {
  std::vector<Tensor> es;
  es.reserve(branch_outputs.size());
  for (Var v : branch_outputs) es.push_back(tape.value(v));
  auto head = std::make_shared<GatedHead>();
  Tensor logits = head->Forward(tape.value(gates), es, tape.value(weight), tape.value(bias), kind);

  std::vector<Var> inputs(branch_outputs.begin(), branch_outputs.end());
  inputs.push_back(gates);
  inputs.push_back(weight);
  inputs.push_back(bias);
  auto backward = [head, inputs](Tape& t, const Tensor& g) {
    HeadGradients grads = head->Backward(g);
    const std::size_t m = grads.branch_outputs.size();
    for (std::size_t i = 0; i < m; ++i) t.AccumulateGrad(inputs[i], grads.branch_outputs[i]);
    t.AccumulateGrad(inputs[m], grads.gates);
    t.AccumulateGrad(inputs[m + 1], grads.weight);
    t.AccumulateGrad(inputs[m + 2], grads.bias);
  };
  return tape.Record(std::move(logits), std::move(inputs), std::move(backward), "gated_head");
}

}  // namespace branchconnect
