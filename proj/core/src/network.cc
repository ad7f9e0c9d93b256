#include "branchconnect/network.h"

#include <algorithm>
#include <cmath>

#include "branchconnect/ops.h"

namespace branchconnect {

namespace {

std::string LayerName(const std::string& prefix, std::size_t index) { return prefix + "." + std::to_string(index); }

std::string BranchPrefix(std::size_t m) { return "branch" + std::to_string(m); }

Tensor InitWeights(const Shape& shape, std::size_t fan_in, InitScheme scheme, Rng& rng) {
  const double stddev = scheme == InitScheme::kMsra ? std::sqrt(2.0 / static_cast<double>(fan_in)) : 0.01;
  Tensor w(shape);
  for (Scalar& v : w.data()) v = static_cast<Scalar>(stddev * StandardNormal(rng));
  return w;
}

void AddLayerParameters(NetworkState& state, const std::string& prefix, const Shape& input,
                        const std::vector<LayerSpec>& layers, Rng& rng) {
  const std::vector<Shape> shapes = InferShapes(input, layers);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& layer = layers[i];
    const Shape& in = i == 0 ? input : shapes[i - 1];
    const std::string name = LayerName(prefix, i);
    if (layer.kind == LayerKind::kConv) {
      const std::size_t fan_in = in[0] * layer.kernel * layer.kernel;
      state.parameters[name + ".weight"] =
          InitWeights({layer.outputs, in[0], layer.kernel, layer.kernel}, fan_in, state.spec.init, rng);
      state.parameters[name + ".bias"] = Tensor({layer.outputs}, 0);
    } else if (layer.kind == LayerKind::kFullyConnected) {
      const std::size_t fan_in = NumElements(in);
      state.parameters[name + ".weight"] = InitWeights({fan_in, layer.outputs}, fan_in, state.spec.init, rng);
      state.parameters[name + ".bias"] = Tensor({layer.outputs}, 0);
    }
  }
}

struct Builder {
  const NetworkState& state;
  Tape& tape;
  bool track;
  std::map<std::string, Var>& vars;

  Var Param(const std::string& name) {
    auto it = vars.find(name);
    if (it != vars.end()) return it->second;
    const Tensor& value = state.parameters.at(name);
    Var v = track ? tape.Parameter(value, name) : tape.Constant(value, name);
    vars.emplace(name, v);
    return v;
  }

  Var Run(Var x, const std::string& prefix, const std::vector<LayerSpec>& layers) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const LayerSpec& layer = layers[i];
      const std::string name = LayerName(prefix, i);
      switch (layer.kind) {
        case LayerKind::kConv:
          x = Conv2d(tape, x, Param(name + ".weight"), Param(name + ".bias"), {layer.stride, layer.pad});
          x = Relu(tape, x);
          break;
        case LayerKind::kPool:
          x = layer.global ? GlobalAvgPool(tape, x)
                           : Pool2d(tape, x, {layer.kernel, layer.stride, layer.pad, layer.pool});
          break;
        case LayerKind::kFullyConnected:
          if (tape.value(x).rank() != 2) x = Flatten(tape, x);
          x = Affine(tape, x, Param(name + ".weight"), Param(name + ".bias"));
          x = Relu(tape, x);
          break;
        case LayerKind::kLrn:
          break;
      }
      tape.set_label(x, name);
    }
    return x;
  }
};

void CheckImages(const BranchNetSpec& spec, const Tensor& images) {
  Shape expected = spec.input_shape;
  if (images.rank() != expected.size() + 1 || !std::equal(expected.begin(), expected.end(), images.shape().begin() + 1)) {
    throw ShapeError("batch shape " + ShapeString(images.shape()) + " does not match network input " +
                     ShapeString(expected));
  }
}

// Stem once, then every branch on the stem output; branch outputs are
// flattened for a fully connected head.
void RunTrunk(Tape& tape, Builder& b, const NetworkState& state, const Tensor& images, std::vector<Var>& branches,
              Var& stem) {
  const BranchNetSpec& spec = state.spec;
  CheckImages(spec, images);
  Var x = tape.Constant(images, "input");
  stem = b.Run(x, "stem", spec.stem);
  branches.clear();
  for (std::size_t m = 0; m < spec.branches; ++m) {
    Var e = b.Run(stem, BranchPrefix(m), spec.branch);
    if (spec.head == HeadKind::kFullyConnected && tape.value(e).rank() != 2) e = Flatten(tape, e);
    tape.set_label(e, BranchPrefix(m) + ".output");
    branches.push_back(e);
  }
}

}  // namespace

NetworkState InitNetwork(const BranchNetSpec& spec_in, std::uint64_t seed) {
  NetworkState state;
  state.spec = spec_in;
  state.spec.Validate();
  state.seed = seed;
  const BranchNetSpec& spec = state.spec;
  Rng rng(seed);
  AddLayerParameters(state, "stem", spec.input_shape, spec.stem, rng);
  for (std::size_t m = 0; m < spec.branches; ++m) {
    AddLayerParameters(state, BranchPrefix(m), spec.stem_output, spec.branch, rng);
  }
  state.parameters["head.weight"] =
      InitWeights({spec.head_depth, spec.num_classes}, spec.head_depth, spec.init, rng);
  state.parameters["head.bias"] = Tensor({spec.num_classes}, 0);
  for (const auto& [name, value] : state.parameters) state.momentum[name] = Tensor(value.shape(), 0);
  state.gates = GateBank(spec.num_classes, spec.branches, spec.active);
  return state;
}

std::size_t CountStateParameters(const NetworkState& state) {
  std::size_t n = 0;
  for (const auto& [name, value] : state.parameters) n += value.size();
  return n;
}

Var BuildNetwork(Tape& tape, const NetworkState& state, const Tensor& images, Var gates,
                 std::map<std::string, Var>& params, bool track_gradients, std::vector<Var>* branch_outputs,
                 Var* stem_output) {
  Builder b{state, tape, track_gradients, params};
  std::vector<Var> branches;
  Var stem;
  RunTrunk(tape, b, state, images, branches, stem);
  Var logits = GatedHeadOp(tape, branches, gates, b.Param("head.weight"), b.Param("head.bias"), state.spec.head);
  tape.set_label(logits, "logits");
  if (branch_outputs) *branch_outputs = branches;
  if (stem_output) *stem_output = stem;
  return logits;
}

ForwardPass ForwardWithGates(const NetworkState& state, const Tensor& images, const Tensor& gates,
                             bool track_gradients) {
  RequireShape(gates, {state.spec.num_classes, state.spec.branches}, "gate matrix");
  ForwardPass pass;
  pass.gates = track_gradients ? pass.tape.Parameter(gates, "gates") : pass.tape.Constant(gates, "gates");
  pass.logits = BuildNetwork(pass.tape, state, images, pass.gates, pass.parameters, track_gradients,
                             &pass.branch_outputs, &pass.stem_output);
  return pass;
}

ForwardPass Forward(NetworkState& state, const Tensor& images, Mode mode, Rng& rng) {
  if (mode == Mode::kTrain) {
    BinarizeStochastic(state.gates, rng);
    return ForwardWithGates(state, images, state.gates.BinaryMatrix(), true);
  }
  return ForwardWithGates(state, images, DeterministicBinaryMatrix(state.gates), false);
}

Tensor InferLogits(const NetworkState& state, const Tensor& images) {
  ForwardPass pass = ForwardWithGates(state, images, DeterministicBinaryMatrix(state.gates), false);
  return pass.tape.value(pass.logits);
}

Tensor SumFusionLogits(const NetworkState& state, const Tensor& images) {
  const BranchNetSpec& spec = state.spec;
  ForwardPass pass;
  Builder b{state, pass.tape, false, pass.parameters};
  RunTrunk(pass.tape, b, state, images, pass.branch_outputs, pass.stem_output);
  Tape& tape = pass.tape;
  Var summed = AddN(tape, pass.branch_outputs);
  Var weight = b.Param("head.weight");
  Var bias = b.Param("head.bias");
  if (spec.head == HeadKind::kFullyConnected) return tape.value(Affine(tape, summed, weight, bias));
  // 1x1 convolution with kernel[c, d] = head.weight[d, c], then global pooling.
  const Tensor& w = tape.value(weight);
  Tensor kernel({spec.num_classes, spec.head_depth, 1, 1});
  for (std::size_t d = 0; d < spec.head_depth; ++d) {
    for (std::size_t c = 0; c < spec.num_classes; ++c) kernel[c * spec.head_depth + d] = w[d * spec.num_classes + c];
  }
  Var conv = Conv2d(tape, summed, tape.Constant(kernel), bias, {1, 0});
  return tape.value(GlobalAvgPool(tape, conv));
}

}  // namespace branchconnect
