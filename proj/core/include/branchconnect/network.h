#ifndef BRANCHCONNECT_NETWORK_H_
#define BRANCHCONNECT_NETWORK_H_

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "branchconnect/arch.h"
#include "branchconnect/gates.h"
#include "branchconnect/random.h"
#include "branchconnect/tape.h"

namespace branchconnect {

/// Trainable state of a gated multi-branch network. Parameter names:
/// "stem.<layer>.{weight,bias}", "branch<m>.<layer>.{weight,bias}",
/// "head.{weight,bias}". Conv weights are OxIxKxK, FC and head weights DxU.
struct NetworkState {
  BranchNetSpec spec;
  std::map<std::string, Tensor> parameters;
  std::map<std::string, Tensor> momentum;
  GateBank gates;
  std::uint64_t seed = 0;
  std::uint64_t iteration = 0;
};

/// Weights from the spec's init scheme, zero biases, zero momentum, all real
/// gates at 0.5. The same seed always yields the same state.
NetworkState InitNetwork(const BranchNetSpec& spec, std::uint64_t seed);

std::size_t CountStateParameters(const NetworkState& state);

enum class Mode { kTrain, kInfer };

struct ForwardPass {
  Tape tape;
  Var logits;
  Var gates;  // classes x branches gate coefficients used by the head
  Var stem_output;
  std::vector<Var> branch_outputs;
  std::map<std::string, Var> parameters;
};

/// Records the whole network on `tape` and returns the logits. Parameters
/// already present in `params` are used as given (this is how gradient checks
/// substitute perturbed tensors); missing ones are added from `state`, as
/// differentiable leaves when `track_gradients`. Fills `branch_outputs`.
Var BuildNetwork(Tape& tape, const NetworkState& state, const Tensor& images, Var gates,
                 std::map<std::string, Var>& params, bool track_gradients, std::vector<Var>* branch_outputs = nullptr,
                 Var* stem_output = nullptr);

/// Runs stem, branches and the gated head with an explicit gate matrix, which
/// may hold relaxed coefficients. With `track_gradients`, parameters and the
/// gate matrix are differentiable leaves.
ForwardPass ForwardWithGates(const NetworkState& state, const Tensor& images, const Tensor& gates,
                             bool track_gradients);

/// Train mode resamples the binary gates stochastically (updating
/// state.gates) and tracks gradients. Infer mode uses top-K gates, leaves the
/// state untouched and consumes no randomness.
ForwardPass Forward(NetworkState& state, const Tensor& images, Mode mode, Rng& rng);

/// Deterministic inference logits.
Tensor InferLogits(const NetworkState& state, const Tensor& images);

/// Logits of the ungated network whose head reads sum_m E_m through a plain
/// fully connected layer (or 1x1 conv + global pooling) with the head
/// parameters. Equals the gated model when K = M.
Tensor SumFusionLogits(const NetworkState& state, const Tensor& images);

}  // namespace branchconnect

#endif  // BRANCHCONNECT_NETWORK_H_
