#ifndef BRANCHCONNECT_GATES_H_
#define BRANCHCONNECT_GATES_H_

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "branchconnect/random.h"
#include "branchconnect/tape.h"
#include "branchconnect/tensor.h"

namespace branchconnect {

/// Class-to-branch gates of the gated head: real-valued gates in [0,1],
/// their current binarization, and the gradient w.r.t. the binary gates.
/// All matrices are classes x branches, row-major.
class GateBank {
 public:
  static constexpr Scalar kInitialGate = 0.5;

  GateBank() = default;
  /// Requires 1 <= active <= branches; warns when branches >= classes.
  GateBank(std::size_t classes, std::size_t branches, std::size_t active);

  std::size_t classes() const { return classes_; }
  std::size_t branches() const { return branches_; }
  std::size_t active() const { return active_; }

  Scalar real(std::size_t c, std::size_t m) const { return real_[c * branches_ + m]; }
  std::span<const Scalar> real_row(std::size_t c) const;
  std::span<const Scalar> real_values() const { return real_; }
  /// Throws if any value is outside [0,1] or the size is wrong.
  void set_real_values(std::span<const Scalar> values);

  std::uint8_t binary(std::size_t c, std::size_t m) const { return binary_[c * branches_ + m]; }
  std::span<const std::uint8_t> binary_row(std::size_t c) const;
  std::span<const std::uint8_t> binary_values() const { return binary_; }
  /// Resets row c to zeros, then activates `indices`.
  void SetActive(std::size_t c, std::span<const std::size_t> indices);
  void set_binary_values(std::span<const std::uint8_t> values);

  std::span<Scalar> gate_grad() { return gate_grad_; }
  std::span<const Scalar> gate_grad() const { return gate_grad_; }

  /// Random-Connect mode: binary gates are fixed and never resampled or updated.
  bool frozen() const { return frozen_; }
  void set_frozen(bool frozen) { frozen_ = frozen; }

  /// classes x branches tensor of the binary gates as 0/1 Scalars.
  Tensor BinaryMatrix() const;

  /// Every row has exactly `active` ones and every real gate lies in [0,1].
  bool SatisfiesConstraints() const;

  friend bool operator==(const GateBank&, const GateBank&) = default;

 private:
  std::size_t classes_ = 0;
  std::size_t branches_ = 0;
  std::size_t active_ = 0;
  std::vector<Scalar> real_;
  std::vector<std::uint8_t> binary_;
  std::vector<Scalar> gate_grad_;
  bool frozen_ = false;
};

inline constexpr double kGateProbabilityFloor = 1e-8;

/// Floors each entry at 1e-8 and divides by the row sum. The stored gates are
/// not modified; the result only parameterizes the multinomial.
std::vector<double> NormalizeRow(std::span<const Scalar> real_row);

/// K distinct indices drawn sequentially without replacement: draw from the
/// multinomial, remove the winner, renormalize the rest, repeat. Consumes
/// exactly `k` Uniform01 draws. Indices are returned in draw order.
std::vector<std::size_t> SampleActiveSet(std::span<const double> probs, std::size_t k, Rng& rng);

/// Resamples every row of bank.binary from its normalized real gates.
void BinarizeStochastic(GateBank& bank, Rng& rng);

/// Indices of the `k` largest entries, ties to the lowest index.
std::vector<std::size_t> TopK(std::span<const Scalar> values, std::size_t k);
/// Inference binarization as a matrix; leaves the bank untouched.
Tensor DeterministicBinaryMatrix(const GateBank& bank);
/// Sets bank.binary to the top-K real gates per row. No rng use.
void BinarizeDeterministic(GateBank& bank);

/// real <- clip(real - lr * gate_grad, 0, 1). No momentum, no weight decay.
void UpdateRealGates(GateBank& bank, double gate_lr);

/// F_c = sum_m gates[c,m] * E_m for every class c. `gates` is classes x
/// branches and may hold relaxed (non-binary) coefficients.
std::vector<Tensor> Fuse(const Tensor& gates, std::span<const Tensor> branch_outputs);

enum class HeadKind {
  /// logit_c = w_c . F_c + b_c with F_c flattened per example.
  kFullyConnected,
  /// Per-class 1x1 convolution of the fused map followed by global average pooling.
  kConvGlobalAvg,
};

struct HeadGradients {
  std::vector<Tensor> branch_outputs;  // d loss / d E_m
  Tensor gates;                        // d loss / d g^b, classes x branches
  Tensor weight;
  Tensor bias;
};

/// The gated classifier layer. Each class neuron sees its own fused input F_c.
/// Branch outputs are N x D (fully connected) or N x D x H x W (conv head);
/// weight is D x C and bias C in both cases.
class GatedHead {
 public:
  Tensor Forward(const Tensor& gates, std::span<const Tensor> branch_outputs, const Tensor& weight,
                 const Tensor& bias, HeadKind kind);
  /// Requires a preceding Forward. Gradients are reduced over the batch with
  /// whatever scaling `d_logits` already carries.
  HeadGradients Backward(const Tensor& d_logits) const;

  const std::vector<Tensor>& fused() const;

 private:
  struct Cache {
    Tensor gates;
    std::vector<Tensor> branch_outputs;
    std::vector<Tensor> fused;
    Tensor weight;
    std::size_t batch = 0, depth = 0, spatial = 0;
  };
  std::optional<Cache> cache_;
};

/// Tape-recorded gated head; gradients flow to branch outputs, gates, weight and bias.
Var GatedHeadOp(Tape& tape, std::span<const Var> branch_outputs, Var gates, Var weight, Var bias, HeadKind kind);

}  // namespace branchconnect

#endif  // BRANCHCONNECT_GATES_H_
