#ifndef BRANCHCONNECT_TAPE_H_
#define BRANCHCONNECT_TAPE_H_

#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "branchconnect/tensor.h"

namespace branchconnect {

/// Handle to a node on a Tape. Only meaningful for the tape that issued it.
struct Var {
  static constexpr std::size_t kInvalid = std::numeric_limits<std::size_t>::max();
  std::size_t id = kInvalid;
};

class Tape;

/// Receives the gradient of the node's output and accumulates into its inputs
/// through Tape::AccumulateGrad.
using BackwardFn = std::function<void(Tape& tape, const Tensor& out_grad)>;

/// Reverse-mode autodiff record. Nodes are appended in evaluation order, so
/// the node list is always topologically sorted.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  Var Constant(Tensor value, std::string label = {});
  Var Parameter(Tensor value, std::string label = {});

  /// Appends an op result. `backward` is dropped when no input needs a gradient.
  Var Record(Tensor value, std::vector<Var> inputs, BackwardFn backward, std::string label = {});

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  const std::string& label(Var v) const;
  void set_label(Var v, std::string label);

  /// Gradient accumulated by the last Backward(); zeros if the node received none.
  Tensor grad(Var v) const;
  void AccumulateGrad(Var v, const Tensor& g);
  /// Raw accumulation buffer; allocated on first use, zero-initialized.
  Tensor& GradBuffer(Var v);

  /// Seeds d(loss)/d(loss) = 1 and walks nodes in reverse insertion order.
  /// Clears gradients from any previous pass first.
  void Backward(Var loss);

  /// First node (in evaluation order) holding a NaN/Inf, if any.
  std::optional<Var> FirstNonFinite() const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::optional<Tensor> grad;
    bool requires_grad = false;
    std::vector<Var> inputs;
    BackwardFn backward;
    std::string label;
  };

  const Node& node(Var v) const;
  Node& node(Var v);

  std::vector<Node> nodes_;
};

}  // namespace branchconnect

#endif  // BRANCHCONNECT_TAPE_H_
