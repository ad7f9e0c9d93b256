#include "branchconnect/tape.h"

namespace branchconnect {

Var Tape::Constant(Tensor value, std::string label) {
  nodes_.push_back(Node{std::move(value), std::nullopt, false, {}, {}, std::move(label)});
  return Var{nodes_.size() - 1};
}

Var Tape::Parameter(Tensor value, std::string label) {
  nodes_.push_back(Node{std::move(value), std::nullopt, true, {}, {}, std::move(label)});
  return Var{nodes_.size() - 1};
}

Var Tape::Record(Tensor value, std::vector<Var> inputs, BackwardFn backward, std::string label) {
  bool needs = false;
  for (Var in : inputs) needs = needs || node(in).requires_grad;
  if (!needs) backward = nullptr;
  nodes_.push_back(Node{std::move(value), std::nullopt, needs, std::move(inputs), std::move(backward),
                        std::move(label)});
  return Var{nodes_.size() - 1};
}

const Tape::Node& Tape::node(Var v) const {
  if (v.id >= nodes_.size()) throw Error("variable is not recorded on this tape");
  return nodes_[v.id];
}

Tape::Node& Tape::node(Var v) {
  if (v.id >= nodes_.size()) throw Error("variable is not recorded on this tape");
  return nodes_[v.id];
}

const Tensor& Tape::value(Var v) const { return node(v).value; }
bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }
const std::string& Tape::label(Var v) const { return node(v).label; }
void Tape::set_label(Var v, std::string label) { node(v).label = std::move(label); }

Tensor Tape::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad) return *n.grad;
  return Tensor(n.value.shape(), 0);
}

Tensor& Tape::GradBuffer(Var v) {
  Node& n = node(v);
  if (!n.grad) n.grad.emplace(n.value.shape(), 0);
  return *n.grad;
}

void Tape::AccumulateGrad(Var v, const Tensor& g) {
  Node& n = node(v);
  if (!n.requires_grad) return;
  if (g.size() != n.value.size()) {
    throw ShapeError("gradient of size " + std::to_string(g.size()) + " for node of shape " +
                     ShapeString(n.value.shape()));
  }
  Tensor& buf = GradBuffer(v);
  auto dst = buf.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::Backward(Var loss) {
  Node& root = node(loss);
  if (root.value.size() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + ShapeString(root.value.shape()));
  }
  for (Node& n : nodes_) n.grad.reset();
  if (!root.requires_grad) return;
  root.grad.emplace(root.value.shape(), 1);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.grad || !n.backward) continue;
    // nodes_ does not grow during backward, so the reference stays valid.
    n.backward(*this, *n.grad);
  }
}

std::optional<Var> Tape::FirstNonFinite() const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!nodes_[i].value.AllFinite()) return Var{i};
  }
  return std::nullopt;
}

}  // namespace branchconnect
