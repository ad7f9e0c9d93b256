#include "branchconnect/grad_check.h"

#include <algorithm>
#include <cmath>

namespace branchconnect {

namespace {

Scalar Evaluate(const TapeFunction& fn, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const Tensor& t : inputs) vars.push_back(tape.Constant(t));
  const Tensor& out = tape.value(fn(tape, vars));
  if (out.size() != 1) throw ShapeError("grad_check: function output is not scalar: " + ShapeString(out.shape()));
  return out[0];
}

}  // namespace

double RelativeError(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max(std::abs(numeric), floor);
}

std::vector<Tensor> AnalyticGradients(const TapeFunction& fn, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const Tensor& t : inputs) vars.push_back(tape.Parameter(t));
  Var out = fn(tape, vars);
  tape.Backward(out);
  std::vector<Tensor> grads;
  grads.reserve(vars.size());
  for (Var v : vars) grads.push_back(tape.grad(v));
  return grads;
}

GradCheckReport CompareWithFiniteDifferences(const TapeFunction& fn, const std::vector<Tensor>& inputs,
                                             const std::vector<Tensor>& analytic, double eps) {
  GradCheckReport report;
  report.per_input_max.assign(inputs.size(), 0.0);
  std::vector<Tensor> probe = inputs;
  double total = 0;
  for (std::size_t k = 0; k < probe.size(); ++k) {
    for (std::size_t i = 0; i < probe[k].size(); ++i) {
      const Scalar saved = probe[k][i];
      probe[k][i] = saved + static_cast<Scalar>(eps);
      const double plus = Evaluate(fn, probe);
      probe[k][i] = saved - static_cast<Scalar>(eps);
      const double minus = Evaluate(fn, probe);
      probe[k][i] = saved;
      const double numeric = (plus - minus) / (2 * eps);
      const double err = RelativeError(analytic[k][i], numeric);
      report.per_input_max[k] = std::max(report.per_input_max[k], err);
      report.max_rel_error = std::max(report.max_rel_error, err);
      total += err;
      ++report.coordinates;
    }
  }
  if (report.coordinates) report.mean_rel_error = total / static_cast<double>(report.coordinates);
  return report;
}

GradCheckReport GradCheck(const TapeFunction& fn, const std::vector<Tensor>& inputs, double eps) {
  return CompareWithFiniteDifferences(fn, inputs, AnalyticGradients(fn, inputs), eps);
}

}  // namespace branchconnect
