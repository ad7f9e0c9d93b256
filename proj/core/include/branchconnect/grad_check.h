#ifndef BRANCHCONNECT_GRAD_CHECK_H_
#define BRANCHCONNECT_GRAD_CHECK_H_

#include <functional>
#include <span>
#include <vector>

#include "branchconnect/tape.h"

namespace branchconnect {

/// Builds a scalar-valued computation on `tape` from leaf variables holding
/// the checked inputs (in the order they were passed to GradCheck).
using TapeFunction = std::function<Var(Tape& tape, std::span<const Var> inputs)>;

struct GradCheckReport {
  double max_rel_error = 0;
  double mean_rel_error = 0;
  std::size_t coordinates = 0;
  /// Per input: max relative error over that input's coordinates.
  std::vector<double> per_input_max;
};

/// |analytic - numeric| / max(|numeric|, floor).
double RelativeError(double analytic, double numeric, double floor = 1e-8);

/// Compares `analytic` (one tensor per input) against central differences
/// (f(x+eps) - f(x-eps)) / 2eps, one coordinate at a time.
GradCheckReport CompareWithFiniteDifferences(const TapeFunction& fn, const std::vector<Tensor>& inputs,
                                             const std::vector<Tensor>& analytic, double eps = 1e-5);

/// Runs `fn` once with reverse mode, then checks every coordinate of every
/// input. Throws ShapeError if `fn` is not scalar-valued.
GradCheckReport GradCheck(const TapeFunction& fn, const std::vector<Tensor>& inputs, double eps = 1e-5);

/// Analytic gradients of `fn` w.r.t. each input.
std::vector<Tensor> AnalyticGradients(const TapeFunction& fn, const std::vector<Tensor>& inputs);

}  // namespace branchconnect

#endif  // BRANCHCONNECT_GRAD_CHECK_H_
