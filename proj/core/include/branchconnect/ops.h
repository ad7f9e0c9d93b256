#ifndef BRANCHCONNECT_OPS_H_
#define BRANCHCONNECT_OPS_H_

#include <cstddef>
#include <span>
#include <vector>

#include "branchconnect/tape.h"
#include "branchconnect/tensor.h"

namespace branchconnect {

enum class PoolKind { kMax, kAvg };

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

struct Pool2dParams {
  std::size_t window = 2;
  std::size_t stride = 2;
  std::size_t pad = 0;
  PoolKind kind = PoolKind::kMax;
};

/// Output extent of a sliding window; throws ShapeError when it is not positive.
std::size_t SlidingOutputSize(std::size_t input, std::size_t window, std::size_t stride, std::size_t pad,
                              const char* what);

namespace kernels {

/// C[m x n] (+)= A[m x k] * B[k x n], all row-major. Fixed loop order keeps
/// reductions bitwise reproducible.
void Gemm(std::span<const Scalar> a, std::span<const Scalar> b, std::span<Scalar> c, std::size_t m,
          std::size_t k, std::size_t n, bool accumulate);
/// C[m x n] (+)= A^T * B with A stored [k x m].
void GemmTransA(std::span<const Scalar> a, std::span<const Scalar> b, std::span<Scalar> c, std::size_t m,
                std::size_t k, std::size_t n, bool accumulate);
/// C[m x n] (+)= A * B^T with B stored [n x k].
void GemmTransB(std::span<const Scalar> a, std::span<const Scalar> b, std::span<Scalar> c, std::size_t m,
                std::size_t k, std::size_t n, bool accumulate);

/// Unfolds one CxHxW image into a (C*kh*kw) x (oh*ow) column matrix whose
/// rows are `row_stride` apart (0 means oh*ow), so several images can share
/// one wide matrix.
void Im2Col(std::span<const Scalar> image, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t kernel_h, std::size_t kernel_w, std::size_t stride, std::size_t pad,
            std::span<Scalar> columns, std::size_t row_stride = 0);
/// Adjoint of Im2Col: scatters-adds columns back into the image buffer.
void Col2Im(std::span<const Scalar> columns, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t kernel_h, std::size_t kernel_w, std::size_t stride, std::size_t pad,
            std::span<Scalar> image, std::size_t row_stride = 0);

}  // namespace kernels

// Differentiable ops. Every op validates shapes and throws ShapeError with
// the offending dimensions.

/// input NxCxHxW, weight OxCxKhxKw, bias O -> NxOxH'xW' (cross-correlation).
Var Conv2d(Tape& tape, Var input, Var weight, Var bias, Conv2dParams params);
/// Max routes the gradient to the first row-major argmax; avg spreads it
/// uniformly. Padding cells are excluded from max and count as zero for avg.
Var Pool2d(Tape& tape, Var input, Pool2dParams params);
/// Mean over all spatial positions: NxCxHxW -> NxC.
Var GlobalAvgPool(Tape& tape, Var input);
/// input NxD, weight DxU, bias U -> NxU.
Var Affine(Tape& tape, Var input, Var weight, Var bias);
/// max(0, x); the subgradient at 0 is 0.
Var Relu(Tape& tape, Var input);
/// NxAxBx... -> Nx(A*B*...).
Var Flatten(Tape& tape, Var input);
/// Elementwise sum of same-shaped tensors.
Var AddN(Tape& tape, std::span<const Var> inputs);
Var Scale(Tape& tape, Var input, Scalar factor);
/// Sum of all elements as a scalar tensor of shape [1].
Var Sum(Tape& tape, Var input);
/// Mean over rows of -log softmax(logits)[label]; logits NxC.
Var SoftmaxCrossEntropy(Tape& tape, Var logits, std::span<const int> labels);

/// Row-wise softmax of an NxC matrix (max-subtracted).
Tensor Softmax(const Tensor& logits);

}  // namespace branchconnect

#endif  // BRANCHCONNECT_OPS_H_
