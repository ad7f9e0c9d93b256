#ifndef BRANCHCONNECT_TENSOR_H_
#define BRANCHCONNECT_TENSOR_H_

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace branchconnect {

// Build with -DBRANCHCONNECT_FLOAT32 to trade precision for speed. Tests and
// gradient checks assume the default 64-bit mode.
#ifdef BRANCHCONNECT_FLOAT32
using Scalar = float;
#else
using Scalar = double;
#endif

using Shape = std::vector<std::size_t>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

std::string ShapeString(const Shape& shape);
std::size_t NumElements(const Shape& shape);

/// Dense row-major array of Scalars. Value type; the autodiff tape owns the
/// gradient slots that accompany tensors recorded on it.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Scalar fill = 0);
  Tensor(Shape shape, std::vector<Scalar> data);

  static Tensor Scalar0(Scalar value) { return Tensor({1}, {value}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<Scalar> data() { return data_; }
  std::span<const Scalar> data() const { return data_; }
  std::vector<Scalar>& storage() { return data_; }
  const std::vector<Scalar>& storage() const { return data_; }

  Scalar& operator[](std::size_t i) { return data_[i]; }
  Scalar operator[](std::size_t i) const { return data_[i]; }

  Scalar& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w);
  Scalar at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const;

  /// Same data, new shape with the same element count.
  Tensor Reshaped(Shape shape) const;
  void Fill(Scalar value);
  bool AllFinite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<Scalar> data_;
};

void RequireShape(const Tensor& t, const Shape& expected, const char* what);

}  // namespace branchconnect

#endif  // BRANCHCONNECT_TENSOR_H_
