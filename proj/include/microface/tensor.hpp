#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace microface {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Raised when a NaN or Inf shows up in a forward or backward pass.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major tensor. A rank-0 tensor holds a single scalar.
template <typename Real>
class Tensor {
 public:
  using value_type = Real;
  /// Every buffer starts on the same vector-alignment boundary, so Eigen kernels take the same code path
  /// (and summation order) wherever the allocator places it.
  using Storage = std::vector<Real, Eigen::aligned_allocator<Real>>;

  Tensor() : data_(1, Real(0)) {}
  explicit Tensor(Shape shape, Real fill = Real(0));
  Tensor(Shape shape, std::vector<Real> data);

  static Tensor scalar(Real value) { return Tensor(Shape{}, std::vector<Real>{value}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }

  Real* data() { return data_.data(); }
  const Real* data() const { return data_.data(); }
  std::span<Real> values() { return data_; }
  std::span<const Real> values() const { return data_; }
  Storage& storage() { return data_; }
  const Storage& storage() const { return data_; }

  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }

  // Two-dimensional accessors; no bounds checks.
  Real& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  Real at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  Real item() const;

  /// Same payload, new extents. Throws ShapeError if the element count differs.
  Tensor reshaped(Shape shape) const;

  template <typename Other>
  Tensor<Other> cast() const {
    std::vector<Other> out(data_.begin(), data_.end());
    return Tensor<Other>(shape_, std::move(out));
  }

  bool all_finite() const;
  void fill(Real value);

 private:
  Shape shape_;
  Storage data_;
};

// MXT1 on-disk format: "MXT1", u32 rank, u32 extents, f32 payload, all little-endian.
void write_mxt(std::ostream& out, const Tensor<float>& tensor);
Tensor<float> read_mxt(std::istream& in, const std::string& source);
void save_mxt(const std::string& path, const Tensor<float>& tensor);
Tensor<float> load_mxt(const std::string& path);
/// Reads every MXT1 record in a file that holds several concatenated tensors.
std::vector<Tensor<float>> load_mxt_all(const std::string& path);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace microface
