#pragma once

#include <cstddef>
#include <initializer_list>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace kkl {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array of doubles with an explicit shape.
///
/// Storage is a row-major Eigen matrix. Rank-0 tensors view as 1x1, rank-1
/// tensors as a single row, and rank >= 2 tensors fold all leading extents
/// into the row count.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::span<const double> values);
  Tensor(Shape shape, Matrix storage);

  static Tensor scalar(double value);
  static Tensor vector(std::span<const double> values);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values);
  static Tensor from_matrix(Matrix m);
  static Tensor from_vector(const Vector& v);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return static_cast<std::size_t>(m_.size()); }
  std::size_t rows() const { return static_cast<std::size_t>(m_.rows()); }
  std::size_t cols() const { return static_cast<std::size_t>(m_.cols()); }

  double* data() { return m_.data(); }
  const double* data() const { return m_.data(); }
  std::span<const double> values() const { return {m_.data(), size()}; }
  std::span<double> values() { return {m_.data(), size()}; }

  Matrix& mat() { return m_; }
  const Matrix& mat() const { return m_; }

  double item() const;
  double operator[](std::size_t i) const { return m_.data()[i]; }
  double& operator[](std::size_t i) { return m_.data()[i]; }

  Vector as_vector() const;
  Tensor reshaped(Shape shape) const;
  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b);

 private:
  Shape shape_;
  Matrix m_;
};

/// Named tensors in a deterministic (sorted) order.
using TensorMap = std::map<std::string, Tensor>;

/// Vectorised tanh (absolute error ~1e-16; Eigen's double tanh is scalar).
Matrix tanh_of(const Matrix& m);
Matrix sigmoid_of(const Matrix& m);

/// Keeps freed tape buffers in the heap instead of returning them to the OS.
/// Large graphs re-allocate the same sizes every step, so this avoids page faults.
void tune_allocator();

double squared_norm(const TensorMap& tensors);

}  // namespace kkl
