#include "kkl/diffcore/tensor.hpp"

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include <algorithm>
#include <sstream>

#include "kkl/error.hpp"

namespace kkl {

namespace {

std::pair<Eigen::Index, Eigen::Index> view_dims(const Shape& shape) {
  if (shape.empty()) return {1, 1};
  if (shape.size() == 1) return {1, static_cast<Eigen::Index>(shape[0])};
  std::size_t rows = 1;
  for (std::size_t i = 0; i + 1 < shape.size(); ++i) rows *= shape[i];
  return {static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(shape.back())};
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor() : Tensor(Shape{0}) {}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  auto [r, c] = view_dims(shape_);
  m_ = Matrix::Zero(r, c);
}

Tensor::Tensor(Shape shape, std::span<const double> values) : Tensor(std::move(shape)) {
  if (values.size() != size()) {
    throw ShapeError("tensor of shape " + shape_string(shape_) + " given " +
                     std::to_string(values.size()) + " values");
  }
  std::copy(values.begin(), values.end(), m_.data());
}

Tensor::Tensor(Shape shape, Matrix storage) : shape_(std::move(shape)), m_(std::move(storage)) {
  auto [r, c] = view_dims(shape_);
  if (static_cast<std::size_t>(m_.size()) != shape_size(shape_)) {
    throw ShapeError("tensor of shape " + shape_string(shape_) + " given " +
                     std::to_string(m_.size()) + " values");
  }
  if (m_.rows() != r || m_.cols() != c) m_.resize(r, c);
}

Tensor Tensor::scalar(double value) {
  Tensor t(Shape{});
  t.m_(0, 0) = value;
  return t;
}

Tensor Tensor::vector(std::span<const double> values) { return Tensor(Shape{values.size()}, values); }

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor(Shape{values.size()}, std::span<const double>(values.begin(), values.size()));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
  return Tensor(Shape{rows, cols}, std::span<const double>(values.begin(), values.size()));
}

Tensor Tensor::from_matrix(Matrix m) {
  Shape s{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())};
  return Tensor(std::move(s), std::move(m));
}

Tensor Tensor::from_vector(const Vector& v) {
  return Tensor::vector(std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
  return m_(0, 0);
}

Vector Tensor::as_vector() const {
  return Eigen::Map<const Vector>(m_.data(), m_.size());
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != size()) {
    throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return Tensor(std::move(shape), values());
}

bool Tensor::all_finite() const { return m_.allFinite(); }

Matrix tanh_of(const Matrix& m) {
  const auto t = (-2.0 * m.array().abs()).exp();
  return m.array().sign() * (1.0 - t) / (1.0 + t);
}

Matrix sigmoid_of(const Matrix& m) { return 1.0 / (1.0 + (-m.array()).exp()); }

void tune_allocator() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

bool operator==(const Tensor& a, const Tensor& b) {
  return a.shape_ == b.shape_ && std::equal(a.values().begin(), a.values().end(), b.values().begin());
}

double squared_norm(const TensorMap& tensors) {
  double s = 0.0;
  for (const auto& [name, t] : tensors) s += t.mat().squaredNorm();
  return s;
}

}  // namespace kkl
