#include "coilwatch/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "coilwatch/error.hpp"

namespace coilwatch {

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << "x";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(element_count(shape_), fill) {
  for (std::size_t d : shape_) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + to_string(shape_));
  }
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (std::size_t d : shape_) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + to_string(shape_));
  }
  if (element_count(shape_) != data_.size()) {
    throw DimensionError("shape " + to_string(shape_) + " needs " + std::to_string(element_count(shape_)) +
                         " values, got " + std::to_string(data_.size()));
  }
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t n_rows = rows.size();
  const std::size_t n_cols = n_rows ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(n_rows * n_cols);
  for (const auto& row : rows) {
    if (row.size() != n_cols) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({n_rows, n_cols}, std::move(data));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

double& Tensor::at(std::size_t row, std::size_t col) {
  if (rank() != 2 || row >= shape_[0] || col >= shape_[1]) throw DimensionError("index out of range");
  return data_[row * shape_[1] + col];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  if (rank() != 2 || row >= shape_[0] || col >= shape_[1]) throw DimensionError("index out of range");
  return data_[row * shape_[1] + col];
}

Tensor Tensor::reshaped(Shape shape) const& {
  Tensor copy = *this;
  return std::move(copy).reshaped(std::move(shape));
}

Tensor Tensor::reshaped(Shape shape) && {
  if (element_count(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  }
  shape_ = std::move(shape);
  return std::move(*this);
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double Tensor::sum() const noexcept { return std::accumulate(data_.begin(), data_.end(), 0.0); }

}  // namespace coilwatch
