#include "fsrn/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "fsrn/error.hpp"

namespace fsrn {

std::string Shape::str() const {
  std::ostringstream os;
  os << "(" << n << "," << c << "," << h << "," << w << ")";
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
  if (data_.size() != shape_.size()) {
    throw ShapeError("tensor data size " + std::to_string(data_.size()) +
                     " does not match shape " + shape_.str());
  }
}

Tensor Tensor::vector(std::span<const double> v) {
  return Tensor(Shape{1, static_cast<int>(v.size()), 1, 1}, std::vector<double>(v.begin(), v.end()));
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_.str());
  return data_[0];
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::add_(const Tensor& other) {
  if (other.shape_ != shape_) {
    throw ShapeError("add_ shape mismatch " + shape_.str() + " vs " + other.shape_.str());
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
}

Tensor Tensor::sample(int i) const {
  if (i < 0 || i >= shape_.n) throw ShapeError("sample index out of range");
  Shape s = shape_;
  s.n = 1;
  const auto stride = shape_.sample_size();
  auto first = data_.begin() + static_cast<std::ptrdiff_t>(stride * i);
  return Tensor(s, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(stride)));
}

}  // namespace fsrn
