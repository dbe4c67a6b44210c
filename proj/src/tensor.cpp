// SPDX-License-Identifier: Apache-2.0
#include "memprop/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace memprop {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  if (data_.size() != shape_numel(shape_)) {
    throw ShapeError("data size " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
  }
}

int Tensor::dim(int i) const {
  if (i < 0) i += rank();
  if (i < 0 || i >= rank()) throw ShapeError("dimension index out of range for " + shape_str(shape_));
  return shape_[static_cast<std::size_t>(i)];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  Tensor out;
  out.shape_ = std::move(shape);
  out.data_ = data_;
  return out;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor Tensor::slice0(int n) const {
  if (rank() == 0 || n < 0 || n >= shape_[0]) throw ShapeError("slice0 out of range for " + shape_str(shape_));
  Shape s = shape_;
  s[0] = 1;
  const std::size_t stride = numel() / static_cast<std::size_t>(shape_[0]);
  return Tensor(s, std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(stride * n),
                                       data_.begin() + static_cast<std::ptrdiff_t>(stride * (n + 1))));
}

void Tensor::set_slice0(int n, const Tensor& src) {
  const std::size_t stride = numel() / static_cast<std::size_t>(shape_[0]);
  if (src.numel() != stride || n < 0 || n >= shape_[0]) {
    throw ShapeError("set_slice0: " + shape_str(src.shape()) + " into " + shape_str(shape_));
  }
  std::copy(src.storage().begin(), src.storage().end(), data_.begin() + static_cast<std::ptrdiff_t>(stride * n));
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double Tensor::min() const { return data_.empty() ? 0.0 : *std::min_element(data_.begin(), data_.end()); }
double Tensor::max() const { return data_.empty() ? 0.0 : *std::max_element(data_.begin(), data_.end()); }
double Tensor::sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

Tensor concat0(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat0 of no tensors");
  Shape s = parts.front().shape();
  int total = 0;
  for (const auto& p : parts) {
    Shape tail(p.shape().begin() + 1, p.shape().end());
    Shape ref(s.begin() + 1, s.end());
    if (p.rank() != static_cast<int>(s.size()) || tail != ref) {
      throw ShapeError("concat0: incompatible " + shape_str(p.shape()) + " vs " + shape_str(s));
    }
    total += p.shape()[0];
  }
  s[0] = total;
  std::vector<double> data;
  data.reserve(shape_numel(s));
  for (const auto& p : parts) data.insert(data.end(), p.storage().begin(), p.storage().end());
  return Tensor(s, std::move(data));
}

}  // namespace memprop
