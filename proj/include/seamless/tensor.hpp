#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "seamless/errors.hpp"

namespace seamless {

/// Dimensions of a dense NCHW block. Vectors are stored as (n, d, 1, 1),
/// scalars as (1, 1, 1, 1).
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  constexpr std::size_t size() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  constexpr std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  constexpr bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << '(' << n << ',' << c << ',' << h << ',' << w << ')';
    return os.str();
  }
};

inline std::ostream& operator<<(std::ostream& os, const Shape& s) { return os << s.str(); }

/// Dense double-precision NCHW tensor with value semantics.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0) : shape_(shape), data_(shape.size(), fill) {
    if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
      throw ShapeError("negative tensor dimension " + shape.str());
    }
  }
  Tensor(Shape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.size()) {
      throw ShapeError("tensor data size does not match shape " + shape_.str());
    }
  }

  static Tensor scalar(double v) { return Tensor({1, 1, 1, 1}, v); }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double* raw() { return data_.data(); }
  const double* raw() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::size_t index(int n, int c, int y, int x) const {
    assert(n >= 0 && n < shape_.n && c >= 0 && c < shape_.c);
    assert(y >= 0 && y < shape_.h && x >= 0 && x < shape_.w);
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }
  double& at(int n, int c, int y, int x) { return data_[index(n, c, y, x)]; }
  double at(int n, int c, int y, int x) const { return data_[index(n, c, y, x)]; }

  /// Contiguous H*W slice of one (sample, channel) pair.
  std::span<double> plane(int n, int c) {
    return {data_.data() + index(n, c, 0, 0), shape_.plane()};
  }
  std::span<const double> plane(int n, int c) const {
    return {data_.data() + index(n, c, 0, 0), shape_.plane()};
  }

  /// One sample as a (1, C, H, W) tensor.
  Tensor sample(int n) const {
    Shape s{1, shape_.c, shape_.h, shape_.w};
    auto first = data_.begin() + static_cast<std::ptrdiff_t>(n * s.size());
    return Tensor(s, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(s.size())));
  }

  Tensor reshaped(Shape s) const {
    if (s.size() != size()) throw ShapeError("cannot reshape " + shape_.str() + " to " + s.str());
    return Tensor(s, data_);
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    require_same(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }

  double sum() const {
    double s = 0.0;
    for (double v : data_) s += v;
    return s;
  }
  double mean() const { return data_.empty() ? 0.0 : sum() / static_cast<double>(data_.size()); }
  double max_abs() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::abs(v));
    return m;
  }
  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  void require_same(const Tensor& o, const char* what) const {
    if (!(shape_ == o.shape_)) {
      throw ShapeError(std::string(what) + ": shape mismatch " + shape_.str() + " vs " +
                       o.shape_.str());
    }
  }

 private:
  Shape shape_{};
  std::vector<double> data_;
};

/// Concatenate (1, C, H, W) samples along the batch axis.
inline Tensor stack(std::span<const Tensor> samples) {
  if (samples.empty()) throw ShapeError("stack of zero samples");
  Shape s = samples.front().shape();
  std::vector<double> data;
  data.reserve(s.size() * samples.size());
  for (const Tensor& t : samples) {
    if (!(t.shape() == s)) throw ShapeError("stack: members differ in shape");
    data.insert(data.end(), t.data().begin(), t.data().end());
  }
  s.n *= static_cast<int>(samples.size());
  return Tensor(s, std::move(data));
}

}  // namespace seamless
