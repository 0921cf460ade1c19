#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace tsattn {

// Error taxonomy. The CLI maps these onto exit codes.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ValidationError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ')';
  return os.str();
}

/// Dense row-major tensor of rank 1..4. Spatial feature maps are laid out
/// T-major, then F, then C, with an optional leading batch dimension.
template <typename Scalar>
class Tensor {
 public:
  using value_type = Scalar;

  Tensor() = default;

  explicit Tensor(Shape shape, Scalar fill = Scalar{0}) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (data_.size() != shape_size(shape_))
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, Scalar v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(Scalar v) { return Tensor(Shape{1}, v); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<Scalar> values() & { return data_; }
  std::span<const Scalar> values() const& { return data_; }
  std::span<const Scalar> values() const&& = delete;
  std::vector<Scalar>& storage() { return data_; }
  const std::vector<Scalar>& storage() const { return data_; }

  Scalar& operator[](std::size_t i) { return data_[i]; }
  const Scalar& operator[](std::size_t i) const { return data_[i]; }

  Scalar& at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }
  const Scalar& at(std::initializer_list<std::size_t> idx) const { return data_[offset(idx)]; }

  /// Same data viewed under a new shape of equal size.
  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  template <typename Other>
  Tensor<Other> cast() const {
    std::vector<Other> out(data_.begin(), data_.end());
    return Tensor<Other>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](Scalar v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty() || shape.size() > 4)
      throw ShapeError("tensor rank must be 1..4, got " + std::to_string(shape.size()));
    for (auto d : shape)
      if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_str(shape));
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size()) throw ShapeError("index rank mismatch");
    std::size_t off = 0, k = 0;
    for (auto i : idx) {
      if (i >= shape_[k]) throw std::out_of_range("tensor index out of range");
      off = off * shape_[k++] + i;
    }
    return off;
  }

  Shape shape_;
  std::vector<Scalar> data_;
};

/// Batch/time/frequency/channel view of a rank-3 (T,F,C) or rank-4 (B,T,F,C) shape.
struct MapDims {
  std::size_t batch, time, freq, channels;
  bool batched;

  static MapDims of(const Shape& s, const char* what) {
    if (s.size() == 3) return {1, s[0], s[1], s[2], false};
    if (s.size() == 4) return {s[0], s[1], s[2], s[3], true};
    throw ShapeError(std::string(what) + ": expected rank 3 or 4 feature map, got " + shape_str(s));
  }

  std::size_t plane() const { return time * freq * channels; }

  Shape with(std::size_t t, std::size_t f, std::size_t c) const {
    return batched ? Shape{batch, t, f, c} : Shape{t, f, c};
  }
};

}  // namespace tsattn
