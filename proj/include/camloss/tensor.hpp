#ifndef CAMLOSS_TENSOR_HPP_
#define CAMLOSS_TENSOR_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <new>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace camloss {

/// Extents of a tensor, outermost first. Images use [batch, channel, height, width].
using Shape = std::vector<std::size_t>;

inline constexpr std::size_t kMaxRank = 4;

inline std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Heap allocations start on a 64-byte boundary. Vectorized kernels peel a prefix that depends on
/// the address, so unaligned buffers would make rounding differ from run to run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

/// Dense row-major array of rank 0..4. Value semantic; no aliasing between copies.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    check_rank();
    values_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, const std::vector<T>& values) : shape_(std::move(shape)), values_(values.begin(), values.end()) {
    check_rank();
    if (values_.size() != shape_size(shape_))
      throw std::invalid_argument("tensor: " + std::to_string(values_.size()) + " values for shape " +
                                  shape_str(shape_));
  }

  Tensor(Shape shape, std::initializer_list<T> values) : Tensor(std::move(shape), std::vector<T>(values)) {}

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return values_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

  T* data() noexcept { return values_.data(); }
  const T* data() const noexcept { return values_.data(); }
  std::span<T> values() noexcept { return values_; }
  std::span<const T> values() const noexcept { return values_; }

  T& operator[](std::size_t i) { return values_[i]; }
  const T& operator[](std::size_t i) const { return values_[i]; }

  /// Multi-index access; the number of indices must equal the rank.
  template <typename... I>
  T& operator()(I... idx) {
    return values_[offset({static_cast<std::size_t>(idx)...})];
  }
  template <typename... I>
  const T& operator()(I... idx) const {
    return values_[offset({static_cast<std::size_t>(idx)...})];
  }

  /// Scalar value of a single-element tensor.
  T item() const {
    if (values_.size() != 1) throw std::invalid_argument("tensor: item() on shape " + shape_str(shape_));
    return values_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != values_.size())
      throw std::invalid_argument("tensor: cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    Tensor out = *this;
    out.shape_ = std::move(shape);
    return out;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(values_.begin(), values_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  void fill(T v) { std::fill(values_.begin(), values_.end(), v); }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.values_ == b.values_;
  }

 private:
  void check_rank() const {
    if (shape_.size() > kMaxRank) throw std::invalid_argument("tensor: rank above 4 " + shape_str(shape_));
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size()) throw std::invalid_argument("tensor: index rank mismatch");
    std::size_t off = 0, d = 0;
    for (auto i : idx) {
      if (i >= shape_[d]) throw std::out_of_range("tensor: index out of range");
      off = off * shape_[d++] + i;
    }
    return off;
  }

  Shape shape_;
  AlignedVector<T> values_;
};

}  // namespace camloss

#endif  // CAMLOSS_TENSOR_HPP_
