#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace rashnet {

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

const char* dtype_name(DType dtype);
std::size_t dtype_size(DType dtype);

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// 64-byte aligned storage. Vectorized kernels peel differently depending on
/// where a buffer starts, so a fixed alignment keeps results bit-repeatable.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

/// Dense row-major array of 32- or 64-bit floats.
///
/// Value semantics: copying a Tensor copies its storage. Gradient tracking
/// lives one level up, in Variable.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, DType dtype = DType::f32);

  static Tensor zeros(Shape shape, DType dtype = DType::f32);
  static Tensor full(Shape shape, double value, DType dtype = DType::f32);
  static Tensor from(Shape shape, std::initializer_list<double> values, DType dtype = DType::f32);
  static Tensor from(Shape shape, std::span<const double> values, DType dtype = DType::f32);

  const Shape& shape() const noexcept { return shape_; }
  std::int64_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::int64_t numel() const noexcept { return numel_; }
  DType dtype() const noexcept { return dtype_; }
  bool empty() const noexcept { return numel_ == 0; }

  template <class T>
  std::span<T> data() {
    check_type<T>();
    return std::get<Buffer<T>>(storage_);
  }
  template <class T>
  std::span<const T> data() const {
    check_type<T>();
    return std::get<Buffer<T>>(storage_);
  }

  // Element access through double; convenient in tests and cold paths.
  double get(std::int64_t flat_index) const;
  void set(std::int64_t flat_index, double value);
  std::vector<double> to_vector() const;

  Tensor to(DType dtype) const;
  Tensor reshaped(Shape shape) const;
  void fill(double value);

  std::span<const std::byte> bytes() const;
  bool bit_equal(const Tensor& other) const;
  bool all_finite() const;

 private:
  template <class T>
  void check_type() const {
    constexpr DType want = sizeof(T) == 4 ? DType::f32 : DType::f64;
    if (dtype_ != want) {
      throw std::logic_error(std::string("tensor dtype is ") + dtype_name(dtype_) +
                             ", accessed as " + dtype_name(want));
    }
  }

  Shape shape_;
  std::int64_t numel_ = 0;
  DType dtype_ = DType::f32;
  std::variant<Buffer<float>, Buffer<double>> storage_;
};

/// dst += src, elementwise; shapes and dtypes must match.
void accumulate(Tensor& dst, const Tensor& src);

/// Calls fn.template operator()<T>() with T = float or double.
template <class Fn>
decltype(auto) dispatch_dtype(DType dtype, Fn&& fn) {
  if (dtype == DType::f32) return fn.template operator()<float>();
  return fn.template operator()<double>();
}

}  // namespace rashnet
