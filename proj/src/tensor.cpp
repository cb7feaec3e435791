#include "rashnet/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace rashnet {

const char* dtype_name(DType dtype) {
  return dtype == DType::f32 ? "f32" : "f64";
}

std::size_t dtype_size(DType dtype) {
  return dtype == DType::f32 ? 4 : 8;
}

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) {
    if (e <= 0) throw ShapeError("shape extents must be positive, got " + shape_str(shape));
    n *= e;
  }
  return n;
}

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

Tensor::Tensor(Shape shape, DType dtype) : shape_(std::move(shape)), dtype_(dtype) {
  numel_ = shape_numel(shape_);
  if (dtype_ == DType::f32) {
    storage_ = Buffer<float>(static_cast<std::size_t>(numel_), 0.0f);
  } else {
    storage_ = Buffer<double>(static_cast<std::size_t>(numel_), 0.0);
  }
}

Tensor Tensor::zeros(Shape shape, DType dtype) {
  return Tensor(std::move(shape), dtype);
}

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  Tensor t(std::move(shape), dtype);
  t.fill(value);
  return t;
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> values, DType dtype) {
  return from(std::move(shape), std::span<const double>(values.begin(), values.size()), dtype);
}

Tensor Tensor::from(Shape shape, std::span<const double> values, DType dtype) {
  Tensor t(std::move(shape), dtype);
  if (static_cast<std::int64_t>(values.size()) != t.numel()) {
    throw ShapeError("Tensor::from: " + std::to_string(values.size()) + " values for shape " +
                     shape_str(t.shape()));
  }
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, values[static_cast<std::size_t>(i)]);
  return t;
}

double Tensor::get(std::int64_t i) const {
  if (i < 0 || i >= numel_) throw std::out_of_range("tensor index out of range");
  return dispatch_dtype(dtype_, [&]<class T>() { return static_cast<double>(data<T>()[i]); });
}

void Tensor::set(std::int64_t i, double value) {
  if (i < 0 || i >= numel_) throw std::out_of_range("tensor index out of range");
  dispatch_dtype(dtype_, [&]<class T>() { data<T>()[i] = static_cast<T>(value); });
}

std::vector<double> Tensor::to_vector() const {
  std::vector<double> out(static_cast<std::size_t>(numel_));
  dispatch_dtype(dtype_, [&]<class T>() {
    auto src = data<T>();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = src[i];
  });
  return out;
}

Tensor Tensor::to(DType dtype) const {
  if (dtype == dtype_) return *this;
  Tensor out(shape_, dtype);
  if (dtype == DType::f32) {
    auto src = data<double>();
    auto dst = out.data<float>();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<float>(src[i]);
  } else {
    auto src = data<float>();
    auto dst = out.data<double>();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i];
  }
  return out;
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel_) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  Tensor out = *this;
  out.shape_ = std::move(shape);
  return out;
}

void Tensor::fill(double value) {
  dispatch_dtype(dtype_, [&]<class T>() {
    for (auto& v : data<T>()) v = static_cast<T>(value);
  });
}

std::span<const std::byte> Tensor::bytes() const {
  return dispatch_dtype(dtype_, [&]<class T>() { return std::as_bytes(data<T>()); });
}

bool Tensor::bit_equal(const Tensor& other) const {
  if (shape_ != other.shape_ || dtype_ != other.dtype_) return false;
  auto a = bytes();
  auto b = other.bytes();
  return a.size() == b.size() && (a.empty() || std::memcmp(a.data(), b.data(), a.size()) == 0);
}

bool Tensor::all_finite() const {
  return dispatch_dtype(dtype_, [&]<class T>() {
    for (T v : data<T>()) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  });
}

void accumulate(Tensor& dst, const Tensor& src) {
  if (dst.shape() != src.shape() || dst.dtype() != src.dtype()) {
    throw ShapeError("accumulate: " + shape_str(dst.shape()) + " vs " + shape_str(src.shape()));
  }
  dispatch_dtype(dst.dtype(), [&]<class T>() {
    auto d = dst.data<T>();
    auto s = src.data<T>();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
  });
}

}  // namespace rashnet
