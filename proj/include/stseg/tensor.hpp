#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <initializer_list>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "stseg/error.hpp"

namespace stseg {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

template <typename T>
concept Real = std::is_same_v<T, float> || std::is_same_v<T, double>;

/// Dense row-major array. Value semantics; gradient tracking lives in Var.
template <Real T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    for (auto e : shape_)
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape_));
    data_.assign(numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    for (auto e : shape_)
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape_));
    if (data_.size() != numel(shape_))
      throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                       to_string(shape_));
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t ndim() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // 4-d accessors for [B,C,H,W] style layouts
  T& at(std::size_t a, std::size_t b, std::size_t c, std::size_t d) {
    return data_[((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
  }
  const T& at(std::size_t a, std::size_t b, std::size_t c, std::size_t d) const {
    return data_[((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
  }

  T item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
    return data_[0];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape s) const {
    if (numel(s) != data_.size())
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(s));
    return Tensor(std::move(s), data_);
  }

  template <Real U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  T sum() const { return std::accumulate(data_.begin(), data_.end(), T{0}); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

// ---------------------------------------------------------------------------
// STT1 binary format: "STT1", u32 ndim, ndim x u32 extents, u8 dtype, payload.
// Everything little-endian, no padding.

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <Real T>
constexpr DType dtype_of() {
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

namespace detail {

static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");

inline void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw FormatError("truncated u32");
  return v;
}

}  // namespace detail

template <Real T>
void write_stt(std::ostream& os, const Tensor<T>& t) {
  os.write("STT1", 4);
  detail::write_u32(os, static_cast<std::uint32_t>(t.ndim()));
  for (auto e : t.shape()) detail::write_u32(os, static_cast<std::uint32_t>(e));
  const auto code = static_cast<std::uint8_t>(dtype_of<T>());
  os.write(reinterpret_cast<const char*>(&code), 1);
  os.write(reinterpret_cast<const char*>(t.data().data()),
           static_cast<std::streamsize>(t.size() * sizeof(T)));
  if (!os) throw IoError("failed writing STT1 tensor");
}

namespace detail {

template <Real T, Real U>
Tensor<T> read_payload(std::istream& is, Shape shape) {
  std::vector<U> raw(numel(shape));
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * sizeof(U))))
    throw FormatError("truncated STT1 payload");
  if constexpr (std::is_same_v<T, U>) {
    return Tensor<T>(std::move(shape), std::move(raw));
  } else {
    return Tensor<T>(std::move(shape), std::vector<T>(raw.begin(), raw.end()));
  }
}

}  // namespace detail

/// Reads one STT1 blob, converting to T if the stored dtype differs.
template <Real T>
Tensor<T> read_stt(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "STT1", 4) != 0) throw FormatError("bad STT1 magic");
  const auto ndim = detail::read_u32(is);
  if (ndim > 16) throw FormatError("implausible STT1 rank " + std::to_string(ndim));
  Shape shape(ndim);
  for (auto& e : shape) {
    e = detail::read_u32(is);
    if (e == 0) throw FormatError("zero extent in STT1 header");
  }
  std::uint8_t code = 0xff;
  if (!is.read(reinterpret_cast<char*>(&code), 1)) throw FormatError("truncated STT1 dtype");
  switch (static_cast<DType>(code)) {
    case DType::f32: return detail::read_payload<T, float>(is, std::move(shape));
    case DType::f64: return detail::read_payload<T, double>(is, std::move(shape));
  }
  throw FormatError("unknown STT1 dtype code " + std::to_string(code));
}

template <Real T>
void save_stt(const std::string& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  write_stt(os, t);
}

template <Real T>
Tensor<T> load_stt(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  return read_stt<T>(is);
}

}  // namespace stseg
