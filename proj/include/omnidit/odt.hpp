#pragma once

// "ODT1" binary tensor files: magic "ODT1", dtype byte (1 = f32, 2 = f64),
// u32 rank, rank x u32 extents, then the row-major payload. All integers and
// floats little-endian.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "omnidit/tensor.hpp"

namespace omnidit::odt {

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() {
  return DType::f32;
}
template <>
constexpr DType dtype_of<double>() {
  return DType::f64;
}

template <typename T>
std::vector<std::uint8_t> encode(const Tensor<T>& t);

/// Decodes either dtype and converts to T.
template <typename T>
Tensor<T> decode(const std::vector<std::uint8_t>& bytes);

/// Stored dtype of an encoded buffer.
DType peek_dtype(const std::vector<std::uint8_t>& bytes);

template <typename T>
void write(const std::filesystem::path& path, const Tensor<T>& t);

template <typename T>
Tensor<T> read(const std::filesystem::path& path);

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace omnidit::odt
