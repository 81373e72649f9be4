#pragma once

// ZTEN tensor files:
//   bytes 0..3  "ZTEN"
//   u8          dtype (0 = f32, 1 = f64)
//   u8          rank
//   rank x u32  extents, little endian
//   payload     row-major, little endian

#include <cstdint>
#include <filesystem>
#include <iosfwd>

#include "zipmap/tensor.hpp"

namespace zipmap {

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1 };

template <typename T>
void write_zten(std::ostream& out, const Tensor<T>& tensor);
template <typename T>
void save_zten(const std::filesystem::path& path, const Tensor<T>& tensor);

// Reads a tensor of either dtype, converting to T when the stored dtype differs.
template <typename T>
Tensor<T> read_zten(std::istream& in, const std::string& origin = "<stream>");
template <typename T>
Tensor<T> load_zten(const std::filesystem::path& path);

DType zten_dtype(const std::filesystem::path& path);

}  // namespace zipmap
