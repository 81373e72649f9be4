#include "zipmap/zten.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

namespace zipmap {

namespace {

constexpr std::array<char, 4> kMagic{'Z', 'T', 'E', 'N'};

template <typename U>
void put_le(std::ostream& out, U value) {
  std::array<char, sizeof(U)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.write(bytes.data(), sizeof(U));
}

template <typename U>
U get_le(std::istream& in, const std::string& origin) {
  std::array<char, sizeof(U)> bytes;
  if (!in.read(bytes.data(), sizeof(U))) throw FormatError(origin + ": truncated ZTEN data");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  U value;
  std::memcpy(&value, bytes.data(), sizeof(U));
  return value;
}

template <typename Stored, typename T>
std::vector<T> read_payload(std::istream& in, std::size_t count, const std::string& origin) {
  std::vector<T> values(count);
  if constexpr (std::endian::native == std::endian::little && std::is_same_v<Stored, T>) {
    if (count && !in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(count * sizeof(T))))
      throw FormatError(origin + ": truncated ZTEN payload");
  } else {
    for (auto& v : values) v = static_cast<T>(get_le<Stored>(in, origin));
  }
  return values;
}

}  // namespace

template <typename T>
void write_zten(std::ostream& out, const Tensor<T>& tensor) {
  out.write(kMagic.data(), kMagic.size());
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(std::is_same_v<T, float> ? DType::kF32 : DType::kF64));
  if (tensor.rank() > 255) throw FormatError("ZTEN rank above 255");
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(tensor.rank()));
  for (Index e : tensor.shape()) {
    if (e > std::numeric_limits<std::uint32_t>::max()) throw FormatError("ZTEN extent exceeds u32");
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e));
  }
  const auto data = tensor.data();
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size_bytes()));
  } else {
    for (T v : data) put_le<T>(out, v);
  }
}

template <typename T>
void save_zten(const std::filesystem::path& path, const Tensor<T>& tensor) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_zten(out, tensor);
  if (!out) throw FormatError("failed writing " + path.string());
}

template <typename T>
Tensor<T> read_zten(std::istream& in, const std::string& origin) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) throw FormatError(origin + ": not a ZTEN file");
  const auto dtype = get_le<std::uint8_t>(in, origin);
  const auto rank = get_le<std::uint8_t>(in, origin);
  Shape shape(rank);
  for (auto& e : shape) e = static_cast<Index>(get_le<std::uint32_t>(in, origin));
  const auto count = static_cast<std::size_t>(shape_numel(shape));
  std::vector<T> values;
  if (dtype == static_cast<std::uint8_t>(DType::kF32))
    values = read_payload<float, T>(in, count, origin);
  else if (dtype == static_cast<std::uint8_t>(DType::kF64))
    values = read_payload<double, T>(in, count, origin);
  else
    throw FormatError(origin + ": unknown ZTEN dtype code " + std::to_string(dtype));
  return Tensor<T>(std::move(shape), std::move(values));
}

template <typename T>
Tensor<T> load_zten(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return read_zten<T>(in, path.string());
}

DType zten_dtype(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) throw FormatError(path.string() + ": not a ZTEN file");
  const auto code = get_le<std::uint8_t>(in, path.string());
  if (code > 1) throw FormatError(path.string() + ": unknown ZTEN dtype code");
  return static_cast<DType>(code);
}

template void write_zten(std::ostream&, const Tensor<float>&);
template void write_zten(std::ostream&, const Tensor<double>&);
template void save_zten(const std::filesystem::path&, const Tensor<float>&);
template void save_zten(const std::filesystem::path&, const Tensor<double>&);
template Tensor<float> read_zten(std::istream&, const std::string&);
template Tensor<double> read_zten(std::istream&, const std::string&);
template Tensor<float> load_zten(const std::filesystem::path&);
template Tensor<double> load_zten(const std::filesystem::path&);

}  // namespace zipmap
