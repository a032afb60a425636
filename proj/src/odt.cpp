#include "omnidit/odt.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace omnidit::odt {

namespace {

static_assert(std::endian::native == std::endian::little, "ODT1 I/O assumes a little-endian host");

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::vector<std::uint8_t>& in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw FormatError("ODT1: truncated header");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[pos + i]) << (8 * i);
  pos += 4;
  return v;
}

template <typename S, typename T>
void copy_payload(const std::vector<std::uint8_t>& bytes, std::size_t pos, std::vector<T>& dst) {
  for (std::size_t i = 0; i < dst.size(); ++i) {
    S v;
    std::memcpy(&v, bytes.data() + pos + i * sizeof(S), sizeof(S));
    dst[i] = static_cast<T>(v);
  }
}

}  // namespace

template <typename T>
std::vector<std::uint8_t> encode(const Tensor<T>& t) {
  std::vector<std::uint8_t> out{'O', 'D', 'T', '1', static_cast<std::uint8_t>(dtype_of<T>())};
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
  const auto* raw = reinterpret_cast<const std::uint8_t*>(t.data());
  out.insert(out.end(), raw, raw + t.numel() * sizeof(T));
  return out;
}

DType peek_dtype(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 5 || std::memcmp(bytes.data(), "ODT1", 4) != 0) throw FormatError("ODT1: bad magic");
  if (bytes[4] != 1 && bytes[4] != 2) throw FormatError("ODT1: unknown dtype code " + std::to_string(bytes[4]));
  return static_cast<DType>(bytes[4]);
}

template <typename T>
Tensor<T> decode(const std::vector<std::uint8_t>& bytes) {
  const DType dt = peek_dtype(bytes);
  std::size_t pos = 5;
  const std::uint32_t rank = get_u32(bytes, pos);
  Shape shape(rank);
  for (auto& e : shape) e = get_u32(bytes, pos);
  const std::size_t n = numel(shape);
  const std::size_t width = dt == DType::f32 ? 4 : 8;
  if (bytes.size() != pos + n * width)
    throw FormatError("ODT1: payload is " + std::to_string(bytes.size() - pos) + " bytes, expected " +
                      std::to_string(n * width));
  std::vector<T> data(n);
  if (dt == DType::f32)
    copy_payload<float>(bytes, pos, data);
  else
    copy_payload<double>(bytes, pos, data);
  return Tensor<T>(std::move(shape), std::move(data));
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

template <typename T>
void write(const std::filesystem::path& path, const Tensor<T>& t) {
  write_bytes(path, encode(t));
}

template <typename T>
Tensor<T> read(const std::filesystem::path& path) {
  return decode<T>(read_bytes(path));
}

template std::vector<std::uint8_t> encode<float>(const Tensor<float>&);
template std::vector<std::uint8_t> encode<double>(const Tensor<double>&);
template Tensor<float> decode<float>(const std::vector<std::uint8_t>&);
template Tensor<double> decode<double>(const std::vector<std::uint8_t>&);
template void write<float>(const std::filesystem::path&, const Tensor<float>&);
template void write<double>(const std::filesystem::path&, const Tensor<double>&);
template Tensor<float> read<float>(const std::filesystem::path&);
template Tensor<double> read<double>(const std::filesystem::path&);

}  // namespace omnidit::odt
