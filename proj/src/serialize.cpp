#include "mmfusion/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace mmf {

namespace {

constexpr std::array<char, 4> kMagic{'M', 'M', 'F', 'T'};
constexpr uint32_t kMaxRank = 16;

template <typename U>
void write_le(std::ostream& os, U v) {
  std::array<char, sizeof(U)> buf;
  for (size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(buf.data(), buf.size());
}

template <typename U>
U read_le(std::istream& is) {
  std::array<unsigned char, sizeof(U)> buf;
  if (!is.read(reinterpret_cast<char*>(buf.data()), buf.size()))
    throw InputError("tensor stream truncated");
  U v = 0;
  for (size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

template <typename T>
using Bits = std::conditional_t<sizeof(T) == 4, uint32_t, uint64_t>;

template <typename T>
constexpr DType dtype_of() {
  return sizeof(T) == 4 ? DType::kFloat32 : DType::kFloat64;
}

template <typename T>
NDArray<T> read_payload(std::istream& is, Shape shape) {
  const int64_t n = numel(shape);
  std::vector<T> data(static_cast<size_t>(n));
  for (auto& v : data) v = std::bit_cast<T>(read_le<Bits<T>>(is));
  return NDArray<T>(std::move(shape), std::move(data));
}

}  // namespace

void write_u32(std::ostream& os, uint32_t v) { write_le(os, v); }
void write_u64(std::ostream& os, uint64_t v) { write_le(os, v); }
uint32_t read_u32(std::istream& is) { return read_le<uint32_t>(is); }
uint64_t read_u64(std::istream& is) { return read_le<uint64_t>(is); }

template <typename T>
void write_tensor(std::ostream& os, const NDArray<T>& array) {
  os.write(kMagic.data(), kMagic.size());
  write_u32(os, kTensorFormatVersion);
  write_u32(os, static_cast<uint32_t>(dtype_of<T>()));
  write_u32(os, static_cast<uint32_t>(array.rank()));
  for (auto e : array.shape()) write_u64(os, static_cast<uint64_t>(e));
  for (auto v : array.values()) write_le(os, std::bit_cast<Bits<T>>(v));
}

AnyArray read_any_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic)
    throw InputError("not an MMFT tensor (bad magic)");
  const uint32_t version = read_u32(is);
  if (version != kTensorFormatVersion)
    throw InputError("unsupported MMFT version " + std::to_string(version));
  const uint32_t code = read_u32(is);
  const uint32_t rank = read_u32(is);
  if (rank > kMaxRank) throw InputError("MMFT rank " + std::to_string(rank) + " too large");
  Shape shape(rank);
  for (auto& e : shape) {
    const uint64_t v = read_u64(is);
    if (v == 0 || v > (uint64_t{1} << 40)) throw InputError("MMFT extent out of range");
    e = static_cast<int64_t>(v);
  }
  switch (static_cast<DType>(code)) {
    case DType::kFloat32:
      return read_payload<float>(is, std::move(shape));
    case DType::kFloat64:
      return read_payload<double>(is, std::move(shape));
  }
  throw InputError("unknown MMFT dtype code " + std::to_string(code));
}

template <typename T>
NDArray<T> read_tensor(std::istream& is) {
  return std::visit([](auto&& a) { return a.template cast<T>(); }, read_any_tensor(is));
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const NDArray<T>& array) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot open " + path.string() + " for writing");
  write_tensor(os, array);
  if (!os) throw InputError("write failed: " + path.string());
}

template <typename T>
NDArray<T> load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open tensor file " + path.string());
  try {
    return read_tensor<T>(is);
  } catch (const InputError& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

template void write_tensor(std::ostream&, const NDArray<float>&);
template void write_tensor(std::ostream&, const NDArray<double>&);
template NDArray<float> read_tensor(std::istream&);
template NDArray<double> read_tensor(std::istream&);
template void save_tensor(const std::filesystem::path&, const NDArray<float>&);
template void save_tensor(const std::filesystem::path&, const NDArray<double>&);
template NDArray<float> load_tensor(const std::filesystem::path&);
template NDArray<double> load_tensor(const std::filesystem::path&);

}  // namespace mmf
