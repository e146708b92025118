#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <variant>

#include "mmfusion/tensor.hpp"

namespace mmf {

// MMFT tensor file: "MMFT", u32 version, u32 dtype code (1 = f32, 2 = f64), u32 rank,
// rank x u64 extents, raw row-major values. All integers and values little-endian.
inline constexpr uint32_t kTensorFormatVersion = 1;

enum class DType : uint32_t { kFloat32 = 1, kFloat64 = 2 };

using AnyArray = std::variant<NDArray<float>, NDArray<double>>;

template <typename T>
void write_tensor(std::ostream& os, const NDArray<T>& array);

AnyArray read_any_tensor(std::istream& is);

// Reads and converts to T if the stored dtype differs.
template <typename T>
NDArray<T> read_tensor(std::istream& is);

template <typename T>
void save_tensor(const std::filesystem::path& path, const NDArray<T>& array);

template <typename T>
NDArray<T> load_tensor(const std::filesystem::path& path);

// Little-endian primitives shared with the checkpoint container.
void write_u32(std::ostream& os, uint32_t v);
void write_u64(std::ostream& os, uint64_t v);
uint32_t read_u32(std::istream& is);
uint64_t read_u64(std::istream& is);

}  // namespace mmf
