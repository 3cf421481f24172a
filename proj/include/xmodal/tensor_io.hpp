#pragma once

// Little-endian, shape-prefixed 32-bit float tensors. Layout of one record:
//   u32 ndim, u32 dims[ndim], f32 data[prod(dims)]
// shared by checkpoints and corpus data files.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace xmodal {

struct RawTensor {
  std::vector<std::uint32_t> shape;
  std::vector<float> data;

  std::size_t numel() const;
};

void write_u32(std::ostream& out, std::uint32_t v);
std::uint32_t read_u32(std::istream& in, const std::string& context);
void write_u64(std::ostream& out, std::uint64_t v);
std::uint64_t read_u64(std::istream& in, const std::string& context);

void write_tensor(std::ostream& out, std::span<const std::uint32_t> shape, std::span<const float> data);
RawTensor read_tensor(std::istream& in, const std::string& context);

/// Bytes a record with this shape occupies on disk.
std::uint64_t tensor_record_size(std::span<const std::uint32_t> shape);

}  // namespace xmodal
