#include "xmodal/tensor_io.hpp"

#include <array>
#include <bit>
#include <functional>
#include <istream>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "xmodal/common.hpp"

namespace xmodal {

namespace {

constexpr std::uint32_t kMaxRank = 8;

template <typename U>
void put_le(std::ostream& out, U v) {
  std::array<char, sizeof(U)> bytes;
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(bytes.data(), bytes.size());
}

template <typename U>
U get_le(std::istream& in, const std::string& context) {
  std::array<unsigned char, sizeof(U)> bytes;
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw CorruptFile(context + ": unexpected end of file");
  }
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

std::size_t RawTensor::numel() const {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void write_u32(std::ostream& out, std::uint32_t v) { put_le(out, v); }
std::uint32_t read_u32(std::istream& in, const std::string& context) { return get_le<std::uint32_t>(in, context); }
void write_u64(std::ostream& out, std::uint64_t v) { put_le(out, v); }
std::uint64_t read_u64(std::istream& in, const std::string& context) { return get_le<std::uint64_t>(in, context); }

void write_tensor(std::ostream& out, std::span<const std::uint32_t> shape, std::span<const float> data) {
  const std::size_t n = std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  if (n != data.size()) throw std::invalid_argument("write_tensor: shape does not match data size");
  write_u32(out, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) write_u32(out, d);
  for (float f : data) put_le(out, std::bit_cast<std::uint32_t>(f));
}

RawTensor read_tensor(std::istream& in, const std::string& context) {
  RawTensor t;
  const std::uint32_t rank = read_u32(in, context);
  if (rank > kMaxRank) throw CorruptFile(context + ": implausible tensor rank " + std::to_string(rank));
  t.shape.resize(rank);
  for (auto& d : t.shape) d = read_u32(in, context);
  const std::size_t n = t.numel();
  if (n > (std::size_t{1} << 32)) throw CorruptFile(context + ": implausible tensor size");
  t.data.resize(n);
  for (auto& f : t.data) f = std::bit_cast<float>(get_le<std::uint32_t>(in, context));
  return t;
}

std::uint64_t tensor_record_size(std::span<const std::uint32_t> shape) {
  const std::uint64_t n = std::accumulate(shape.begin(), shape.end(), std::uint64_t{1}, std::multiplies<>());
  return 4 * (1 + shape.size()) + 4 * n;
}

}  // namespace xmodal
