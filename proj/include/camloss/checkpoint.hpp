#ifndef CAMLOSS_CHECKPOINT_HPP_
#define CAMLOSS_CHECKPOINT_HPP_

// Tensor container used for network checkpoints and dataset caches.
//
// Little-endian layout:
//   magic "CAMC" | version u32 (=1) | tensor count u32
//   per tensor: name length u16 | UTF-8 name | rank u8 | extents u32 x rank | f32 values

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "camloss/tensor.hpp"

namespace camloss {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  Tensor<float> tensor;
};

inline constexpr char kContainerMagic[4] = {'C', 'A', 'M', 'C'};
inline constexpr std::uint32_t kContainerVersion = 1;

namespace detail {

inline void put_u8(std::vector<unsigned char>& out, std::uint8_t v) { out.push_back(v); }

inline void put_u16(std::vector<unsigned char>& out, std::uint16_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xff));
  out.push_back(static_cast<unsigned char>(v >> 8));
}

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  explicit ByteReader(const std::vector<unsigned char>& bytes) : bytes_(bytes) {}

  std::uint64_t u(int width, const char* what) {
    need(static_cast<std::size_t>(width), what);
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= std::uint64_t{bytes_[pos_ + i]} << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }

  void raw(void* dst, std::size_t n, const char* what) {
    need(n, what);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n)
      throw FormatError(std::string("container: truncated while reading ") + what + " at offset " +
                        std::to_string(pos_));
  }

  const std::vector<unsigned char>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<unsigned char> encode_container(const std::vector<NamedTensor>& tensors) {
  std::vector<unsigned char> out(std::begin(kContainerMagic), std::end(kContainerMagic));
  detail::put_u32(out, kContainerVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max()) throw FormatError("container: name too long");
    detail::put_u16(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    detail::put_u8(out, static_cast<std::uint8_t>(t.rank()));
    for (auto e : t.shape()) {
      if (e > std::numeric_limits<std::uint32_t>::max()) throw FormatError("container: extent exceeds u32");
      detail::put_u32(out, static_cast<std::uint32_t>(e));
    }
    for (float v : t.values()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline std::vector<NamedTensor> decode_container(const std::vector<unsigned char>& bytes) {
  detail::ByteReader in(bytes);
  char magic[4];
  in.raw(magic, 4, "magic");
  if (std::memcmp(magic, kContainerMagic, 4) != 0) throw FormatError("container: bad magic bytes");
  const auto version = in.u(4, "version");
  if (version != kContainerVersion)
    throw FormatError("container: unsupported version " + std::to_string(version) + " (expected 1)");
  const auto count = in.u(4, "tensor count");
  std::vector<NamedTensor> out;
  for (std::uint64_t t = 0; t < count; ++t) {
    NamedTensor nt;
    const auto len = in.u(2, "name length");
    nt.name.resize(len);
    in.raw(nt.name.data(), len, "name");
    const auto rank = in.u(1, "rank");
    if (rank > kMaxRank) throw FormatError("container: rank " + std::to_string(rank) + " above 4 for " + nt.name);
    Shape shape;
    std::uint64_t elems = 1;
    for (std::uint64_t d = 0; d < rank; ++d) {
      const auto e = in.u(4, "extent");
      shape.push_back(static_cast<std::size_t>(e));
      if (e != 0 && elems > in.remaining() / 4 / e)
        throw FormatError("container: dimension overflow in tensor " + nt.name);
      elems *= e;
    }
    if (elems * 4 > in.remaining())
      throw FormatError("container: truncated values of tensor " + nt.name + " at offset " +
                        std::to_string(in.position()));
    std::vector<float> vals(static_cast<std::size_t>(elems));
    for (auto& v : vals) v = std::bit_cast<float>(static_cast<std::uint32_t>(in.u(4, "value")));
    nt.tensor = Tensor<float>(std::move(shape), std::move(vals));
    out.push_back(std::move(nt));
  }
  return out;
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

inline void write_container(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  write_file_bytes(path, encode_container(tensors));
}

inline std::vector<NamedTensor> read_container(const std::filesystem::path& path) {
  return decode_container(read_file_bytes(path));
}

inline const Tensor<float>& find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name) {
  for (const auto& t : tensors)
    if (t.name == name) return t.tensor;
  throw FormatError("container: missing tensor " + name);
}

}  // namespace camloss

#endif  // CAMLOSS_CHECKPOINT_HPP_
