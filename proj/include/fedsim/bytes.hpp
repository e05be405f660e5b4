#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace fedsim {

/// Appends little-endian scalars to a byte buffer.
class ByteWriter {
 public:
  explicit ByteWriter(std::vector<unsigned char>& out) : out_(out) {}

  template <typename UInt>
  void put(UInt v) {
    for (std::size_t i = 0; i < sizeof(UInt); ++i) {
      out_.push_back(static_cast<unsigned char>(v >> (8 * i)));
    }
  }
  void put_f64(double v) { put(std::bit_cast<std::uint64_t>(v)); }
  void put_bytes(std::span<const unsigned char> bytes) {
    for (auto b : bytes) out_.push_back(b);
  }

 private:
  std::vector<unsigned char>& out_;
};

/// Reads little-endian scalars; callers check remaining() first.
class ByteReader {
 public:
  explicit ByteReader(std::span<const unsigned char> in) : in_(in) {}

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return in_.size() - pos_; }

  template <typename UInt>
  UInt get() {
    UInt v = 0;
    for (std::size_t i = 0; i < sizeof(UInt); ++i) {
      v |= static_cast<UInt>(static_cast<UInt>(in_[pos_ + i]) << (8 * i));
    }
    pos_ += sizeof(UInt);
    return v;
  }
  double get_f64() { return std::bit_cast<double>(get<std::uint64_t>()); }

 private:
  std::span<const unsigned char> in_;
  std::size_t pos_ = 0;
};

}  // namespace fedsim
