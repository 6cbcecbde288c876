#pragma once

#include "commshim/buffer.hpp"
#include "commshim/error.hpp"

#include <array>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

namespace commshim::wire {

// Socket transport frame header; every integer is little-endian:
//   u32 magic | u8 version | u32 channel | u32 tag | u8 domain | u64 length
inline constexpr std::uint32_t kMagic = 0x4D344431;  // "M4D1"
inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::size_t kFrameHeaderSize = 22;

struct FrameHeader {
  std::uint32_t channel = 0;
  std::uint32_t tag = 0;
  MemoryDomain domain = MemoryDomain::host;
  std::uint64_t length = 0;
  bool operator==(const FrameHeader&) const = default;
};

inline void put_u8(std::byte*& p, std::uint8_t v) { *p++ = static_cast<std::byte>(v); }

template <typename T>
inline void put_le(std::byte*& p, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    *p++ = static_cast<std::byte>(static_cast<std::uint64_t>(v) >> (8 * i));
  }
}

template <typename T>
inline T get_le(const std::byte*& p) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  p += sizeof(T);
  return static_cast<T>(v);
}

inline std::array<std::byte, kFrameHeaderSize> encode_frame_header(const FrameHeader& h) {
  std::array<std::byte, kFrameHeaderSize> out{};
  std::byte* p = out.data();
  put_le<std::uint32_t>(p, kMagic);
  put_u8(p, kVersion);
  put_le<std::uint32_t>(p, h.channel);
  put_le<std::uint32_t>(p, h.tag);
  put_u8(p, static_cast<std::uint8_t>(h.domain));
  put_le<std::uint64_t>(p, h.length);
  return out;
}

// Throws Error(protocol) on a bad magic, version, or domain byte.
inline FrameHeader decode_frame_header(std::span<const std::byte> bytes) {
  if (bytes.size() < kFrameHeaderSize) {
    fail(ErrorCode::protocol, "frame header needs " + std::to_string(kFrameHeaderSize) + " bytes, got " +
                                  std::to_string(bytes.size()));
  }
  const std::byte* p = bytes.data();
  const auto magic = get_le<std::uint32_t>(p);
  if (magic != kMagic) fail(ErrorCode::protocol, "bad frame magic");
  const auto version = get_le<std::uint8_t>(p);
  if (version != kVersion) fail(ErrorCode::protocol, "unsupported frame version " + std::to_string(version));
  FrameHeader h;
  h.channel = get_le<std::uint32_t>(p);
  h.tag = get_le<std::uint32_t>(p);
  const auto domain = get_le<std::uint8_t>(p);
  if (domain > 1) fail(ErrorCode::protocol, "bad memory domain byte " + std::to_string(domain));
  h.domain = static_cast<MemoryDomain>(domain);
  h.length = get_le<std::uint64_t>(p);
  return h;
}

}  // namespace commshim::wire
