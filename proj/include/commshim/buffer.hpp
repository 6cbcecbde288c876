#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

namespace commshim {

enum class MemoryDomain : std::uint8_t { host = 0, device_sim = 1 };

std::string_view to_string(MemoryDomain d) noexcept;

// Bytes currently held by the simulated device allocator. Device regions are
// carved from their own allocator so tests can tell them apart from host
// memory and count staging traffic.
std::size_t device_bytes_in_use() noexcept;

// Owned, contiguous byte storage living in one memory domain.
class Buffer {
 public:
  Buffer() : bytes_(nullptr, Release{}) {}
  Buffer(std::size_t size, MemoryDomain domain);

  static Buffer copy_of(std::span<const std::byte> bytes, MemoryDomain domain = MemoryDomain::host);

  std::byte* data() noexcept { return bytes_.get(); }
  const std::byte* data() const noexcept { return bytes_.get(); }
  std::size_t size() const noexcept { return size_; }
  bool empty() const noexcept { return size_ == 0; }
  MemoryDomain domain() const noexcept { return domain_; }

  std::span<std::byte> span() noexcept { return {bytes_.get(), size_}; }
  std::span<const std::byte> span() const noexcept { return {bytes_.get(), size_}; }

  // Host-side copy of the contents (an explicit stage-out for device buffers).
  std::vector<std::byte> to_host() const;

 private:
  struct Release {
    MemoryDomain domain = MemoryDomain::host;
    std::size_t size = 0;
    void operator()(std::byte* p) const noexcept;
  };

  std::unique_ptr<std::byte[], Release> bytes_;
  std::size_t size_ = 0;
  MemoryDomain domain_ = MemoryDomain::host;
};

// A window into memory owned elsewhere, addressed as base + offset. The
// offset form mirrors allocators whose buffers cannot be sliced directly.
struct ConstRegion {
  const std::byte* base = nullptr;
  std::size_t offset = 0;
  std::size_t length = 0;
  MemoryDomain domain = MemoryDomain::host;

  const std::byte* data() const noexcept { return base + offset; }
  std::span<const std::byte> bytes() const noexcept { return {data(), length}; }

  static ConstRegion of(std::span<const std::byte> s, MemoryDomain d = MemoryDomain::host) {
    return {s.data(), 0, s.size(), d};
  }
};

struct MutableRegion {
  std::byte* base = nullptr;
  std::size_t offset = 0;
  std::size_t length = 0;
  MemoryDomain domain = MemoryDomain::host;

  std::byte* data() const noexcept { return base + offset; }
  std::span<std::byte> bytes() const noexcept { return {data(), length}; }

  static MutableRegion of(std::span<std::byte> s, MemoryDomain d = MemoryDomain::host) {
    return {s.data(), 0, s.size(), d};
  }
};

inline ConstRegion region_of(const Buffer& b) { return {b.data(), 0, b.size(), b.domain()}; }
inline MutableRegion region_of(Buffer& b) { return {b.data(), 0, b.size(), b.domain()}; }

}  // namespace commshim
