#include "commshim/buffer.hpp"

#include <atomic>
#include <cstring>
#include <new>

namespace commshim {

namespace {

std::atomic<std::size_t> g_device_bytes{0};

constexpr std::align_val_t kDeviceAlignment{256};

std::byte* allocate(std::size_t size, MemoryDomain domain) {
  if (size == 0) return nullptr;
  if (domain == MemoryDomain::device_sim) {
    auto* p = static_cast<std::byte*>(::operator new(size, kDeviceAlignment));
    g_device_bytes += size;
    return p;
  }
  return static_cast<std::byte*>(::operator new(size));
}

}  // namespace

std::string_view to_string(MemoryDomain d) noexcept {
  return d == MemoryDomain::device_sim ? "device_sim" : "host";
}

std::size_t device_bytes_in_use() noexcept { return g_device_bytes.load(); }

void Buffer::Release::operator()(std::byte* p) const noexcept {
  if (!p) return;
  if (domain == MemoryDomain::device_sim) {
    g_device_bytes -= size;
    ::operator delete(p, kDeviceAlignment);
  } else {
    ::operator delete(p);
  }
}

Buffer::Buffer(std::size_t size, MemoryDomain domain)
    : bytes_(allocate(size, domain), Release{domain, size}), size_(size), domain_(domain) {}

Buffer Buffer::copy_of(std::span<const std::byte> bytes, MemoryDomain domain) {
  Buffer b(bytes.size(), domain);
  if (!bytes.empty()) std::memcpy(b.data(), bytes.data(), bytes.size());
  return b;
}

std::vector<std::byte> Buffer::to_host() const {
  return std::vector<std::byte>(data(), data() + size_);
}

}  // namespace commshim
