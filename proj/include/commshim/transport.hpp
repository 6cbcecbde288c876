#pragma once

#include "commshim/buffer.hpp"
#include "commshim/clock.hpp"
#include "commshim/error.hpp"

#include <compare>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>

namespace commshim {

struct RankId {
  std::uint32_t value = 0;
  constexpr auto operator<=>(const RankId&) const = default;
};

struct Tag {
  static constexpr std::uint32_t kMax = 0x7FFF'FFFFu;
  // Tags below this are framework control traffic.
  static constexpr std::uint32_t kFirstUser = 16;

  std::uint32_t value = 0;
  constexpr bool reserved() const noexcept { return value < kFirstUser; }
  constexpr auto operator<=>(const Tag&) const = default;
};

struct ChannelId {
  std::uint32_t value = 0;
  static constexpr ChannelId world() noexcept { return ChannelId{0}; }
  constexpr auto operator<=>(const ChannelId&) const = default;
};

// MPI's `int count` ceiling.
inline constexpr std::size_t kDefaultMaxCount = (std::size_t{1} << 31) - 1;

// Cost parameters of a simulated link. Times are seconds, bandwidth bytes/s.
struct LinkModel {
  double latency = 0.0;
  double bandwidth = 10e9;
  double per_chunk_overhead = 0.0;
  double staging_penalty = 0.0;  // seconds per byte

  void validate() const;
  // Virtual-clock cost of one transfer of `bytes`:
  // latency + ceil(bytes / bandwidth) + per_chunk_overhead (+ staging).
  Nanos transfer_cost(std::size_t bytes, bool staged) const;
};

struct Capabilities {
  bool device_aware = false;
  std::size_t max_count = kDefaultMaxCount;
};

enum class Direction : std::uint8_t { send, recv };
enum class RequestState : std::uint8_t { pending, complete, failed };

// Handle on one posted non-blocking transfer. State only moves forward:
// pending -> complete or pending -> failed.
struct TransferRequest {
  std::uint64_t id = 0;
  Direction direction = Direction::send;
  ChannelId channel;
  RankId peer;
  Tag tag;
  MemoryDomain domain = MemoryDomain::host;
  RequestState state = RequestState::pending;
  std::size_t posted_length = 0;
  std::size_t bytes_moved = 0;
  bool background = false;
  Nanos posted_at{0};
  Nanos finished_at{0};
  ErrorCode error_code = ErrorCode::io;
  std::string error_message;
  const void* owner = nullptr;

  bool done() const noexcept { return state != RequestState::pending; }
  bool ok() const noexcept { return state == RequestState::complete; }
  void rethrow_if_failed() const {
    if (state == RequestState::failed) throw Error(error_code, error_message);
  }
};

using RequestPtr = std::shared_ptr<TransferRequest>;

struct TransportMetrics {
  std::uint64_t sends_posted = 0;
  std::uint64_t recvs_posted = 0;
  std::uint64_t completed = 0;
  std::uint64_t failed = 0;
  std::uint64_t bytes_sent = 0;
  std::uint64_t bytes_received = 0;
  std::uint64_t staging_copies = 0;
  std::uint64_t staged_bytes = 0;
};

// Non-blocking point-to-point contract shared by the simulated and socket
// transports. Matching is exact on (channel, peer, tag) and FIFO per key.
// Not thread-safe: drive it from one executor.
class Transport {
 public:
  Transport(RankId self, std::uint32_t world_size, Capabilities caps, Clock& clock);
  virtual ~Transport() = default;
  Transport(const Transport&) = delete;
  Transport& operator=(const Transport&) = delete;

  RankId rank() const noexcept { return self_; }
  std::uint32_t world_size() const noexcept { return world_size_; }
  const Capabilities& capabilities() const noexcept { return caps_; }
  Clock& clock() noexcept { return clock_; }
  const TransportMetrics& metrics() const noexcept { return metrics_; }
  virtual const char* kind() const noexcept = 0;

  // `background` requests (long-lived service receives) are excluded from
  // pending_count(false); they never block a progress-mode switch.
  RequestPtr post_send(ChannelId channel, RankId peer, Tag tag, ConstRegion payload,
                       bool background = false);
  RequestPtr post_recv(ChannelId channel, RankId peer, Tag tag, MutableRegion buffer,
                       bool background = false);

  // Drives progress, then reports whether the request left `pending`.
  bool test(const RequestPtr& request);
  // Advances everything it can without blocking; returns how many requests
  // changed state.
  std::size_t progress();
  // Withdraws a request that has not been matched yet. Returns false if it
  // is already in flight or finished.
  bool cancel(const RequestPtr& request);

  void open_channel(ChannelId id);
  // Unmatched transfers on the channel fail with a channel error; ones
  // already in flight run to completion.
  void close_channel(ChannelId id);
  bool has_channel(ChannelId id) const;

  std::size_t pending_count(bool include_background = true) const;
  std::size_t pending_on(ChannelId id) const;

 protected:
  virtual void start_send(const RequestPtr& request, ConstRegion payload) = 0;
  virtual void start_recv(const RequestPtr& request, MutableRegion buffer) = 0;
  virtual std::size_t advance() = 0;
  virtual bool withdraw(const RequestPtr& request) = 0;

  // Moves a request out of `pending` and updates accounting.
  void finish(const RequestPtr& request, RequestState state, std::size_t moved,
              ErrorCode code = ErrorCode::io, std::string message = {});
  void record_staging(std::size_t bytes);
  void check_owner(const RequestPtr& request) const;

  TransportMetrics metrics_;

 private:
  RequestPtr make_request(Direction dir, ChannelId channel, RankId peer, Tag tag,
                          std::size_t length, MemoryDomain domain, bool background);

  RankId self_;
  std::uint32_t world_size_;
  Capabilities caps_;
  Clock& clock_;
  std::uint64_t next_id_ = 1;
  std::unordered_map<std::uint32_t, bool> channels_;
  std::unordered_map<std::uint32_t, std::size_t> pending_by_channel_;
  std::size_t pending_ = 0;
  std::size_t pending_background_ = 0;
  std::map<std::uint64_t, std::weak_ptr<TransferRequest>> live_;
};

}  // namespace commshim

template <>
struct std::hash<commshim::RankId> {
  std::size_t operator()(commshim::RankId r) const noexcept { return std::hash<std::uint32_t>{}(r.value); }
};
template <>
struct std::hash<commshim::ChannelId> {
  std::size_t operator()(commshim::ChannelId c) const noexcept {
    return std::hash<std::uint32_t>{}(c.value);
  }
};
