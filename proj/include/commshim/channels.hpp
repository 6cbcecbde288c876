#pragma once

#include "commshim/executor.hpp"
#include "commshim/task.hpp"
#include "commshim/transport.hpp"

#include <deque>
#include <map>
#include <optional>
#include <vector>

namespace commshim {

// An isolated bidirectional pipe between two ranks. Generation 0 is the
// pair's base channel; duplicates count up from 1.
struct Channel {
  ChannelId id;
  RankId low;
  RankId high;
  std::uint32_t generation = 0;

  RankId peer_of(RankId self) const { return self == low ? high : low; }
  bool operator==(const Channel&) const = default;
};

inline constexpr std::size_t kDefaultDupCache = 16;
inline constexpr std::uint32_t kMaxGeneration = 0xFFFF;
// Pair ids must leave room for the generation in the low 16 bits.
inline constexpr std::uint32_t kMaxWorldSize = 362;

// 1 + position of (i, j), i < j, in the lexicographic enumeration of pairs.
std::uint32_t base_channel_id(RankId a, RankId b, std::uint32_t world_size);
std::uint32_t dup_channel_id(std::uint32_t base_id, std::uint32_t generation);
inline std::uint64_t pair_count(std::uint64_t n) { return n < 2 ? 0 : n * (n - 1) / 2; }

// Reads COMMSHIM_DUP_CACHE, falling back to `fallback` when unset.
std::size_t dup_cache_from_env(std::size_t fallback = kDefaultDupCache);

struct ChannelStats {
  std::uint64_t created = 0;      // duplicates minted fresh
  std::uint64_t cache_hits = 0;
  std::uint64_t adopted = 0;      // duplicates announced by the peer
  std::uint64_t released = 0;
  std::uint64_t destroyed = 0;
};

// Per-rank table of pairwise channels. The base entries are fixed at
// construction; duplicates come and go with connections.
class CommTable {
 public:
  CommTable(Transport& transport, std::size_t cache_capacity = kDefaultDupCache);
  ~CommTable();
  CommTable(const CommTable&) = delete;
  CommTable& operator=(const CommTable&) = delete;

  // Collective check that every peer computed the same base ids. Exchanges
  // ids over the world channel (reserved tag 0); a peer that never answers
  // within `timeout` raises Error(startup) naming it.
  Task<> verify(Executor& ex, Nanos timeout);

  RankId self() const { return transport_.rank(); }
  std::uint32_t world_size() const { return transport_.world_size(); }
  Transport& transport() { return transport_; }

  const Channel& lookup(RankId peer) const;
  std::size_t size() const { return base_.size(); }
  std::vector<Channel> base_channels() const;

  // Mints a duplicate for `peer`, reusing a cached one when possible.
  Channel duplicate(RankId peer);
  // Registers a duplicate minted by the peer (the id arrives in-band).
  Channel adopt(RankId peer, ChannelId id);
  // Returns a quiescent duplicate to the cache, or destroys it when the
  // cache is full or the channel was adopted rather than minted here.
  void release(const Channel& channel);
  // Destroys a duplicate without caching it (used after a dirty close).
  void discard(const Channel& channel);

  bool is_live(ChannelId id) const { return live_.count(id.value) != 0; }
  std::size_t cache_capacity() const { return capacity_; }
  std::size_t cache_size(RankId peer) const;
  std::size_t cache_size_total() const;
  std::uint32_t max_generation(RankId peer) const;
  const ChannelStats& stats() const { return stats_; }

 private:
  struct Live {
    Channel channel;
    bool minted = false;
  };

  void check_peer(RankId peer, const char* what) const;
  const Live& live_dup(const Channel& channel, const char* what) const;
  void destroy(const Channel& channel);

  Transport& transport_;
  std::size_t capacity_;
  std::map<std::uint32_t, Channel> base_;          // peer -> base channel
  std::map<std::uint32_t, Live> live_;             // channel id -> live duplicate
  std::map<std::uint32_t, std::deque<Channel>> cache_;  // peer -> released duplicates
  std::map<std::uint32_t, std::uint32_t> max_gen_;      // peer -> highest generation seen
  ChannelStats stats_;
};

}  // namespace commshim
