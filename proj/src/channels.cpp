#include "commshim/channels.hpp"

#include "commshim/wire.hpp"

#include <cstdlib>
#include <string>

namespace commshim {

namespace {
constexpr Tag kAgreementTag{0};
}

std::uint32_t base_channel_id(RankId a, RankId b, std::uint32_t world_size) {
  if (a == b) fail(ErrorCode::usage, "a channel needs two distinct ranks");
  const std::uint64_t i = std::min(a, b).value;
  const std::uint64_t j = std::max(a, b).value;
  const std::uint64_t n = world_size;
  if (j >= n) fail(ErrorCode::usage, "rank " + std::to_string(j) + " outside world");
  // Pairs (i', *) with i' < i come first: sum over i' of (n - 1 - i').
  const std::uint64_t before = i * (n - 1) - i * (i - 1) / 2;
  return static_cast<std::uint32_t>(1 + before + (j - i - 1));
}

std::uint32_t dup_channel_id(std::uint32_t base_id, std::uint32_t generation) {
  if (generation == 0 || generation > kMaxGeneration) {
    fail(ErrorCode::channel, "duplicate generation " + std::to_string(generation) + " out of range");
  }
  return (base_id << 16) | generation;
}

std::size_t dup_cache_from_env(std::size_t fallback) {
  const char* raw = std::getenv("COMMSHIM_DUP_CACHE");
  if (raw == nullptr || *raw == '\0') return fallback;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(raw, &end, 10);
  if (*end != '\0' || raw[0] == '-') {
    fail(ErrorCode::config, std::string("COMMSHIM_DUP_CACHE must be a non-negative integer, got '") + raw + "'");
  }
  return static_cast<std::size_t>(v);
}

CommTable::CommTable(Transport& transport, std::size_t cache_capacity)
    : transport_(transport), capacity_(cache_capacity) {
  const std::uint32_t n = transport.world_size();
  if (n > kMaxWorldSize) {
    fail(ErrorCode::config, "world size " + std::to_string(n) + " exceeds channel id space (max " +
                                std::to_string(kMaxWorldSize) + ")");
  }
  const RankId me = transport.rank();
  for (std::uint32_t p = 0; p < n; ++p) {
    if (p == me.value) continue;
    const RankId peer{p};
    Channel c{ChannelId{base_channel_id(me, peer, n)}, std::min(me, peer), std::max(me, peer), 0};
    transport_.open_channel(c.id);
    base_.emplace(p, c);
  }
}

CommTable::~CommTable() = default;

Task<> CommTable::verify(Executor& ex, Nanos timeout) {
  const std::uint32_t n = world_size();
  if (n < 2) co_return;
  std::vector<std::array<std::byte, 8>> out(n), in(n);
  std::vector<RequestPtr> recvs(n), sends(n);
  for (const auto& [p, c] : base_) {
    std::byte* w = out[p].data();
    wire::put_le<std::uint32_t>(w, self().value);
    wire::put_le<std::uint32_t>(w, c.id.value);
    recvs[p] = transport_.post_recv(ChannelId::world(), RankId{p}, kAgreementTag, MutableRegion::of(in[p]));
    sends[p] = transport_.post_send(ChannelId::world(), RankId{p}, kAgreementTag, ConstRegion::of(out[p]));
  }
  const Nanos deadline = ex.now() + timeout;
  ex.add_deadline(deadline);
  for (;;) {
    transport_.progress();
    bool all = true;
    for (const auto& [p, c] : base_) all = all && recvs[p]->done() && sends[p]->done();
    if (all) break;
    if (ex.now() >= deadline) {
      std::string missing;
      for (const auto& [p, c] : base_) {
        if (!recvs[p]->done()) missing += (missing.empty() ? "" : ", ") + std::to_string(p);
        transport_.cancel(recvs[p]);
        transport_.cancel(sends[p]);
      }
      fail(ErrorCode::startup, "comm table build on rank " + std::to_string(self().value) +
                                   " timed out waiting for rank(s) " + missing);
    }
    co_await ex.poll();
  }
  for (const auto& [p, c] : base_) {
    recvs[p]->rethrow_if_failed();
    sends[p]->rethrow_if_failed();
    const std::byte* r = in[p].data();
    const auto from = wire::get_le<std::uint32_t>(r);
    const auto id = wire::get_le<std::uint32_t>(r);
    if (from != p || id != c.id.value) {
      fail(ErrorCode::protocol, "channel id disagreement with rank " + std::to_string(p) + ": local " +
                                    std::to_string(c.id.value) + ", remote " + std::to_string(id));
    }
  }
}

void CommTable::check_peer(RankId peer, const char* what) const {
  if (peer == self()) {
    fail(ErrorCode::usage, std::string(what) + ": peer equals own rank " + std::to_string(peer.value));
  }
  if (peer.value >= world_size()) {
    fail(ErrorCode::usage, std::string(what) + ": peer " + std::to_string(peer.value) +
                               " outside world of size " + std::to_string(world_size()));
  }
}

const Channel& CommTable::lookup(RankId peer) const {
  check_peer(peer, "lookup");
  return base_.at(peer.value);
}

std::vector<Channel> CommTable::base_channels() const {
  std::vector<Channel> out;
  for (const auto& [p, c] : base_) out.push_back(c);
  return out;
}

Channel CommTable::duplicate(RankId peer) {
  check_peer(peer, "duplicate");
  auto& cached = cache_[peer.value];
  if (!cached.empty()) {
    Channel c = cached.front();
    cached.pop_front();
    ++stats_.cache_hits;
    live_[c.id.value] = Live{c, true};
    return c;
  }
  const Channel& base = base_.at(peer.value);
  const std::uint32_t gen = max_gen_[peer.value] + 1;
  Channel c{ChannelId{dup_channel_id(base.id.value, gen)}, base.low, base.high, gen};
  max_gen_[peer.value] = gen;
  transport_.open_channel(c.id);
  live_[c.id.value] = Live{c, true};
  ++stats_.created;
  return c;
}

Channel CommTable::adopt(RankId peer, ChannelId id) {
  check_peer(peer, "adopt");
  const Channel& base = base_.at(peer.value);
  const std::uint32_t gen = id.value & kMaxGeneration;
  if ((id.value >> 16) != base.id.value || gen == 0) {
    fail(ErrorCode::protocol, "channel " + std::to_string(id.value) + " is not a duplicate of pair channel " +
                                  std::to_string(base.id.value));
  }
  if (live_.count(id.value)) {
    fail(ErrorCode::protocol, "channel " + std::to_string(id.value) + " is already live");
  }
  Channel c{id, base.low, base.high, gen};
  max_gen_[peer.value] = std::max(max_gen_[peer.value], gen);
  transport_.open_channel(id);
  live_[id.value] = Live{c, false};
  ++stats_.adopted;
  return c;
}

const CommTable::Live& CommTable::live_dup(const Channel& channel, const char* what) const {
  if (channel.id == ChannelId::world() || channel.generation == 0) {
    fail(ErrorCode::usage, std::string(what) + ": base and world channels are never released");
  }
  auto it = live_.find(channel.id.value);
  if (it == live_.end()) {
    fail(ErrorCode::usage, std::string(what) + ": channel " + std::to_string(channel.id.value) + " is not live");
  }
  return it->second;
}

void CommTable::release(const Channel& channel) {
  const Live& live = live_dup(channel, "release");
  if (transport_.pending_on(channel.id) != 0) {
    fail(ErrorCode::busy, "channel " + std::to_string(channel.id.value) + " still has " +
                              std::to_string(transport_.pending_on(channel.id)) + " pending transfer(s)");
  }
  const Channel c = live.channel;
  const bool minted = live.minted;
  live_.erase(channel.id.value);
  ++stats_.released;
  const RankId peer = c.peer_of(self());
  auto& cached = cache_[peer.value];
  if (minted && cached.size() < capacity_) {
    cached.push_back(c);
  } else {
    destroy(c);
  }
}

void CommTable::discard(const Channel& channel) {
  live_dup(channel, "discard");
  live_.erase(channel.id.value);
  ++stats_.released;
  destroy(channel);
}

void CommTable::destroy(const Channel& channel) {
  transport_.close_channel(channel.id);
  ++stats_.destroyed;
}

std::size_t CommTable::cache_size(RankId peer) const {
  auto it = cache_.find(peer.value);
  return it == cache_.end() ? 0 : it->second.size();
}

std::size_t CommTable::cache_size_total() const {
  std::size_t total = 0;
  for (const auto& [p, q] : cache_) total += q.size();
  return total;
}

std::uint32_t CommTable::max_generation(RankId peer) const {
  auto it = max_gen_.find(peer.value);
  return it == max_gen_.end() ? 0 : it->second;
}

}  // namespace commshim
