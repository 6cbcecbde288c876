#include "commshim/transport.hpp"

#include <cmath>
#include <vector>

namespace commshim {

void LinkModel::validate() const {
  if (!(latency >= 0) || !(per_chunk_overhead >= 0) || !(staging_penalty >= 0)) {
    fail(ErrorCode::config, "link model times must be non-negative");
  }
  if (!(bandwidth > 0)) fail(ErrorCode::config, "link model bandwidth must be positive");
}

Nanos LinkModel::transfer_cost(std::size_t bytes, bool staged) const {
  using ld = long double;
  const auto ns = [](ld seconds) { return static_cast<std::int64_t>(std::llround(seconds * 1e9L)); };
  std::int64_t cost = ns(latency) + ns(per_chunk_overhead);
  cost += static_cast<std::int64_t>(std::ceil(static_cast<ld>(bytes) * 1e9L / static_cast<ld>(bandwidth)));
  if (staged) {
    cost += static_cast<std::int64_t>(
        std::ceil(static_cast<ld>(bytes) * static_cast<ld>(staging_penalty) * 1e9L));
  }
  return Nanos{cost};
}

Transport::Transport(RankId self, std::uint32_t world_size, Capabilities caps, Clock& clock)
    : self_(self), world_size_(world_size), caps_(caps), clock_(clock) {
  if (world_size == 0) fail(ErrorCode::config, "world size must be at least 1");
  if (self.value >= world_size) {
    fail(ErrorCode::config, "rank " + std::to_string(self.value) + " outside world of size " +
                                std::to_string(world_size));
  }
  channels_[ChannelId::world().value] = true;
}

RequestPtr Transport::make_request(Direction dir, ChannelId channel, RankId peer, Tag tag,
                                   std::size_t length, MemoryDomain domain, bool background) {
  if (!has_channel(channel)) {
    fail(ErrorCode::channel, "unknown channel " + std::to_string(channel.value) + " on rank " +
                                 std::to_string(self_.value));
  }
  if (peer.value >= world_size_) {
    fail(ErrorCode::usage, "peer rank " + std::to_string(peer.value) + " outside world");
  }
  if (tag.value > Tag::kMax) fail(ErrorCode::usage, "tag exceeds 31 bits");
  if (length > caps_.max_count) {
    fail(ErrorCode::count_overflow, "transfer of " + std::to_string(length) +
                                        " bytes exceeds max_count " + std::to_string(caps_.max_count));
  }
  auto r = std::make_shared<TransferRequest>();
  r->id = next_id_++;
  r->direction = dir;
  r->channel = channel;
  r->peer = peer;
  r->tag = tag;
  r->domain = domain;
  r->posted_length = length;
  r->background = background;
  r->posted_at = clock_.now();
  r->owner = this;
  ++pending_;
  if (background) ++pending_background_;
  ++pending_by_channel_[channel.value];
  live_[r->id] = r;
  return r;
}

RequestPtr Transport::post_send(ChannelId channel, RankId peer, Tag tag, ConstRegion payload,
                                bool background) {
  auto r = make_request(Direction::send, channel, peer, tag, payload.length, payload.domain, background);
  ++metrics_.sends_posted;
  start_send(r, payload);
  return r;
}

RequestPtr Transport::post_recv(ChannelId channel, RankId peer, Tag tag, MutableRegion buffer,
                                bool background) {
  auto r = make_request(Direction::recv, channel, peer, tag, buffer.length, buffer.domain, background);
  ++metrics_.recvs_posted;
  start_recv(r, buffer);
  return r;
}

void Transport::check_owner(const RequestPtr& request) const {
  if (!request || request->owner != this) {
    fail(ErrorCode::usage, "request was not issued by this transport");
  }
}

bool Transport::test(const RequestPtr& request) {
  check_owner(request);
  advance();
  return request->done();
}

std::size_t Transport::progress() { return advance(); }

bool Transport::cancel(const RequestPtr& request) {
  check_owner(request);
  if (request->done()) return false;
  if (!withdraw(request)) return false;
  finish(request, RequestState::failed, 0, ErrorCode::cancelled, "request cancelled");
  return true;
}

void Transport::finish(const RequestPtr& request, RequestState state, std::size_t moved,
                       ErrorCode code, std::string message) {
  if (request->done()) return;
  request->state = state;
  request->bytes_moved = moved;
  request->finished_at = clock_.now();
  if (state == RequestState::failed) {
    request->error_code = code;
    request->error_message = std::move(message);
    ++metrics_.failed;
  } else {
    ++metrics_.completed;
    if (request->direction == Direction::send) {
      metrics_.bytes_sent += moved;
    } else {
      metrics_.bytes_received += moved;
    }
  }
  live_.erase(request->id);
  --pending_;
  if (request->background) --pending_background_;
  if (auto it = pending_by_channel_.find(request->channel.value); it != pending_by_channel_.end()) {
    if (--it->second == 0) pending_by_channel_.erase(it);
  }
}

void Transport::record_staging(std::size_t bytes) {
  ++metrics_.staging_copies;
  metrics_.staged_bytes += bytes;
}

void Transport::open_channel(ChannelId id) { channels_[id.value] = true; }

void Transport::close_channel(ChannelId id) {
  if (id == ChannelId::world()) fail(ErrorCode::usage, "the world channel cannot be closed");
  channels_.erase(id.value);
  std::vector<RequestPtr> doomed;
  for (auto& [rid, weak] : live_) {
    if (auto r = weak.lock(); r && r->channel == id) doomed.push_back(std::move(r));
  }
  for (auto& r : doomed) {
    if (withdraw(r)) {
      finish(r, RequestState::failed, 0, ErrorCode::channel,
             "channel " + std::to_string(id.value) + " destroyed with the transfer unmatched");
    }
  }
}

bool Transport::has_channel(ChannelId id) const { return channels_.contains(id.value); }

std::size_t Transport::pending_count(bool include_background) const {
  return include_background ? pending_ : pending_ - pending_background_;
}

std::size_t Transport::pending_on(ChannelId id) const {
  auto it = pending_by_channel_.find(id.value);
  return it == pending_by_channel_.end() ? 0 : it->second;
}

}  // namespace commshim
