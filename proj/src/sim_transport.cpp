#include "commshim/sim_transport.hpp"

#include <algorithm>
#include <cstring>

namespace commshim {

SimFabric::SimFabric(VirtualClock& clock, std::uint32_t world_size, SimConfig config)
    : clock_(clock), world_size_(world_size), config_(config) {
  if (world_size == 0) fail(ErrorCode::config, "world size must be at least 1");
  config_.link.validate();
  if (config_.max_count == 0) fail(ErrorCode::config, "max_count must be positive");
  ranks_.assign(world_size, nullptr);
  inflight_.resize(world_size);
}

// Transports hold a reference to the fabric and must be destroyed first.
SimFabric::~SimFabric() = default;

std::unique_ptr<SimTransport> SimFabric::attach(RankId rank) {
  if (rank.value >= world_size_) {
    fail(ErrorCode::config, "rank " + std::to_string(rank.value) + " outside world of size " +
                                std::to_string(world_size_));
  }
  if (ranks_[rank.value] != nullptr) {
    fail(ErrorCode::config, "rank collision: rank " + std::to_string(rank.value) + " attached twice");
  }
  auto t = std::make_unique<SimTransport>(*this, rank);
  ranks_[rank.value] = t.get();
  return t;
}

void SimFabric::detach(std::uint32_t rank) {
  ranks_[rank] = nullptr;
  for (auto it = unmatched_.begin(); it != unmatched_.end();) {
    if (it->second->owner == rank) {
      withdraw(it->first);
      it = unmatched_.begin();
    } else {
      ++it;
    }
  }
  for (const OpPtr& op : inflight_[rank]) stamps_.erase(stamps_.find(op->stamp));
  inflight_[rank].clear();
}

std::optional<Nanos> SimFabric::next_event_after(Nanos now) const {
  auto it = stamps_.upper_bound(now);
  if (it == stamps_.end()) return std::nullopt;
  return *it;
}

void SimFabric::enqueue(OpPtr op, bool is_send) {
  Queues& q = queues_[op->key];
  unmatched_[op->request.get()] = op;
  (is_send ? q.sends : q.recvs).push_back(std::move(op));
  if (!q.sends.empty() && !q.recvs.empty()) matchable_.insert(q.sends.front()->key);
  ++activity_;
}

void SimFabric::match(const OpPtr& send, const OpPtr& recv) {
  const Nanos now = clock_.now();
  const bool device_aware = config_.device_aware;
  send->staged = send->domain == MemoryDomain::device_sim && !device_aware;
  recv->staged = recv->domain == MemoryDomain::device_sim && !device_aware;
  const Nanos stamp = now + config_.link.transfer_cost(send->length, send->staged || recv->staged);

  send->outcome = RequestState::complete;
  send->moved = send->length;
  if (send->length > recv->length) {
    recv->outcome = RequestState::failed;
    recv->code = ErrorCode::truncation;
    recv->message = "incoming message of " + std::to_string(send->length) +
                    " bytes exceeds receive buffer of " + std::to_string(recv->length) + " bytes";
    recv->staged = false;
  } else {
    recv->outcome = RequestState::complete;
    recv->moved = send->length;
    if (send->length > 0) {
      if (send->staged || recv->staged) {
        // Non-device-aware path: hop through a host bounce buffer.
        std::vector<std::byte> bounce(send->send_data, send->send_data + send->length);
        std::memcpy(recv->recv_data, bounce.data(), bounce.size());
      } else {
        std::memcpy(recv->recv_data, send->send_data, send->length);
      }
    }
  }

  for (const OpPtr& op : {send, recv}) {
    op->matched = true;
    op->stamp = stamp;
    unmatched_.erase(op->request.get());
    if (ranks_[op->owner] != nullptr) {
      inflight_[op->owner].push_back(op);
      stamps_.insert(stamp);
    }
  }
  ++activity_;
}

std::size_t SimFabric::advance(std::uint32_t rank) {
  for (auto it = matchable_.begin(); it != matchable_.end();) {
    const Key key = *it;
    if (key.src != rank && key.dst != rank) {
      ++it;
      continue;
    }
    Queues& q = queues_[key];
    while (!q.sends.empty() && !q.recvs.empty()) {
      OpPtr s = std::move(q.sends.front());
      OpPtr r = std::move(q.recvs.front());
      q.sends.pop_front();
      q.recvs.pop_front();
      match(s, r);
    }
    if (q.sends.empty() && q.recvs.empty()) queues_.erase(key);
    it = matchable_.erase(it);
  }

  const Nanos now = clock_.now();
  std::size_t transitions = 0;
  auto& mine = inflight_[rank];
  SimTransport* t = ranks_[rank];
  std::vector<OpPtr> still;
  still.reserve(mine.size());
  for (OpPtr& op : mine) {
    if (op->stamp > now) {
      still.push_back(std::move(op));
      continue;
    }
    stamps_.erase(stamps_.find(op->stamp));
    if (op->staged && op->outcome == RequestState::complete) t->record_staging(op->length);
    if (op->outcome == RequestState::complete) {
      t->finish(op->request, RequestState::complete, op->moved);
    } else {
      t->finish(op->request, RequestState::failed, 0, op->code, op->message);
    }
    ++transitions;
  }
  mine = std::move(still);
  if (transitions > 0) activity_ += transitions;
  return transitions;
}

bool SimFabric::withdraw(const TransferRequest* request) {
  auto it = unmatched_.find(request);
  if (it == unmatched_.end()) return false;
  OpPtr op = it->second;
  unmatched_.erase(it);
  auto qit = queues_.find(op->key);
  if (qit != queues_.end()) {
    for (auto* dq : {&qit->second.sends, &qit->second.recvs}) {
      dq->erase(std::remove(dq->begin(), dq->end(), op), dq->end());
    }
    if (qit->second.sends.empty() || qit->second.recvs.empty()) matchable_.erase(op->key);
    if (qit->second.sends.empty() && qit->second.recvs.empty()) queues_.erase(qit);
  }
  ++activity_;
  return true;
}

SimTransport::SimTransport(SimFabric& fabric, RankId self)
    : Transport(self, fabric.world_size(),
                Capabilities{fabric.config().device_aware, fabric.config().max_count}, fabric.clock()),
      fabric_(fabric) {}

SimTransport::~SimTransport() { fabric_.detach(rank().value); }

void SimTransport::start_send(const RequestPtr& request, ConstRegion payload) {
  auto op = std::make_shared<SimFabric::Op>();
  op->request = request;
  op->owner = rank().value;
  op->key = {request->channel.value, rank().value, request->peer.value, request->tag.value};
  op->send_data = payload.data();
  op->length = payload.length;
  op->domain = payload.domain;
  fabric_.enqueue(std::move(op), true);
}

void SimTransport::start_recv(const RequestPtr& request, MutableRegion buffer) {
  auto op = std::make_shared<SimFabric::Op>();
  op->request = request;
  op->owner = rank().value;
  op->key = {request->channel.value, request->peer.value, rank().value, request->tag.value};
  op->recv_data = buffer.data();
  op->length = buffer.length;
  op->domain = buffer.domain;
  fabric_.enqueue(std::move(op), false);
}

std::size_t SimTransport::advance() { return fabric_.advance(rank().value); }

bool SimTransport::withdraw(const RequestPtr& request) { return fabric_.withdraw(request.get()); }

}  // namespace commshim
