#pragma once

#include "commshim/executor.hpp"
#include "commshim/transport.hpp"

#include <deque>
#include <map>
#include <memory>
#include <set>
#include <tuple>
#include <unordered_map>
#include <vector>

namespace commshim {

struct SimConfig {
  LinkModel link;
  bool device_aware = false;
  std::size_t max_count = kDefaultMaxCount;
};

class SimTransport;

// Shared medium for every simulated rank of one process. Transfers are
// matched when either side drives progress and complete at
//   match time + link cost
// on the virtual clock; each side observes completion in its own progress.
class SimFabric final : public IdleSource {
 public:
  SimFabric(VirtualClock& clock, std::uint32_t world_size, SimConfig config = {});
  ~SimFabric() override;

  // Brings up one rank's transport. Attaching a rank twice is a rank
  // collision and raises a configuration error.
  std::unique_ptr<SimTransport> attach(RankId rank);

  std::uint32_t world_size() const noexcept { return world_size_; }
  const SimConfig& config() const noexcept { return config_; }
  VirtualClock& clock() noexcept { return clock_; }

  std::uint64_t activity() const override { return activity_; }
  std::optional<Nanos> next_event_after(Nanos now) const override;

 private:
  friend class SimTransport;

  struct Key {
    std::uint32_t channel;
    std::uint32_t src;
    std::uint32_t dst;
    std::uint32_t tag;
    auto operator<=>(const Key&) const = default;
  };

  struct Op {
    RequestPtr request;
    std::uint32_t owner = 0;
    Key key{};
    const std::byte* send_data = nullptr;
    std::byte* recv_data = nullptr;
    std::size_t length = 0;
    MemoryDomain domain = MemoryDomain::host;
    bool matched = false;
    bool staged = false;
    Nanos stamp{0};
    RequestState outcome = RequestState::complete;
    std::size_t moved = 0;
    ErrorCode code = ErrorCode::io;
    std::string message;
  };
  using OpPtr = std::shared_ptr<Op>;

  struct Queues {
    std::deque<OpPtr> sends;
    std::deque<OpPtr> recvs;
  };

  void detach(std::uint32_t rank);
  void enqueue(OpPtr op, bool is_send);
  void match(const OpPtr& send, const OpPtr& recv);
  std::size_t advance(std::uint32_t rank);
  bool withdraw(const TransferRequest* request);

  VirtualClock& clock_;
  std::uint32_t world_size_;
  SimConfig config_;
  std::vector<SimTransport*> ranks_;
  std::map<Key, Queues> queues_;
  std::set<Key> matchable_;
  std::vector<std::vector<OpPtr>> inflight_;
  std::multiset<Nanos> stamps_;
  std::unordered_map<const TransferRequest*, OpPtr> unmatched_;
  std::uint64_t activity_ = 0;
};

class SimTransport final : public Transport {
 public:
  SimTransport(SimFabric& fabric, RankId self);
  ~SimTransport() override;

  const char* kind() const noexcept override { return "sim"; }
  SimFabric& fabric() noexcept { return fabric_; }

 protected:
  void start_send(const RequestPtr& request, ConstRegion payload) override;
  void start_recv(const RequestPtr& request, MutableRegion buffer) override;
  std::size_t advance() override;
  bool withdraw(const RequestPtr& request) override;

 private:
  friend class SimFabric;
  SimFabric& fabric_;
};

}  // namespace commshim
