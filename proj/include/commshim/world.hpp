#pragma once

#include "commshim/channels.hpp"
#include "commshim/endpoints.hpp"
#include "commshim/executor.hpp"
#include "commshim/messaging.hpp"
#include "commshim/sim_transport.hpp"
#include "commshim/socket_transport.hpp"

#include <memory>
#include <string>
#include <vector>

namespace commshim {

enum class TransportKind { sim, socket };

TransportKind parse_transport_kind(const std::string& text);
const char* to_string(TransportKind kind);

struct WorldConfig {
  std::uint32_t world_size = 2;
  TransportKind transport = TransportKind::sim;
  LinkModel link;  // sim only
  bool device_aware = false;
  std::size_t max_count = kDefaultMaxCount;
  MessengerConfig messenger;
  std::size_t dup_cache = kDefaultDupCache;
  NodeConfig node;
  // Timeout of the startup agreement exchange; zero means the node's
  // connect timeout.
  Nanos bootstrap_timeout{0};
};

// Everything one rank needs, wired together.
struct RankStack {
  Transport* transport = nullptr;
  std::unique_ptr<CommTable> table;
  std::unique_ptr<Messenger> messenger;
  std::unique_ptr<Node> node;
};

// A set of ranks sharing one executor: either every rank of the world
// in-process (simulated, or sockets over loopback), or a single rank of a
// multi-process socket run.
class World {
 public:
  // All ranks in this process.
  explicit World(const WorldConfig& config);
  // One rank of a multi-process run; the hostfile lists every rank.
  World(const WorldConfig& config, const std::vector<HostEntry>& hosts, RankId rank);
  ~World();
  World(const World&) = delete;
  World& operator=(const World&) = delete;

  const WorldConfig& config() const { return config_; }
  Executor& executor() { return *executor_; }
  Clock& clock() { return *clock_; }
  bool is_virtual() const { return clock_->is_virtual(); }
  std::uint32_t world_size() const { return config_.world_size; }
  const std::vector<RankId>& local_ranks() const { return local_; }
  bool is_local(RankId r) const;

  RankStack& rank(RankId r);
  Transport& transport(RankId r) { return *rank(r).transport; }
  CommTable& table(RankId r) { return *rank(r).table; }
  Messenger& messenger(RankId r) { return *rank(r).messenger; }
  Node& node(RankId r) { return *rank(r).node; }
  SimFabric* fabric() { return fabric_.get(); }

  // Verifies every local comm table and starts every node.
  Task<> bootstrap();
  // Runs `task` to completion on the shared executor.
  template <typename T>
  T run(Task<T> task, RunLimits limits = {}) {
    return executor_->block_on(std::move(task), limits);
  }
  void set_progress_mode(const ProgressMode& mode);

 private:
  void build_stacks();

  WorldConfig config_;
  std::unique_ptr<Clock> clock_;
  std::unique_ptr<Executor> executor_;
  std::unique_ptr<SimFabric> fabric_;
  std::vector<std::unique_ptr<SimTransport>> sim_;
  std::vector<std::unique_ptr<SocketTransport>> sockets_;
  std::vector<RankId> local_;
  std::vector<std::unique_ptr<RankStack>> stacks_;  // indexed by rank
};

}  // namespace commshim
