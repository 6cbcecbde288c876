#include "commshim/world.hpp"

#include "commshim/sync.hpp"

namespace commshim {

TransportKind parse_transport_kind(const std::string& text) {
  if (text == "sim") return TransportKind::sim;
  if (text == "socket") return TransportKind::socket;
  fail(ErrorCode::usage, "transport must be 'sim' or 'socket', got '" + text + "'");
}

const char* to_string(TransportKind kind) { return kind == TransportKind::sim ? "sim" : "socket"; }

World::World(const WorldConfig& config) : config_(config) {
  if (config.world_size == 0) fail(ErrorCode::config, "world size must be at least 1");
  if (config.transport == TransportKind::sim) {
    auto clock = std::make_unique<VirtualClock>();
    VirtualClock& vc = *clock;
    clock_ = std::move(clock);
    executor_ = std::make_unique<Executor>(*clock_);
    fabric_ = std::make_unique<SimFabric>(vc, config.world_size,
                                          SimConfig{config.link, config.device_aware, config.max_count});
    executor_->add_source(fabric_.get());
    for (std::uint32_t r = 0; r < config.world_size; ++r) sim_.push_back(fabric_->attach(RankId{r}));
  } else {
    clock_ = std::make_unique<WallClock>();
    executor_ = std::make_unique<Executor>(*clock_);
    sockets_ = SocketTransport::bootstrap_local(config.world_size, *clock_, config.device_aware, config.max_count);
    for (auto& s : sockets_) executor_->add_source(s.get());
  }
  for (std::uint32_t r = 0; r < config.world_size; ++r) local_.push_back(RankId{r});
  build_stacks();
}

World::World(const WorldConfig& config, const std::vector<HostEntry>& hosts, RankId rank) : config_(config) {
  if (config.transport != TransportKind::socket) {
    fail(ErrorCode::usage, "multi-process runs need the socket transport");
  }
  config_.world_size = static_cast<std::uint32_t>(hosts.size());
  clock_ = std::make_unique<WallClock>();
  executor_ = std::make_unique<Executor>(*clock_);
  SocketConfig sc;
  sc.hosts = hosts;
  sc.rank = rank;
  sc.device_aware = config.device_aware;
  sc.max_count = config.max_count;
  sockets_.push_back(SocketTransport::connect(sc, *clock_));
  executor_->add_source(sockets_.back().get());
  local_.push_back(rank);
  build_stacks();
}

void World::build_stacks() {
  stacks_.resize(config_.world_size);
  for (std::size_t i = 0; i < local_.size(); ++i) {
    const RankId r = local_[i];
    auto stack = std::make_unique<RankStack>();
    stack->transport = config_.transport == TransportKind::sim ? static_cast<Transport*>(sim_[r.value].get())
                                                               : static_cast<Transport*>(sockets_[i].get());
    stack->table = std::make_unique<CommTable>(*stack->transport, config_.dup_cache);
    stack->messenger = std::make_unique<Messenger>(*executor_, *stack->transport, config_.messenger);
    stack->node = std::make_unique<Node>(*stack->messenger, *stack->table, config_.node);
    stacks_[r.value] = std::move(stack);
  }
}

World::~World() {
  for (auto& s : stacks_) {
    if (s) s->node->stop();
  }
  executor_->shutdown();
  for (auto& s : stacks_) {
    if (!s) continue;
    s->node.reset();
    s->messenger.reset();
    s->table.reset();
  }
  executor_->shutdown();
  stacks_.clear();
  if (fabric_) executor_->remove_source(fabric_.get());
  for (auto& s : sockets_) executor_->remove_source(s.get());
  sim_.clear();
  sockets_.clear();
  fabric_.reset();
}

bool World::is_local(RankId r) const { return r.value < stacks_.size() && stacks_[r.value] != nullptr; }

RankStack& World::rank(RankId r) {
  if (!is_local(r)) fail(ErrorCode::usage, "rank " + std::to_string(r.value) + " is not hosted here");
  return *stacks_[r.value];
}

Task<> World::bootstrap() {
  std::vector<Task<>> verifies;
  for (RankId r : local_) {
    Node& n = node(r);
    const Nanos timeout = config_.bootstrap_timeout > Nanos{0} ? config_.bootstrap_timeout : n.connect_timeout();
    verifies.push_back(table(r).verify(*executor_, timeout));
  }
  co_await when_all(*executor_, std::move(verifies));
  for (RankId r : local_) node(r).start();
}

void World::set_progress_mode(const ProgressMode& mode) {
  for (RankId r : local_) messenger(r).set_progress_mode(mode);
}

}  // namespace commshim
