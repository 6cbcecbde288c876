#pragma once

#include "commshim/endpoints.hpp"
#include "commshim/world.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace commshim {

// ---- roles --------------------------------------------------------------------

enum class Role { scheduler, client, worker };

const char* to_string(Role role);
// Rank 0 schedules, rank 1 is the client, everyone else works. Cluster mode
// needs at least one worker, so world sizes below 3 are a config error.
Role role_of(RankId rank, std::uint32_t world_size);
inline constexpr std::uint32_t kFirstWorkerRank = 2;

// splitmix64 finalizer; used for partitioning and seeding.
std::uint64_t mix64(std::uint64_t x);

// ---- transpose-sum ------------------------------------------------------------

enum class Pattern { ramp, symmetric };

struct TransposeSpec {
  std::uint32_t dims = 256;
  std::uint32_t block = 64;
  Pattern pattern = Pattern::ramp;
  MemoryDomain domain = MemoryDomain::host;  // where worker blocks live
  bool collect = false;                      // ship y back to the client

  std::uint32_t blocks_per_side() const { return dims / block; }
  void validate() const;
};

// x[r][c]; integral so y = x + x^T and its checksum are exact.
double x_value(const TransposeSpec& spec, std::uint64_t r, std::uint64_t c);
// Position weight of y[r][c] in the checksum.
inline std::uint64_t checksum_weight(std::uint64_t dims, std::uint64_t r, std::uint64_t c) {
  return (r * dims + c) % 1009 + 1;
}
// Round-robin over workers by row-major block index.
inline std::uint32_t block_owner(std::uint32_t bi, std::uint32_t bj, std::uint32_t nb, std::uint32_t workers) {
  return static_cast<std::uint32_t>((static_cast<std::uint64_t>(bi) * nb + bj) % workers);
}

struct TransposeResult {
  std::uint64_t checksum = 0;  // sum of y[r][c] * weight(r, c), mod 2^64
  std::uint64_t total = 0;     // sum of y, mod 2^64
  std::uint64_t bytes_exchanged = 0;
  // Sum over workers of bytes sent / that worker's communication time.
  double aggregate_throughput = 0.0;
  std::uint32_t workers = 0;
  Nanos elapsed{0};
  Nanos compute{0};
  Nanos comm{0};
  std::vector<double> y;  // row-major, only when collected
};

// Single-process computation of the same result.
TransposeResult transpose_oracle(const TransposeSpec& spec, bool keep_y = false);

// ---- key-merge ----------------------------------------------------------------

enum class Side : std::uint8_t { left = 0, right = 1 };

struct KeyMergeSpec {
  std::uint64_t rows = 10000;   // per partition and side
  double fraction = 0.3;        // share of right rows whose key exists on the left
  std::uint32_t partitions = 0;  // 0: one per worker (weak scaling)
  std::uint64_t seed = 42;

  std::uint32_t partition_count(std::uint32_t workers) const { return partitions ? partitions : workers; }
  void validate() const;
};

struct KeyTable {
  std::vector<std::uint64_t> keys;
  std::vector<double> values;
  std::size_t size() const { return keys.size(); }
};

// Deterministic 64-bit LCG draws per (partition, side). Left keys are the
// disjoint band [p*rows, (p+1)*rows); right keys hit a uniformly chosen left
// key with probability `fraction` and otherwise land in a band above 2^40
// that no left key uses.
KeyTable generate_partition(const KeyMergeSpec& spec, std::uint32_t partition, std::uint32_t partition_count,
                            Side side);
inline std::uint32_t key_owner(std::uint64_t key, std::uint32_t workers) {
  return static_cast<std::uint32_t>(mix64(key) % workers);
}

// Inner-join row counts. The nested loop is the brute-force reference for
// small inputs; the sort-merge form handles the acceptance sizes.
std::uint64_t nested_loop_join_count(const KeyTable& left, const KeyTable& right);
std::uint64_t sort_merge_join_count(std::vector<std::uint64_t> left, std::vector<std::uint64_t> right);
std::uint64_t key_merge_oracle(const KeyMergeSpec& spec, std::uint32_t partition_count);

struct KeyMergeResult {
  std::uint64_t joined = 0;
  std::uint64_t generated = 0;  // rows created, both sides
  std::uint64_t sent = 0;       // rows shipped to another worker
  std::uint64_t received = 0;
  std::uint64_t held = 0;       // rows resident after the shuffle
  std::uint64_t bytes_exchanged = 0;
  double aggregate_throughput = 0.0;  // as for TransposeResult
  std::uint32_t workers = 0;
  std::uint32_t partitions = 0;
  Nanos elapsed{0};
  Nanos compute{0};
  Nanos comm{0};
};

// ---- heartbeats ---------------------------------------------------------------

struct SuspectReport {
  RankId worker;
  Nanos at{0};
  Nanos silence{0};
};

struct HeartbeatStats {
  std::map<std::uint32_t, std::uint64_t> beats;   // per worker rank
  std::map<std::uint32_t, Nanos> max_gap;         // longest silence observed
  std::vector<SuspectReport> suspects;
};

// ---- cluster ------------------------------------------------------------------

struct ClusterConfig {
  WorldConfig world;
  // Zero picks 100 us of virtual time on the simulated transport and 100 ms
  // of wall time on sockets.
  Nanos heartbeat_interval{0};
  std::uint32_t suspect_after = 3;  // missed intervals
  // Upper bound on any single client request; zero means 10^12 virtual
  // ticks or 10 minutes of wall time.
  Nanos request_timeout{0};
};

Nanos default_heartbeat_interval(const Clock& clock);

class Scheduler;
class Worker;
class ClientAgent;

// The scheduler, client and worker programs of one or more ranks. With an
// in-process World every rank lives here; with a multi-process World only
// the local rank's program runs.
class Cluster {
 public:
  // Every rank in this process.
  explicit Cluster(const ClusterConfig& config);
  // One rank of a multi-process socket run.
  Cluster(const ClusterConfig& config, const std::vector<HostEntry>& hosts, RankId rank);
  ~Cluster();
  Cluster(const Cluster&) = delete;
  Cluster& operator=(const Cluster&) = delete;

  World& world() { return *world_; }
  const ClusterConfig& config() const { return config_; }
  Nanos heartbeat_interval() const { return interval_; }
  std::uint32_t worker_count() const { return world_->world_size() - kFirstWorkerRank; }
  bool hosts_client() const;

  // Client side; valid where rank 1 is local. Each call runs the executor
  // until the scheduler answers.
  std::vector<RankId> registered_workers();
  TransposeResult transpose_sum(const TransposeSpec& spec);
  KeyMergeResult key_merge(const KeyMergeSpec& spec);
  HeartbeatStats heartbeat_stats();
  // Tells the scheduler to stop the cluster and waits for it.
  void shutdown();

  // Runs the shared executor for `d` with nothing else to do.
  void run_for(Nanos d);
  // In-process inspection and fault injection.
  Scheduler* scheduler();
  Worker* worker(RankId rank);
  // Silences a worker's heartbeats as if it had died.
  void kill_worker(RankId rank);

  // Drives the local non-client ranks until the scheduler has shut the
  // cluster down (multi-process scheduler and worker processes).
  void serve();

 private:
  void start();
  template <typename T>
  T drive(Task<T> task);

  ClusterConfig config_;
  Nanos interval_{0};
  std::unique_ptr<World> world_;
  std::unique_ptr<Scheduler> scheduler_;
  std::unique_ptr<ClientAgent> client_;
  std::map<std::uint32_t, std::unique_ptr<Worker>> workers_;
  std::vector<JoinHandle<void>> programs_;
  bool shut_down_ = false;
};

}  // namespace commshim
