#include "doctest.h"

#include "commshim/harness.hpp"

#include <algorithm>
#include <random>
#include <set>

using namespace commshim;

namespace {

ClusterConfig sim_config(std::uint32_t workers) {
  ClusterConfig c;
  c.world.world_size = kFirstWorkerRank + workers;
  return c;
}

ClusterConfig socket_config(std::uint32_t workers) {
  ClusterConfig c = sim_config(workers);
  c.world.transport = TransportKind::socket;
  return c;
}

// y straight from the definition, element by element.
std::vector<double> naive_y(const TransposeSpec& spec) {
  const std::uint64_t n = spec.dims;
  std::vector<double> y(n * n);
  for (std::uint64_t r = 0; r < n; ++r) {
    for (std::uint64_t c = 0; c < n; ++c) y[r * n + c] = x_value(spec, r, c) + x_value(spec, c, r);
  }
  return y;
}

KeyTable table_of(std::vector<std::uint64_t> keys) {
  KeyTable t;
  t.values.assign(keys.size(), 1.0);
  t.keys = std::move(keys);
  return t;
}

}  // namespace

TEST_CASE("roles by rank") {
  CHECK(role_of(RankId{0}, 4) == Role::scheduler);
  CHECK(role_of(RankId{1}, 4) == Role::client);
  CHECK(role_of(RankId{2}, 4) == Role::worker);
  CHECK(role_of(RankId{3}, 4) == Role::worker);
  CHECK(role_of(RankId{2}, 3) == Role::worker);
  CHECK_THROWS_AS(role_of(RankId{0}, 2), Error);
  CHECK_THROWS_AS(role_of(RankId{4}, 4), Error);
  CHECK(std::string(to_string(Role::client)) == "client");
}

TEST_CASE("a world of two is not a cluster") {
  ClusterConfig c;
  c.world.world_size = 2;
  try {
    Cluster cluster(c);
    FAIL("expected a config error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::config);
  }
}

TEST_CASE("transpose spec validation") {
  TransposeSpec s;
  s.dims = 10;
  s.block = 3;
  CHECK_THROWS_AS(s.validate(), Error);
  s.block = 0;
  CHECK_THROWS_AS(s.validate(), Error);
  s.block = 5;
  CHECK_NOTHROW(s.validate());
  CHECK(s.blocks_per_side() == 2);
}

TEST_CASE("transpose oracle on the 2x2 ramp") {
  TransposeSpec s;
  s.dims = 2;
  s.block = 1;
  const auto r = transpose_oracle(s, true);
  CHECK(r.y == std::vector<double>{0, 3, 3, 6});
  CHECK(r.total == 12);
  // weights 1, 2, 3, 4
  CHECK(r.checksum == 0 * 1 + 3 * 2 + 3 * 3 + 6 * 4);
}

TEST_CASE("2x2 ramp with unit blocks on two workers") {
  Cluster c(sim_config(2));
  TransposeSpec s;
  s.dims = 2;
  s.block = 1;
  s.collect = true;
  const auto r = c.transpose_sum(s);
  CHECK(r.y == std::vector<double>{0, 3, 3, 6});
  CHECK(r.workers == 2);
  CHECK(r.checksum == transpose_oracle(s).checksum);
  c.shutdown();
}

TEST_CASE("symmetric input doubles every entry") {
  Cluster c(sim_config(3));
  TransposeSpec s;
  s.dims = 24;
  s.block = 4;
  s.pattern = Pattern::symmetric;
  s.collect = true;
  const auto r = c.transpose_sum(s);
  std::uint64_t expect = 0;
  for (std::uint64_t i = 0; i < s.dims; ++i) {
    for (std::uint64_t j = 0; j < s.dims; ++j) {
      const double x = x_value(s, i, j);
      CHECK(x == x_value(s, j, i));
      CHECK(r.y[i * s.dims + j] == 2 * x);
      expect += 2 * static_cast<std::uint64_t>(x) * checksum_weight(s.dims, i, j);
    }
  }
  CHECK(r.checksum == expect);
  c.shutdown();
}

TEST_CASE("transpose result is independent of the worker count") {
  TransposeSpec s;
  s.dims = 64;
  s.block = 8;
  s.collect = true;
  const auto y = naive_y(s);
  const auto oracle = transpose_oracle(s);
  for (std::uint32_t w : {1u, 2u, 4u, 5u}) {
    Cluster c(sim_config(w));
    const auto r = c.transpose_sum(s);
    CHECK(r.workers == w);
    CHECK(r.checksum == oracle.checksum);
    CHECK(r.total == oracle.total);
    CHECK(r.y == y);
    if (w == 1) CHECK(r.bytes_exchanged == 0);
    if (w > 1) CHECK(r.bytes_exchanged > 0);
    c.shutdown();
  }
}

TEST_CASE("transpose with device-resident blocks over sockets") {
  ClusterConfig cfg = socket_config(3);
  cfg.world.device_aware = true;
  Cluster c(cfg);
  TransposeSpec s;
  s.dims = 48;
  s.block = 8;
  s.domain = MemoryDomain::device_sim;
  s.collect = true;
  const auto r = c.transpose_sum(s);
  CHECK(r.y == naive_y(s));
  CHECK(r.checksum == transpose_oracle(s).checksum);
  c.shutdown();
}

TEST_CASE("a bad job comes back as an error and the cluster keeps serving") {
  Cluster c(sim_config(2));
  TransposeSpec bad;
  bad.dims = 10;
  bad.block = 3;
  CHECK_THROWS_AS(c.transpose_sum(bad), Error);
  TransposeSpec ok;
  ok.dims = 4;
  ok.block = 2;
  CHECK(c.transpose_sum(ok).checksum == transpose_oracle(ok).checksum);
  c.shutdown();
}

TEST_CASE("join oracles on hand-made tables") {
  CHECK(nested_loop_join_count(table_of({1, 2, 3}), table_of({2, 3, 4})) == 2);
  CHECK(sort_merge_join_count({1, 2, 3}, {2, 3, 4}) == 2);
  CHECK(nested_loop_join_count(table_of({5, 5}), table_of({5, 5, 5})) == 6);
  CHECK(sort_merge_join_count({5, 5}, {5, 5, 5}) == 6);
  CHECK(sort_merge_join_count({}, {1}) == 0);
}

TEST_CASE("property: sort-merge agrees with the nested loop") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t nl = rng() % 60, nr = rng() % 60;
    const std::uint64_t range = 1 + rng() % 30;
    std::vector<std::uint64_t> l(nl), r(nr);
    for (auto& k : l) k = rng() % range;
    for (auto& k : r) k = rng() % range;
    CHECK(sort_merge_join_count(l, r) == nested_loop_join_count(table_of(l), table_of(r)));
  }
}

TEST_CASE("generated partitions") {
  KeyMergeSpec s;
  s.rows = 1000;
  s.fraction = 0.0;
  const auto l = generate_partition(s, 2, 4, Side::left);
  REQUIRE(l.size() == 1000);
  CHECK(l.keys.front() == 2000);
  CHECK(l.keys.back() == 2999);
  const auto r = generate_partition(s, 2, 4, Side::right);
  for (auto k : r.keys) CHECK(k >= (std::uint64_t{1} << 40));
  // Deterministic per (seed, partition, side).
  CHECK(generate_partition(s, 1, 4, Side::right).keys == generate_partition(s, 1, 4, Side::right).keys);
  s.fraction = 1.0;
  for (auto k : generate_partition(s, 3, 4, Side::right).keys) CHECK(k < 4000);
}

TEST_CASE("match fraction steers the join size") {
  KeyMergeSpec s;
  s.rows = 20000;
  s.fraction = 0.0;
  CHECK(key_merge_oracle(s, 2) == 0);
  s.fraction = 1.0;
  CHECK(key_merge_oracle(s, 2) == 40000);  // left keys are unique
  s.fraction = 0.3;
  const double share = static_cast<double>(key_merge_oracle(s, 2)) / 40000.0;
  CHECK(share == doctest::Approx(0.3).epsilon(0.03));
}

TEST_CASE("key merge matches the nested-loop oracle on small inputs") {
  KeyMergeSpec s;
  s.rows = 300;
  s.fraction = 0.5;
  s.seed = 9;
  Cluster c(sim_config(3));
  const auto r = c.key_merge(s);
  CHECK(r.partitions == 3);
  KeyTable left, right;
  for (std::uint32_t p = 0; p < 3; ++p) {
    auto l = generate_partition(s, p, 3, Side::left);
    auto rr = generate_partition(s, p, 3, Side::right);
    left.keys.insert(left.keys.end(), l.keys.begin(), l.keys.end());
    right.keys.insert(right.keys.end(), rr.keys.begin(), rr.keys.end());
  }
  CHECK(r.joined == nested_loop_join_count(left, right));
  c.shutdown();
}

TEST_CASE("key merge with no matches joins nothing") {
  KeyMergeSpec s;
  s.rows = 2000;
  s.fraction = 0.0;
  Cluster c(sim_config(2));
  CHECK(c.key_merge(s).joined == 0);
  c.shutdown();
}

TEST_CASE("key merge is independent of the worker count for fixed partitions") {
  KeyMergeSpec s;
  s.rows = 5000;
  s.fraction = 0.4;
  s.partitions = 4;
  const std::uint64_t oracle = key_merge_oracle(s, 4);
  for (std::uint32_t w : {1u, 4u}) {
    Cluster c(sim_config(w));
    const auto r = c.key_merge(s);
    CHECK(r.joined == oracle);
    CHECK(r.partitions == 4);
    if (w == 1) CHECK(r.sent == 0);
    c.shutdown();
  }
}

TEST_CASE("property: shuffle conserves rows") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 6; ++trial) {
    KeyMergeSpec s;
    s.rows = 1 + rng() % 3000;
    s.fraction = static_cast<double>(rng() % 101) / 100.0;
    s.seed = rng();
    const std::uint32_t w = 1 + static_cast<std::uint32_t>(rng() % 4);
    s.partitions = static_cast<std::uint32_t>(rng() % 6);
    Cluster c(trial % 2 ? socket_config(w) : sim_config(w));
    const auto r = c.key_merge(s);
    const std::uint32_t p = s.partition_count(w);
    CHECK(r.sent == r.received);
    CHECK(r.held == r.generated);
    CHECK(r.generated == 2 * p * s.rows);
    CHECK(r.joined == key_merge_oracle(s, p));
    c.shutdown();
  }
}

TEST_CASE("heartbeats arrive at the configured rate") {
  ClusterConfig cfg = sim_config(2);
  cfg.heartbeat_interval = Nanos{10};
  Cluster c(cfg);
  const auto before = c.heartbeat_stats();
  c.run_for(Nanos{100});
  const auto after = c.heartbeat_stats();
  for (std::uint32_t r = kFirstWorkerRank; r < kFirstWorkerRank + 2; ++r) {
    CHECK(after.beats.at(r) - before.beats.at(r) >= 9);
  }
  CHECK(after.suspects.empty());
  c.shutdown();
}

TEST_CASE("heartbeats keep flowing during a large exchange") {
  ClusterConfig cfg = socket_config(3);
  cfg.heartbeat_interval = std::chrono::milliseconds(20);
  Cluster c(cfg);
  TransposeSpec s;
  s.dims = 2048;
  s.block = 256;
  const auto r = c.transpose_sum(s);
  CHECK(r.checksum == transpose_oracle(s).checksum);
  const auto hb = c.heartbeat_stats();
  CHECK(hb.suspects.empty());
  for (auto& [rank, gap] : hb.max_gap) CHECK(gap <= cfg.heartbeat_interval * 3);
  c.shutdown();
}

TEST_CASE("a silent worker is reported after three missed intervals") {
  ClusterConfig cfg = sim_config(3);
  cfg.heartbeat_interval = Nanos{1000};
  Cluster c(cfg);
  c.run_for(Nanos{5000});
  REQUIRE(c.heartbeat_stats().suspects.empty());
  c.kill_worker(RankId{3});
  c.run_for(Nanos{10000});
  const auto hb = c.heartbeat_stats();
  REQUIRE(hb.suspects.size() == 1);
  CHECK(hb.suspects[0].worker.value == 3);
  CHECK(hb.suspects[0].silence > Nanos{3000});
  CHECK(hb.suspects[0].silence <= Nanos{4000});
  // The others kept beating and the cluster still answers.
  TransposeSpec s;
  s.dims = 8;
  s.block = 2;
  CHECK(c.transpose_sum(s).checksum == transpose_oracle(s).checksum);
  c.shutdown();
}

TEST_CASE("shutdown is idempotent and destruction without it is clean") {
  {
    Cluster c(sim_config(2));
    c.shutdown();
    c.shutdown();
  }
  {
    Cluster c(socket_config(2));
    CHECK(c.registered_workers().size() == 2);
  }
}
