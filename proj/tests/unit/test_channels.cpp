#include "doctest.h"
#include "test_util.hpp"

#include "commshim/channels.hpp"
#include "commshim/sync.hpp"

#include <cstdlib>
#include <map>
#include <set>

using namespace commshim;

namespace {

struct Ranks {
  VirtualClock clock;
  std::unique_ptr<SimFabric> fabric;
  std::unique_ptr<Executor> ex;
  std::vector<std::unique_ptr<SimTransport>> transports;
  std::vector<std::unique_ptr<CommTable>> tables;

  explicit Ranks(std::uint32_t n, std::size_t capacity = kDefaultDupCache) {
    fabric = std::make_unique<SimFabric>(clock, n);
    ex = std::make_unique<Executor>(clock);
    ex->add_source(fabric.get());
    for (std::uint32_t r = 0; r < n; ++r) {
      transports.push_back(fabric->attach(RankId{r}));
      tables.push_back(std::make_unique<CommTable>(*transports.back(), capacity));
    }
  }
  ~Ranks() {
    ex->shutdown();
    tables.clear();
    ex->remove_source(fabric.get());
    transports.clear();
  }
  CommTable& operator[](std::uint32_t r) { return *tables[r]; }
};

// The pair enumeration written out as the double loop over ranks.
std::map<std::pair<std::uint32_t, std::uint32_t>, std::uint32_t> enumerate_pairs(std::uint32_t n) {
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::uint32_t> out;
  std::uint32_t next = 1;
  for (std::uint32_t i = 0; i < n; ++i) {
    for (std::uint32_t j = i + 1; j < n; ++j) out[{i, j}] = next++;
  }
  return out;
}

ErrorCode code_of(auto&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::io;
}

}  // namespace

TEST_CASE("table sizes for small worlds") {
  Ranks one(1);
  CHECK(one[0].size() == 0);
  Ranks two(2);
  CHECK(two[0].size() == 1);
  CHECK(two[1].size() == 1);
  Ranks four(4);
  std::set<std::uint32_t> global;
  for (std::uint32_t r = 0; r < 4; ++r) {
    CHECK(four[r].size() == 3);
    for (const auto& c : four[r].base_channels()) global.insert(c.id.value);
  }
  CHECK(global.size() == 6);
}

TEST_CASE("global agreement and count law for n = 1..8") {
  for (std::uint32_t n = 1; n <= 8; ++n) {
    Ranks w(n);
    const auto oracle = enumerate_pairs(n);
    std::set<std::uint32_t> global;
    for (std::uint32_t r = 0; r < n; ++r) {
      CHECK(w[r].size() == n - 1);
      for (std::uint32_t p = 0; p < n; ++p) {
        if (p == r) continue;
        const Channel c = w[r].lookup(RankId{p});
        const Channel other = w[p].lookup(RankId{r});
        CHECK(c == other);
        CHECK(c.low.value == std::min(r, p));
        CHECK(c.high.value == std::max(r, p));
        CHECK(c.low < c.high);
        CHECK(c.generation == 0);
        CHECK(c.id.value == oracle.at({std::min(r, p), std::max(r, p)}));
        global.insert(c.id.value);
      }
    }
    CHECK(global.size() == pair_count(n));
    CHECK(global.count(0) == 0);
  }
}

TEST_CASE("base ids stay below the duplicate namespace at the maximum world size") {
  const std::uint32_t n = kMaxWorldSize;
  const std::uint32_t last = base_channel_id(RankId{n - 2}, RankId{n - 1}, n);
  CHECK(last == pair_count(n));
  CHECK(last <= 0xFFFF);
  CHECK((dup_channel_id(last, kMaxGeneration) >> 16) == last);
}

TEST_CASE("verify agrees over the world channel") {
  Ranks w(5);
  std::vector<Task<>> tasks;
  for (std::uint32_t r = 0; r < 5; ++r) tasks.push_back(w[r].verify(*w.ex, std::chrono::milliseconds(1)));
  w.ex->block_on(when_all(*w.ex, std::move(tasks)));
}

TEST_CASE("verify names a rank that never joins") {
  Ranks w(3);
  auto h = w.ex->spawn(w[0].verify(*w.ex, std::chrono::microseconds(50)));
  w.ex->run_until([&] { return h.done(); });
  REQUIRE(h.done());
  try {
    h.get();
    FAIL("expected startup failure");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::startup);
    CHECK(std::string(e.what()).find("rank(s) 1, 2") != std::string::npos);
  }
}

TEST_CASE("lookup errors") {
  Ranks w(4);
  CHECK(code_of([&] { (void)w[0].lookup(RankId{0}); }) == ErrorCode::usage);
  CHECK(code_of([&] { (void)w[0].lookup(RankId{7}); }) == ErrorCode::usage);
  CHECK(code_of([&] { (void)w[0].duplicate(RankId{0}); }) == ErrorCode::usage);
}

TEST_CASE("duplicate, release and cache reuse") {
  Ranks w(4);
  std::set<std::uint32_t> base;
  for (auto& c : w[0].base_channels()) base.insert(c.id.value);

  const Channel d1 = w[0].duplicate(RankId{3});
  CHECK(d1.generation == 1);
  CHECK(base.count(d1.id.value) == 0);
  CHECK(d1.id.value == ((base_channel_id(RankId{0}, RankId{3}, 4) << 16) | 1));
  CHECK(w[0].transport().has_channel(d1.id));

  w[0].release(d1);
  CHECK(w[0].cache_size(RankId{3}) == 1);
  const Channel again = w[0].duplicate(RankId{3});
  CHECK(again.id == d1.id);
  CHECK(w[0].stats().cache_hits == 1);

  const Channel d2 = w[0].duplicate(RankId{3});
  CHECK(d2.generation == 2);
  CHECK(d2.id != d1.id);
}

TEST_CASE("cache disabled") {
  Ranks w(2, 0);
  for (int i = 0; i < 5; ++i) {
    const Channel d = w[0].duplicate(RankId{1});
    CHECK(d.generation == static_cast<std::uint32_t>(i + 1));
    w[0].release(d);
    CHECK_FALSE(w[0].transport().has_channel(d.id));
  }
  CHECK(w[0].stats().cache_hits == 0);
  CHECK(w[0].stats().created == 5);
}

TEST_CASE("release with a full cache destroys the channel") {
  Ranks w(2, 2);
  std::vector<Channel> dups;
  for (int i = 0; i < 3; ++i) dups.push_back(w[0].duplicate(RankId{1}));
  w[0].release(dups[0]);
  w[0].release(dups[1]);
  CHECK(w[0].cache_size(RankId{1}) == 2);
  w[0].release(dups[2]);
  CHECK(w[0].cache_size(RankId{1}) == 2);
  std::vector<std::byte> b(1);
  CHECK(code_of([&] {
          (void)w[0].transport().post_send(dups[2].id, RankId{1}, Tag{100}, ConstRegion::of(b));
        }) == ErrorCode::channel);
}

TEST_CASE("release errors") {
  Ranks w(2);
  const Channel base = w[0].lookup(RankId{1});
  CHECK(code_of([&] { w[0].release(base); }) == ErrorCode::usage);
  CHECK(code_of([&] { w[0].release(Channel{ChannelId::world(), RankId{0}, RankId{1}, 0}); }) == ErrorCode::usage);

  const Channel d = w[0].duplicate(RankId{1});
  std::vector<std::byte> b(1);
  auto req = w[0].transport().post_recv(d.id, RankId{1}, Tag{100}, MutableRegion::of(b));
  CHECK(code_of([&] { w[0].release(d); }) == ErrorCode::busy);
  CHECK(w[0].transport().cancel(req));
  w[0].release(d);
  CHECK(w[0].cache_size(RankId{1}) == 1);
}

TEST_CASE("adopt registers the peer's duplicate") {
  Ranks w(3);
  const Channel minted = w[0].duplicate(RankId{2});
  const Channel adopted = w[2].adopt(RankId{0}, minted.id);
  CHECK(adopted == minted);
  CHECK(w[2].transport().has_channel(minted.id));
  CHECK(w[2].stats().adopted == 1);
  // An id from another pair's namespace is rejected.
  const Channel wrong = w[0].duplicate(RankId{1});
  CHECK_THROWS_AS(w[2].adopt(RankId{0}, wrong.id), Error);
  // Adopted channels are destroyed on release, never cached.
  w[2].release(adopted);
  CHECK(w[2].cache_size(RankId{0}) == 0);
  CHECK_FALSE(w[2].transport().has_channel(minted.id));
}

TEST_CASE("COMMSHIM_DUP_CACHE override") {
  ::setenv("COMMSHIM_DUP_CACHE", "3", 1);
  CHECK(dup_cache_from_env() == 3);
  ::setenv("COMMSHIM_DUP_CACHE", "-1", 1);
  CHECK_THROWS_AS(dup_cache_from_env(), Error);
  ::unsetenv("COMMSHIM_DUP_CACHE");
  CHECK(dup_cache_from_env() == kDefaultDupCache);
}

TEST_CASE("property: cache bound under random duplicate/release interleavings") {
  std::mt19937_64 rng(31);
  for (std::size_t capacity : {std::size_t{0}, std::size_t{1}, std::size_t{4}, std::size_t{16}}) {
    Ranks w(4, capacity);
    std::vector<Channel> live;
    std::set<std::uint32_t> live_ids;
    for (int step = 0; step < 2000; ++step) {
      const RankId peer{1 + static_cast<std::uint32_t>(rng() % 3)};
      if (live.empty() || rng() % 2) {
        const Channel c = w[0].duplicate(peer);
        CHECK(live_ids.insert(c.id.value).second);  // never hand out a live id twice
        live.push_back(c);
      } else {
        const std::size_t i = rng() % live.size();
        w[0].release(live[i]);
        live_ids.erase(live[i].id.value);
        live.erase(live.begin() + static_cast<std::ptrdiff_t>(i));
      }
      for (std::uint32_t p = 1; p < 4; ++p) CHECK(w[0].cache_size(RankId{p}) <= capacity);
    }
  }
}

TEST_CASE("property: base and duplicate of one pair never interleave payloads") {
  std::mt19937_64 rng(41);
  Ranks w(2);
  const Channel base = w[0].lookup(RankId{1});
  const Channel dup = w[0].duplicate(RankId{1});
  w[1].adopt(RankId{0}, dup.id);
  std::vector<Transport*> all{&w[0].transport(), &w[1].transport()};
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 256;
    std::vector<std::byte> a(n, std::byte{0x11}), b(n, std::byte{0x22}), ia(n), ib(n);
    std::vector<int> order{0, 1, 2, 3};
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<RequestPtr> reqs;
    for (int o : order) {
      auto& t0 = w[0].transport();
      auto& t1 = w[1].transport();
      if (o == 0) reqs.push_back(t0.post_send(base.id, RankId{1}, Tag{100}, ConstRegion::of(a)));
      if (o == 1) reqs.push_back(t0.post_send(dup.id, RankId{1}, Tag{100}, ConstRegion::of(b)));
      if (o == 2) reqs.push_back(t1.post_recv(base.id, RankId{0}, Tag{100}, MutableRegion::of(ia)));
      if (o == 3) reqs.push_back(t1.post_recv(dup.id, RankId{0}, Tag{100}, MutableRegion::of(ib)));
      if (rng() % 2) all[rng() % 2]->progress();
    }
    testutil::settle(*w.fabric, all, reqs);
    CHECK(ia == a);
    CHECK(ib == b);
  }
}
