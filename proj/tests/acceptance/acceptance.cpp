// Acceptance runner: one PASS/FAIL line per criterion, each with its measured
// quantities and runtime bound. Exit status is non-zero if any line fails.
//
//   commshim_acceptance [name-substring ...]

#include "commshim/bench.hpp"
#include "commshim/harness.hpp"
#include "commshim/wire.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>

using namespace commshim;

namespace {

struct Outcome {
  bool ok = true;
  std::string detail;
};

// Collects failed expectations without stopping at the first one.
struct Verdict {
  std::vector<std::string> problems;
  void expect(bool cond, const std::string& what) {
    if (!cond && problems.size() < 8) problems.push_back(what);
    if (!cond && problems.size() == 8) problems.push_back("...");
  }
  Outcome outcome(std::string detail) const {
    if (problems.empty()) return {true, std::move(detail)};
    std::string all;
    for (const auto& p : problems) all += (all.empty() ? "" : "; ") + p;
    return {false, detail + " | " + all};
  }
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::size_t log_uniform(std::size_t max, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> e(0.0, std::log2(static_cast<double>(max) + 1.0));
  return std::min(max, static_cast<std::size_t>(std::exp2(e(rng))) - 1);
}

std::vector<std::byte> random_bytes(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::byte> out(n);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const std::uint64_t v = rng();
    std::memcpy(out.data() + i, &v, 8);
  }
  for (; i < n; ++i) out[i] = static_cast<std::byte>(rng());
  return out;
}

// ---- chunk algebra --------------------------------------------------------------

Outcome chunk_algebra() {
  Verdict v;
  // Worked example: 3.5 GB in 1 GiB chunks.
  const auto big = chunk_plan(3'500'000'000ull, std::size_t{1} << 30);
  v.expect(big.slices.size() == 4, "3.5 GB at 1 GiB gave " + std::to_string(big.slices.size()) + " chunks");
  v.expect(big.slices.back().length == 3'500'000'000ull - 3 * (std::size_t{1} << 30), "3.5 GB tail length");

  std::mt19937_64 rng(20240601);
  std::size_t cases = 0, empty = 0;
  for (; cases < 10000; ++cases) {
    const std::size_t total = rng() % 8 == 0 ? 0 : log_uniform(std::size_t{1} << 40, rng);
    // Keep plans materializable: at most ~10^5 slices.
    const std::size_t floor = total / 100000 + 1;
    const std::size_t max_chunk = std::max(floor, 1 + log_uniform(std::max<std::size_t>(total, 1) * 2, rng));
    const auto plan = chunk_plan(total, max_chunk);
    const std::size_t want = total == 0 ? 0 : static_cast<std::size_t>((static_cast<unsigned __int128>(total) + max_chunk - 1) / max_chunk);
    v.expect(plan.slices.size() == want, fmt("count %zu for total %zu max %zu", plan.slices.size(), total, max_chunk));
    std::size_t sum = 0, next = 0;
    bool ok = true;
    for (const auto& s : plan.slices) {
      ok = ok && s.offset == next && s.length <= max_chunk && s.length > 0;
      next += s.length;
      sum += s.length;
    }
    v.expect(ok, fmt("contiguity/bound for total %zu max %zu", total, max_chunk));
    v.expect(sum == total, fmt("sum %zu != total %zu", sum, total));
    empty += total == 0;
  }
  bool refused = false;
  try {
    chunk_plan(10, 0);
  } catch (const Error& e) {
    refused = e.code() == ErrorCode::usage;
  }
  v.expect(refused, "max_chunk 0 not refused");
  return v.outcome(fmt("%zu random cases (%zu empty), 3.5 GB / 1 GiB -> %zu chunks", cases, empty, big.slices.size()));
}

// ---- end-to-end identity --------------------------------------------------------

Message corpus_message(std::mt19937_64& rng, bool include_extremes) {
  Message m;
  const std::size_t frames = include_extremes ? 8 : rng() % 9;
  for (std::size_t f = 0; f < frames; ++f) {
    std::size_t len = log_uniform(std::size_t{4} << 20, rng);
    if (include_extremes && f == 0) len = std::size_t{4} << 20;
    if (include_extremes && f == 1) len = 0;
    const MemoryDomain d = rng() % 2 ? MemoryDomain::device_sim : MemoryDomain::host;
    Frame fr = Frame::raw(random_bytes(len, rng), d);
    fr.serializer_tag = serializer::raw;
    m.frames.push_back(std::move(fr));
  }
  return m;
}

bool same_message(const Message& a, const Message& b) {
  if (a.frames.size() != b.frames.size()) return false;
  for (std::size_t i = 0; i < a.frames.size(); ++i) {
    if (a.frames[i].domain() != b.frames[i].domain() || a.frames[i].length() != b.frames[i].length()) return false;
    if (a.frames[i].data.to_host() != b.frames[i].data.to_host()) return false;
  }
  return true;
}

Outcome end_to_end_identity() {
  std::mt19937_64 rng(77001);
  std::vector<Message> corpus;
  corpus.push_back(corpus_message(rng, true));
  corpus.push_back(Message{});  // zero frames
  for (int i = 0; i < 6; ++i) corpus.push_back(corpus_message(rng, false));
  std::size_t corpus_bytes = 0, corpus_frames = 0;
  for (const auto& m : corpus) {
    corpus_frames += m.frames.size();
    for (const auto& f : m.frames) corpus_bytes += f.length();
  }

  Verdict v;
  int configs = 0;
  for (TransportKind kind : {TransportKind::sim, TransportKind::socket}) {
    for (bool periodic : {false, true}) {
      for (std::size_t max_chunk : {std::size_t{17}, std::size_t{64} << 10, std::size_t{1} << 20}) {
        WorldConfig c;
        c.world_size = 2;
        c.transport = kind;
        c.messenger.max_chunk = max_chunk;
        if (periodic) {
          c.messenger.mode = ProgressMode::periodic(kind == TransportKind::sim ? Nanos{10'000} : Nanos{2'000});
        }
        World w(c);
        w.run(w.bootstrap());
        std::vector<Message> got;
        EndpointPtr served;
        auto listener = w.node(RankId{1}).listen(Address{RankId{1}}, [&](EndpointPtr ep) -> Task<> {
          served = ep;
          for (;;) {
            auto m = co_await ep->read();
            if (!m) break;
            got.push_back(std::move(*m));
          }
          co_await ep->close();
        });
        auto client = [&]() -> Task<> {
          EndpointPtr ep = co_await w.node(RankId{0}).connect(Address{RankId{1}});
          for (const auto& m : corpus) co_await ep->write(m);
          co_await ep->close();
        };
        w.run(client());
        w.executor().run_until([&] { return served && !served->is_open(); });
        listener->stop();
        const std::string name = fmt("%s/%s/chunk=%zu", to_string(kind), periodic ? "periodic" : "cooperative", max_chunk);
        v.expect(got.size() == corpus.size(), name + fmt(": %zu of %zu messages", got.size(), corpus.size()));
        bool all_same = got.size() == corpus.size();
        for (std::size_t i = 0; all_same && i < corpus.size(); ++i) all_same = same_message(got[i], corpus[i]);
        v.expect(all_same, name + ": bytes differ");
        ++configs;
      }
    }
  }
  return v.outcome(fmt("%zu messages, %zu frames, %.1f MiB corpus; %d configurations byte-identical", corpus.size(),
                       corpus_frames, static_cast<double>(corpus_bytes) / (1 << 20), configs));
}

// ---- comm-table law -------------------------------------------------------------

Outcome comm_table_law() {
  Verdict v;
  std::size_t checked = 0;
  for (std::uint32_t n = 1; n <= 8; ++n) {
    WorldConfig c;
    c.world_size = n;
    World w(c);
    w.run(w.bootstrap());
    // Reference numbering: the pair double loop.
    std::map<std::pair<std::uint32_t, std::uint32_t>, std::uint32_t> ref;
    std::uint32_t next = 1;
    for (std::uint32_t i = 0; i < n; ++i) {
      for (std::uint32_t j = i + 1; j < n; ++j) ref[{i, j}] = next++;
    }
    std::set<std::uint32_t> global;
    for (std::uint32_t r = 0; r < n; ++r) {
      v.expect(w.table(RankId{r}).size() == n - 1, fmt("n=%u rank %u table size", n, r));
      for (const auto& ch : w.table(RankId{r}).base_channels()) global.insert(ch.id.value);
      for (std::uint32_t p = 0; p < n; ++p) {
        if (p == r) continue;
        const Channel a = w.table(RankId{r}).lookup(RankId{p});
        const Channel b = w.table(RankId{p}).lookup(RankId{r});
        v.expect(a == b, fmt("n=%u ranks %u/%u disagree", n, r, p));
        v.expect(a.id.value == ref.at({std::min(r, p), std::max(r, p)}), fmt("n=%u pair %u,%u id", n, r, p));
        ++checked;
      }
    }
    v.expect(global.size() == static_cast<std::size_t>(n) * (n - 1) / 2,
             fmt("n=%u has %zu base channels", n, global.size()));
  }
  return v.outcome(fmt("n = 1..8: channel count n(n-1)/2 and %zu ordered-pair lookups agree", checked));
}

// ---- isolation soak -------------------------------------------------------------

struct SoakLog {
  std::uint64_t sent = 0;
  std::uint64_t received = 0;
  std::uint64_t crossed = 0;    // label, direction or payload mismatch
  std::uint64_t lost = 0;       // count announced vs counted
  std::uint64_t sides_done = 0;
};

constexpr std::uint64_t kDoneSeq = ~std::uint64_t{0};

std::vector<std::byte> soak_payload(std::uint32_t label, std::uint8_t dir, std::uint64_t seq, std::size_t len) {
  std::vector<std::byte> out(13 + len);
  std::byte* p = out.data();
  wire::put_le<std::uint32_t>(p, label);
  wire::put_u8(p, dir);
  wire::put_le<std::uint64_t>(p, seq);
  std::uint64_t s = mix64((static_cast<std::uint64_t>(label) << 40) ^ (static_cast<std::uint64_t>(dir) << 39) ^ seq);
  for (std::size_t i = 0; i < len; ++i) {
    s = s * 6364136223846793005ull + 1442695040888963407ull;
    out[13 + i] = static_cast<std::byte>(s >> 56);
  }
  return out;
}

Message soak_message(std::uint32_t label, std::uint8_t dir, std::uint64_t seq, std::size_t len) {
  Message m;
  m.frames.push_back(Frame::raw(soak_payload(label, dir, seq, len)));
  return m;
}

Task<> soak_side(Executor& ex, EndpointPtr ep, std::uint32_t label, std::uint8_t dir, Nanos until, SoakLog& log) {
  std::mt19937_64 rng(mix64(label * 2 + dir));
  std::uint64_t sent = 0;
  auto writer = [&]() -> Task<> {
    while (ex.now() < until) {
      co_await ep->write(soak_message(label, dir, sent, rng() % 1500));
      ++sent;
      ++log.sent;
      co_await ex.sleep_for(Nanos{static_cast<std::int64_t>(rng() % 200)});
    }
    // The done marker carries the writer's count in a second frame.
    Message done = soak_message(label, dir, kDoneSeq, 0);
    std::vector<std::byte> count(8);
    std::byte* c = count.data();
    wire::put_le<std::uint64_t>(c, sent);
    done.frames.push_back(Frame::raw(count));
    co_await ep->write(done);
  };
  auto reader = [&]() -> Task<> {
    std::uint64_t expect = 0;
    for (;;) {
      auto m = co_await ep->read();
      if (!m || m->frames.empty()) {
        ++log.lost;
        co_return;
      }
      const auto bytes = m->frames[0].data.to_host();
      if (bytes.size() < 13) {
        ++log.crossed;
        continue;
      }
      const std::byte* p = bytes.data();
      const auto got_label = wire::get_le<std::uint32_t>(p);
      const auto got_dir = wire::get_le<std::uint8_t>(p);
      const auto seq = wire::get_le<std::uint64_t>(p);
      if (got_label != label || got_dir == dir) ++log.crossed;
      if (seq == kDoneSeq) {
        const auto cb = m->frames.at(1).data.to_host();
        const std::byte* q = cb.data();
        if (wire::get_le<std::uint64_t>(q) != expect) ++log.lost;
        co_return;
      }
      if (seq != expect) ++log.lost;
      if (bytes != soak_payload(got_label, got_dir, seq, bytes.size() - 13)) ++log.crossed;
      expect = seq + 1;
      ++log.received;
    }
  };
  std::vector<Task<>> both;
  both.push_back(writer());
  both.push_back(reader());
  co_await when_all(ex, std::move(both));
  co_await ep->close();
  ++log.sides_done;
}

Outcome isolation_soak() {
  constexpr std::uint32_t kRanks = 4, kPerPair = 8;
  const Nanos until{100'000};
  WorldConfig c;
  c.world_size = kRanks;
  c.messenger.max_chunk = 512;  // multi-chunk frames interleave too
  World w(c);
  w.run(w.bootstrap());
  Executor& ex = w.executor();
  SoakLog log;
  std::vector<std::shared_ptr<Listener>> listeners;
  for (std::uint32_t r = 0; r < kRanks; ++r) {
    listeners.push_back(w.node(RankId{r}).listen(Address{RankId{r}}, [&](EndpointPtr ep) -> Task<> {
      // The dialer announces its label first.
      auto hello = co_await ep->read();
      const auto b = hello->frames.at(0).data.to_host();
      const std::byte* p = b.data();
      const auto label = wire::get_le<std::uint32_t>(p);
      co_await soak_side(ex, ep, label, 1, until, log);
    }));
  }
  std::vector<JoinHandle<void>> dialers;
  std::uint32_t label = 0;
  for (std::uint32_t i = 0; i < kRanks; ++i) {
    for (std::uint32_t j = i + 1; j < kRanks; ++j) {
      for (std::uint32_t k = 0; k < kPerPair; ++k, ++label) {
        // Alternate which side dials.
        const RankId from{k % 2 ? j : i}, to{k % 2 ? i : j};
        dialers.push_back(ex.spawn([](World& w, Executor& ex, RankId from, RankId to, std::uint32_t label,
                                      Nanos until, SoakLog& log) -> Task<> {
          EndpointPtr ep = co_await w.node(from).connect(Address{to});
          co_await ep->write(soak_message(label, 0, 0, 0));
          co_await soak_side(ex, ep, label, 0, until, log);
        }(w, ex, from, to, label, until, log)));
      }
    }
  }
  const std::uint64_t endpoints = label;
  RunLimits limits;
  limits.max_time = ex.now() + Nanos{50'000'000};
  const RunStatus st = ex.run_until([&] { return log.sides_done == 2 * endpoints; }, limits);
  for (auto& l : listeners) l->stop();
  Verdict v;
  v.expect(st == RunStatus::done, std::string("run ended: ") + Executor::describe(st));
  v.expect(log.sides_done == 2 * endpoints, fmt("%llu of %llu endpoint sides finished",
                                                (unsigned long long)log.sides_done, (unsigned long long)(2 * endpoints)));
  v.expect(log.crossed == 0, fmt("%llu cross-talk events", (unsigned long long)log.crossed));
  v.expect(log.lost == 0, fmt("%llu lost or reordered", (unsigned long long)log.lost));
  v.expect(log.sent == log.received, fmt("sent %llu, received %llu", (unsigned long long)log.sent,
                                         (unsigned long long)log.received));
  for (auto& h : dialers) {
    if (h.failed()) {
      try {
        h.get();
      } catch (const std::exception& e) {
        v.expect(false, e.what());
      }
    }
  }
  return v.outcome(fmt("%u ranks, %llu endpoints (%u per pair), %llu messages over %lld virtual ticks; "
                       "cross-talk %llu, lost %llu",
                       kRanks, (unsigned long long)endpoints, kPerPair, (unsigned long long)log.received,
                       (long long)until.count(), (unsigned long long)log.crossed, (unsigned long long)log.lost));
}

// ---- deadlock freedom -----------------------------------------------------------

Outcome deadlock_freedom() {
  constexpr std::uint32_t n = 16;
  constexpr std::size_t payload = 200'000;  // several chunks each way
  WorldConfig c;
  c.world_size = n;
  c.messenger.max_chunk = kCliMaxChunk;
  World w(c);
  Executor& ex = w.executor();
  std::vector<std::vector<std::byte>> inbox(n * n);
  auto exchange = [&](std::uint32_t r) -> Task<> {
    Messenger& m = w.messenger(RankId{r});
    std::vector<std::vector<std::byte>> out(n);
    std::vector<Task<>> ops;
    for (std::uint32_t p = 0; p < n; ++p) {
      if (p == r) continue;
      const Channel ch = w.table(RankId{r}).lookup(RankId{p});
      out[p] = soak_payload(r, 0, p, payload);
      inbox[r * n + p].resize(out[p].size());
      // Every task sends before it receives; with blocking sends this is
      // the textbook deadlock.
      ops.push_back(m.send_chunks(ch.id, RankId{p}, tags::data(0), ConstRegion::of(out[p])));
    }
    for (std::uint32_t p = 0; p < n; ++p) {
      if (p == r) continue;
      const Channel ch = w.table(RankId{r}).lookup(RankId{p});
      ops.push_back(m.recv_chunks(ch.id, RankId{p}, tags::data(0), MutableRegion::of(inbox[r * n + p])));
    }
    co_await when_all(ex, std::move(ops));
  };
  std::vector<JoinHandle<void>> tasks;
  const Nanos t0 = ex.now();
  for (std::uint32_t r = 0; r < n; ++r) tasks.push_back(ex.spawn(exchange(r)));
  RunLimits limits;
  limits.max_time = t0 + Nanos{1'000'000};
  const RunStatus st =
      ex.run_until([&] { return std::all_of(tasks.begin(), tasks.end(), [](auto& h) { return h.done(); }); }, limits);
  const Nanos took = ex.now() - t0;
  Verdict v;
  v.expect(st == RunStatus::done, std::string("exchange did not finish: ") + Executor::describe(st));
  for (auto& h : tasks) {
    if (h.failed()) {
      try {
        h.get();
      } catch (const std::exception& e) {
        v.expect(false, e.what());
      }
    }
  }
  bool data_ok = true;
  for (std::uint32_t r = 0; r < n && st == RunStatus::done; ++r) {
    for (std::uint32_t p = 0; p < n; ++p) {
      if (p != r) data_ok = data_ok && inbox[r * n + p] == soak_payload(p, 0, r, payload);
    }
  }
  v.expect(data_ok, "exchanged payloads differ");
  return v.outcome(fmt("%u tasks, %u transfers of %zu B, done in %lld virtual ticks (budget 1000000)", n, n * (n - 1),
                       payload, (long long)took.count()));
}

// ---- progress-mode A/B ----------------------------------------------------------

Outcome progress_mode_ab() {
  WorldConfig coop;
  coop.world_size = 2;
  coop.messenger.max_chunk = kCliMaxChunk;
  WorldConfig per = coop;
  per.messenger.mode = ProgressMode::periodic(std::chrono::milliseconds(1));
  SweepSpec spec;
  spec.sizes = default_sizes();
  std::vector<BenchRecord> a, b;
  {
    World w(coop);
    a = pingpong(w, spec);
  }
  {
    World w(per);
    b = pingpong(w, spec);
  }
  Verdict v;
  const double ratio = b.at(0).mean_s / a.at(0).mean_s;
  v.expect(a[0].size == 1 && ratio >= 2.0, fmt("1 B ratio %.3g < 2", ratio));
  std::size_t ordered = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool ok = a[i].mean_s <= b[i].mean_s;
    ordered += ok;
    v.expect(ok, fmt("size %llu: cooperative %.6g s > periodic %.6g s", (unsigned long long)a[i].size, a[i].mean_s,
                     b[i].mean_s));
  }
  return v.outcome(fmt("1 B mean latency cooperative %.4g s vs periodic(1 ms) %.4g s, ratio %.3g (need >= 2); "
                       "ordering holds at %zu/%zu sizes (1 B..128 MiB)",
                       a[0].mean_s, b[0].mean_s, ratio, ordered, a.size()));
}

// ---- application oracles --------------------------------------------------------

Outcome application_oracles() {
  Verdict v;
  TransposeSpec ts;
  ts.dims = 256;
  ts.block = 64;
  const auto oracle = transpose_oracle(ts);
  std::vector<std::string> checks;
  for (std::uint32_t workers : {1u, 2u, 4u}) {
    ClusterConfig c;
    c.world.world_size = kFirstWorkerRank + workers;
    c.world.messenger.max_chunk = kCliMaxChunk;
    Cluster cluster(c);
    const auto r = cluster.transpose_sum(ts);
    cluster.shutdown();
    v.expect(r.checksum == oracle.checksum && r.total == oracle.total,
             fmt("transpose %u workers: checksum %llu vs oracle %llu", workers, (unsigned long long)r.checksum,
                 (unsigned long long)oracle.checksum));
  }
  checks.push_back(fmt("transpose 256x256/64 checksum %llu on 1, 2, 4 workers", (unsigned long long)oracle.checksum));

  for (double fraction : {0.0, 0.3, 1.0}) {
    std::string counts;
    for (std::uint32_t workers : {1u, 2u, 4u}) {
      KeyMergeSpec km;
      km.rows = 10000;
      km.fraction = fraction;
      // Brute-force reference over the full generated tables.
      KeyTable left, right;
      for (std::uint32_t p = 0; p < workers; ++p) {
        auto l = generate_partition(km, p, workers, Side::left);
        auto r = generate_partition(km, p, workers, Side::right);
        left.keys.insert(left.keys.end(), l.keys.begin(), l.keys.end());
        right.keys.insert(right.keys.end(), r.keys.begin(), r.keys.end());
      }
      const std::uint64_t want = nested_loop_join_count(left, right);
      ClusterConfig c;
      c.world.world_size = kFirstWorkerRank + workers;
      c.world.messenger.max_chunk = kCliMaxChunk;
      Cluster cluster(c);
      const auto r = cluster.key_merge(km);
      cluster.shutdown();
      v.expect(r.joined == want, fmt("key_merge f=%.1f w=%u: %llu vs brute force %llu", fraction, workers,
                                     (unsigned long long)r.joined, (unsigned long long)want));
      v.expect(r.sent == r.received && r.held == r.generated, fmt("key_merge f=%.1f w=%u: rows not conserved", fraction, workers));
      counts += (counts.empty() ? "" : "/") + std::to_string(r.joined);
    }
    checks.push_back(fmt("key_merge f=%.1f joined %s", fraction, counts.c_str()));
  }
  std::string detail;
  for (const auto& c : checks) detail += (detail.empty() ? "" : "; ") + c;
  return v.outcome(detail);
}

// ---- heartbeat liveness ---------------------------------------------------------

Outcome heartbeat_liveness() {
  Verdict v;
  std::string detail;
  for (TransportKind kind : {TransportKind::sim, TransportKind::socket}) {
    ClusterConfig c;
    c.world.world_size = kFirstWorkerRank + 2;
    c.world.transport = kind;
    c.world.messenger.max_chunk = kCliMaxChunk;
    if (kind == TransportKind::socket) c.heartbeat_interval = std::chrono::milliseconds(10);
    Cluster cluster(c);
    TransposeSpec ts;
    ts.dims = 4096;
    ts.block = 256;
    const auto r = cluster.transpose_sum(ts);
    const auto hb = cluster.heartbeat_stats();
    cluster.shutdown();
    const Nanos interval = cluster.heartbeat_interval();
    Nanos worst{0};
    std::uint64_t beats = 0;
    for (auto& [rank, g] : hb.max_gap) worst = std::max(worst, g);
    for (auto& [rank, n] : hb.beats) beats += n;
    v.expect(r.bytes_exchanged >= (std::uint64_t{64} << 20), fmt("%s exchanged only %llu bytes", to_string(kind),
                                                                 (unsigned long long)r.bytes_exchanged));
    v.expect(r.checksum == transpose_oracle(ts).checksum, fmt("%s checksum wrong", to_string(kind)));
    v.expect(hb.suspects.empty(), fmt("%s: %zu missed-beat reports", to_string(kind), hb.suspects.size()));
    detail += fmt("%s%s: %.0f MiB exchanged in %.3g s (%s), %llu beats, worst gap %.2f intervals, %zu reports",
                  detail.empty() ? "" : "; ", to_string(kind), static_cast<double>(r.bytes_exchanged) / (1 << 20),
                  static_cast<double>(r.comm.count()) / 1e9, kind == TransportKind::sim ? "virtual" : "wall",
                  (unsigned long long)beats, static_cast<double>(worst.count()) / static_cast<double>(interval.count()),
                  hb.suspects.size());
  }
  return v.outcome(detail);
}

// ---- wire conformance -----------------------------------------------------------

std::string hex(std::span<const std::byte> b) {
  std::string out;
  for (auto x : b) out += fmt("%02X", static_cast<unsigned>(x));
  return out;
}

Outcome wire_conformance() {
  Verdict v;
  wire::FrameHeader h;
  h.channel = 0x01020304;
  h.tag = 0x0A0B0C0D;
  h.domain = MemoryDomain::device_sim;
  h.length = 0x1122334455667788ull;
  const auto fb = wire::encode_frame_header(h);
  // magic, version, channel, tag, domain, length; all little-endian.
  const std::string want_frame = "3144344D" "01" "04030201" "0D0C0B0A" "01" "8877665544332211";
  v.expect(hex(fb) == want_frame, "frame header " + hex(fb));
  v.expect(wire::kMagic == 0x4D344431, "magic constant");

  MessageHeader mh;
  mh.frames = {{3, serializer::raw, MemoryDomain::host}, {5, serializer::utf8, MemoryDomain::device_sim}};
  const auto mb = encode_message_header(mh);
  const std::string want_msg = "02000000" "0300000000000000" "00" "00" "0500000000000000" "01" "01";
  v.expect(hex(mb) == want_msg, "message header " + hex(mb));
  v.expect(decode_message_header(mb) == mh, "message header decode");
  MessageHeader eos;
  eos.end_of_stream = true;
  v.expect(hex(encode_message_header(eos)) == "FFFFFFFF", "end-of-stream header");

  // CSV schema and parse-back.
  std::vector<BenchRecord> rs;
  {
    WorldConfig c;
    c.world_size = 2;
    c.link.latency = 1e-6;
    World w(c);
    SweepSpec s;
    s.sizes = {0, 1, 4096, 1 << 20};
    s.measure_iters = 10;
    rs = pingpong(w, s);
  }
  std::ostringstream out;
  emit(rs, OutputFormat::csv, out);
  std::istringstream first(out.str());
  std::string header;
  std::getline(first, header);
  v.expect(header == "benchmark,transport,mode,size,iters,mean_s,median_s,p99_s,throughput_Bps", "CSV header " + header);
  std::istringstream in(out.str());
  const auto back = parse_csv(in);
  bool same = back.size() == rs.size();
  for (std::size_t i = 0; same && i < rs.size(); ++i) same = back[i].same_row(rs[i]);
  v.expect(same, "CSV parse-back differs");
  return v.outcome(fmt("frame header %s; message header %s; CSV %zu rows round-trip", want_frame.c_str(),
                       want_msg.c_str(), rs.size()));
}

struct Criterion {
  const char* name;
  double limit_s;  // 0: no runtime bound
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria = {
      {"chunk algebra", 5, chunk_algebra},
      {"end-to-end identity", 60, end_to_end_identity},
      {"comm-table law", 10, comm_table_law},
      {"isolation soak", 60, isolation_soak},
      {"deadlock freedom", 10, deadlock_freedom},
      {"progress-mode A/B", 30, progress_mode_ab},
      {"application oracles", 120, application_oracles},
      {"heartbeat liveness", 60, heartbeat_liveness},
      {"wire conformance", 0, wire_conformance},
  };
  int failures = 0, ran = 0;
  for (const auto& c : criteria) {
    if (argc > 1) {
      bool wanted = false;
      for (int i = 1; i < argc; ++i) wanted = wanted || std::string(c.name).find(argv[i]) != std::string::npos;
      if (!wanted) continue;
    }
    ++ran;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = c.limit_s == 0 || secs < c.limit_s;
    const bool pass = o.ok && in_time;
    failures += !pass;
    std::string timing = c.limit_s > 0 ? fmt("%.2f s (limit %.0f s)", secs, c.limit_s) : fmt("%.2f s", secs);
    if (!in_time) timing += " OVER TIME";
    std::cout << (pass ? "PASS" : "FAIL") << "  " << c.name << ": " << o.detail << " [" << timing << "]"
              << std::endl;
  }
  std::cout << (ran - failures) << "/" << ran << " criteria passed" << std::endl;
  return failures == 0 ? 0 : 1;
}
