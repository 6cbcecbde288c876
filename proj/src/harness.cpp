#include "commshim/harness.hpp"

#include "commshim/sync.hpp"
#include "commshim/wire.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>
#include <unordered_map>

namespace commshim {

using json = nlohmann::json;

// ---- roles --------------------------------------------------------------------

const char* to_string(Role role) {
  switch (role) {
    case Role::scheduler: return "scheduler";
    case Role::client: return "client";
    case Role::worker: return "worker";
  }
  return "?";
}

Role role_of(RankId rank, std::uint32_t world_size) {
  if (world_size < 3) {
    fail(ErrorCode::config, "cluster mode needs a scheduler, a client and at least one worker (world size >= 3), got " +
                                std::to_string(world_size));
  }
  if (rank.value >= world_size) fail(ErrorCode::usage, "rank " + std::to_string(rank.value) + " outside world");
  if (rank.value == 0) return Role::scheduler;
  if (rank.value == 1) return Role::client;
  return Role::worker;
}

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// ---- transpose-sum ------------------------------------------------------------

void TransposeSpec::validate() const {
  if (dims == 0 || block == 0) fail(ErrorCode::usage, "dims and block must be positive");
  if (dims % block != 0) {
    fail(ErrorCode::usage, "dims " + std::to_string(dims) + " is not divisible by block " + std::to_string(block));
  }
  // y values stay exactly representable in a double.
  if (static_cast<std::uint64_t>(dims) * dims > (std::uint64_t{1} << 50)) fail(ErrorCode::usage, "dims too large");
}

double x_value(const TransposeSpec& spec, std::uint64_t r, std::uint64_t c) {
  const std::uint64_t n = spec.dims;
  if (spec.pattern == Pattern::symmetric) return static_cast<double>(std::min(r, c) * n + std::max(r, c));
  return static_cast<double>(r * n + c);
}

TransposeResult transpose_oracle(const TransposeSpec& spec, bool keep_y) {
  spec.validate();
  const std::uint64_t n = spec.dims;
  TransposeResult out;
  out.workers = 1;
  if (keep_y) out.y.resize(n * n);
  for (std::uint64_t r = 0; r < n; ++r) {
    for (std::uint64_t c = 0; c < n; ++c) {
      const double y = x_value(spec, r, c) + x_value(spec, c, r);
      const auto yi = static_cast<std::uint64_t>(y);
      out.total += yi;
      out.checksum += yi * checksum_weight(n, r, c);
      if (keep_y) out.y[r * n + c] = y;
    }
  }
  return out;
}

// ---- key-merge ----------------------------------------------------------------

void KeyMergeSpec::validate() const {
  if (rows == 0) fail(ErrorCode::usage, "rows per partition must be at least 1");
  if (!(fraction >= 0.0 && fraction <= 1.0)) fail(ErrorCode::usage, "match fraction must lie in [0, 1]");
  if (rows >= (std::uint64_t{1} << 32)) fail(ErrorCode::usage, "rows per partition too large");
}

namespace {

constexpr std::uint64_t kUnmatchedBand = std::uint64_t{1} << 40;

struct Lcg {
  std::uint64_t state;
  std::uint64_t next() {
    state = state * 6364136223846793005ull + 1442695040888963407ull;
    return state;
  }
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
};

}  // namespace

KeyTable generate_partition(const KeyMergeSpec& spec, std::uint32_t partition, std::uint32_t partition_count,
                            Side side) {
  spec.validate();
  Lcg rng{mix64(spec.seed ^ mix64((static_cast<std::uint64_t>(partition) << 1) | static_cast<std::uint64_t>(side)))};
  KeyTable t;
  t.keys.reserve(spec.rows);
  t.values.reserve(spec.rows);
  const std::uint64_t base = static_cast<std::uint64_t>(partition) * spec.rows;
  const std::uint64_t left_total = static_cast<std::uint64_t>(partition_count) * spec.rows;
  for (std::uint64_t k = 0; k < spec.rows; ++k) {
    std::uint64_t key;
    if (side == Side::left) {
      key = base + k;
    } else if (rng.uniform() < spec.fraction) {
      key = rng.next() % left_total;
    } else {
      key = kUnmatchedBand + base + k;
    }
    t.keys.push_back(key);
    t.values.push_back(static_cast<double>(rng.next() >> 40));
  }
  return t;
}

std::uint64_t nested_loop_join_count(const KeyTable& left, const KeyTable& right) {
  std::uint64_t n = 0;
  for (auto l : left.keys) {
    for (auto r : right.keys) n += l == r;
  }
  return n;
}

std::uint64_t sort_merge_join_count(std::vector<std::uint64_t> left, std::vector<std::uint64_t> right) {
  std::sort(left.begin(), left.end());
  std::sort(right.begin(), right.end());
  std::uint64_t n = 0;
  std::size_t i = 0, j = 0;
  while (i < left.size() && j < right.size()) {
    if (left[i] < right[j]) {
      ++i;
    } else if (right[j] < left[i]) {
      ++j;
    } else {
      const std::uint64_t k = left[i];
      std::uint64_t a = 0, b = 0;
      while (i < left.size() && left[i] == k) ++i, ++a;
      while (j < right.size() && right[j] == k) ++j, ++b;
      n += a * b;
    }
  }
  return n;
}

std::uint64_t key_merge_oracle(const KeyMergeSpec& spec, std::uint32_t partition_count) {
  std::vector<std::uint64_t> left, right;
  for (std::uint32_t p = 0; p < partition_count; ++p) {
    auto l = generate_partition(spec, p, partition_count, Side::left);
    auto r = generate_partition(spec, p, partition_count, Side::right);
    left.insert(left.end(), l.keys.begin(), l.keys.end());
    right.insert(right.end(), r.keys.begin(), r.keys.end());
  }
  return sort_merge_join_count(std::move(left), std::move(right));
}

Nanos default_heartbeat_interval(const Clock& clock) {
  return clock.is_virtual() ? Nanos{100'000} : Nanos{std::chrono::milliseconds(100)};
}

// ---- control messages ---------------------------------------------------------

namespace {

// Frame 0 of every control message is UTF-8 JSON; bulk data follows as
// further frames.
Message control(const json& body, std::vector<Frame> data = {}) {
  Message m;
  m.frames.push_back(SerializerRegistry::defaults().encode(serializer::utf8, body.dump()));
  for (auto& f : data) m.frames.push_back(std::move(f));
  return m;
}

json body_of(const Message& m) {
  if (m.frames.empty()) fail(ErrorCode::protocol, "control message without a header frame");
  const Value v = SerializerRegistry::defaults().decode(m.frames[0]);
  const auto* text = std::get_if<std::string>(&v);
  if (!text) fail(ErrorCode::protocol, "control header frame is not UTF-8");
  try {
    return json::parse(*text);
  } catch (const json::exception& e) {
    fail(ErrorCode::protocol, std::string("control header is not JSON: ") + e.what());
  }
}

Task<std::pair<json, Message>> read_control(EndpointPtr ep) {
  auto m = co_await ep->read();
  if (!m) fail(ErrorCode::connection, "peer rank " + std::to_string(ep->peer().value) + " closed the connection");
  json body = body_of(*m);
  co_return std::pair<json, Message>{std::move(body), std::move(*m)};
}

ErrorCode code_from_string(const std::string& s) {
  for (int i = 0; i <= static_cast<int>(ErrorCode::stalled); ++i) {
    if (to_string(static_cast<ErrorCode>(i)) == s) return static_cast<ErrorCode>(i);
  }
  return ErrorCode::io;
}

json error_body(const std::exception& e) {
  const auto* err = dynamic_cast<const Error*>(&e);
  return {{"op", "error"},
          {"code", std::string(to_string(err ? err->code() : ErrorCode::io))},
          {"message", e.what()}};
}

double worker_throughput(const json& body) {
  const auto comm = body.at("comm_ns").get<std::int64_t>();
  if (comm <= 0) return 0.0;
  return static_cast<double>(body.at("bytes_sent").get<std::uint64_t>()) * 1e9 / static_cast<double>(comm);
}

[[noreturn]] void raise_remote(const json& body) {
  fail(code_from_string(body.value("code", "io")), body.value("message", "remote failure"));
}

Frame bytes_frame(std::span<const std::byte> bytes, MemoryDomain domain = MemoryDomain::host,
                  std::uint8_t tag = serializer::raw) {
  Frame f = Frame::raw(bytes, domain);
  f.serializer_tag = tag;
  return f;
}

Frame u64_frame(const std::vector<std::uint64_t>& xs) {
  std::vector<std::byte> out(xs.size() * 8);
  std::byte* p = out.data();
  for (auto x : xs) wire::put_le<std::uint64_t>(p, x);
  return bytes_frame(out);
}

Frame f64_frame(const std::vector<double>& xs) {
  return SerializerRegistry::defaults().encode(serializer::f64_array, xs);
}

std::vector<std::uint64_t> u64_of(const Frame& f) {
  const auto host = f.data.to_host();
  if (host.size() % 8 != 0) fail(ErrorCode::protocol, "key frame length is not a multiple of 8");
  std::vector<std::uint64_t> out(host.size() / 8);
  const std::byte* p = host.data();
  for (auto& x : out) x = wire::get_le<std::uint64_t>(p);
  return out;
}

std::vector<double> f64_of(const Frame& f) {
  return std::get<std::vector<double>>(SerializerRegistry::defaults().decode(f));
}

// Doubles of a host or device buffer, staged out when needed.
std::vector<double> doubles_of(const Buffer& b) {
  std::vector<double> out(b.size() / 8);
  if (b.domain() == MemoryDomain::host) {
    std::memcpy(out.data(), b.data(), out.size() * 8);
  } else {
    const auto host = b.to_host();
    std::memcpy(out.data(), host.data(), out.size() * 8);
  }
  return out;
}

}  // namespace

// ---- scheduler ----------------------------------------------------------------

class Scheduler {
 public:
  Scheduler(Node& node, Nanos interval, std::uint32_t suspect_after, std::uint32_t expected_workers)
      : node_(node),
        ex_(node.executor()),
        interval_(interval),
        suspect_after_(suspect_after),
        expected_(expected_workers),
        registered_(ex_),
        stopped_(ex_) {}

  Task<> run() {
    listener_ = node_.listen(node_.address(), [this](EndpointPtr ep) { return on_connect(std::move(ep)); });
    ex_.spawn(monitor());
    co_await stopped_.wait();
  }

  HeartbeatStats stats() const {
    HeartbeatStats s;
    for (const auto& [rank, w] : workers_) {
      if (!w.control) continue;
      s.beats[rank] = w.beats;
      s.max_gap[rank] = w.max_gap;
    }
    s.suspects = suspects_;
    return s;
  }

  bool finished() const { return stopped_.is_set(); }

 private:
  struct WorkerSlot {
    EndpointPtr tasks;
    EndpointPtr control;
    std::uint64_t beats = 0;
    Nanos last_beat{0};
    Nanos max_gap{0};
    bool suspect = false;
    bool silent = false;  // control stream ended
  };

  std::vector<std::uint32_t> worker_ranks() const {
    std::vector<std::uint32_t> out;
    for (const auto& [r, w] : workers_) {
      if (w.tasks && w.control) out.push_back(r);
    }
    return out;
  }

  Task<> on_connect(EndpointPtr ep) {
    json hello;
    try {
      auto [body, msg] = co_await read_control(ep);
      hello = std::move(body);
    } catch (const Error&) {
      co_return;
    }
    const std::string role = hello.value("role", "");
    if (role == "client") {
      co_await serve_client(ep);
      co_return;
    }
    if (role != "worker") co_return;
    WorkerSlot& slot = workers_[ep->peer().value];
    if (hello.value("stream", "") == "tasks") {
      slot.tasks = ep;
    } else {
      slot.control = ep;
      slot.last_beat = ex_.now();
    }
    if (worker_ranks().size() == expected_) registered_.set();
    if (slot.control == ep) co_await control_reader(ep->peer().value, ep);
  }

  Task<> control_reader(std::uint32_t rank, EndpointPtr ep) {
    for (;;) {
      std::optional<Message> m;
      try {
        m = co_await ep->read();
      } catch (const Error&) {
        break;
      }
      if (!m) break;
      const json beat = body_of(*m);
      if (beat.value("op", "") != "beat") continue;
      WorkerSlot& w = workers_[rank];
      const Nanos now = ex_.now();
      w.max_gap = std::max(w.max_gap, now - w.last_beat);
      w.last_beat = now;
      w.suspect = false;
      ++w.beats;
    }
    workers_[rank].silent = true;
    co_await ep->close();
  }

  // Flags workers whose control stream has been quiet for suspect_after
  // intervals. Report only: nothing is evicted.
  Task<> monitor() {
    while (!stopping_) {
      co_await ex_.sleep_for(interval_);
      if (stopping_) break;
      const Nanos now = ex_.now();
      for (auto& [rank, w] : workers_) {
        if (!w.control || w.silent || w.suspect) continue;
        const Nanos silence = now - w.last_beat;
        if (silence > interval_ * suspect_after_) {
          w.suspect = true;
          suspects_.push_back({RankId{rank}, now, silence});
        }
      }
    }
  }

  Task<> serve_client(EndpointPtr client) {
    co_await registered_.wait();
    json ready = {{"op", "ready"}, {"workers", worker_ranks()}};
    co_await client->write(control(ready));
    for (;;) {
      auto m = co_await client->read();
      if (!m) break;
      const json req = body_of(*m);
      const std::string op = req.value("op", "");
      if (op == "shutdown") {
        co_await shutdown_workers();
        const Message bye = control({{"op", "bye"}});
        co_await client->write(bye);
        break;
      }
      Message reply;
      try {
        if (op == "job") {
          reply = co_await run_job(req);
        } else if (op == "heartbeats") {
          reply = control(stats_body());
        } else {
          fail(ErrorCode::usage, "unknown request '" + op + "'");
        }
      } catch (const std::exception& e) {
        reply = control(error_body(e));
      }
      co_await client->write(reply);
    }
    co_await client->close();
    listener_->stop();
    stopping_ = true;
    stopped_.set();
  }

  json stats_body() const {
    const HeartbeatStats s = stats();
    json beats = json::object(), gaps = json::object(), sus = json::array();
    for (auto& [r, n] : s.beats) beats[std::to_string(r)] = n;
    for (auto& [r, g] : s.max_gap) gaps[std::to_string(r)] = g.count();
    for (auto& rep : s.suspects) sus.push_back({rep.worker.value, rep.at.count(), rep.silence.count()});
    return {{"op", "heartbeats"}, {"beats", beats}, {"max_gap", gaps}, {"suspects", sus}};
  }

  Task<> shutdown_workers() {
    std::vector<Task<>> ts;
    for (auto r : worker_ranks()) ts.push_back(stop_worker(workers_[r].tasks));
    co_await when_all(ex_, std::move(ts));
  }

  Task<> stop_worker(EndpointPtr tasks) {
    try {
      const Message stop = control({{"op", "shutdown"}});
      co_await tasks->write(stop);
      while (co_await tasks->read()) {
      }
    } catch (const Error&) {
    }
    co_await tasks->close();
  }

  Task<Message> run_job(json req) {
    const std::uint64_t job = ++next_job_;
    const auto ranks = worker_ranks();
    req["op"] = "task";
    req["job"] = job;
    req["workers"] = ranks;
    std::vector<std::pair<json, Message>> results(ranks.size());
    auto one = [&](std::size_t i) -> Task<> {
      EndpointPtr ep = workers_[ranks[i]].tasks;
      co_await ep->write(control(req));
      results[i] = co_await read_control(ep);
    };
    std::vector<Task<>> ts;
    for (std::size_t i = 0; i < ranks.size(); ++i) ts.push_back(one(i));
    co_await when_all(ex_, std::move(ts));
    for (auto& [body, msg] : results) {
      if (body.value("op", "") == "error") raise_remote(body);
    }
    const std::string kind = req.value("kind", "");
    if (kind == "transpose_sum") co_return combine_transpose(req, results);
    co_return combine_key_merge(req, results);
  }

  static Message combine_transpose(const json& req, std::vector<std::pair<json, Message>>& results) {
    json out = {{"op", "result"}, {"workers", results.size()}};
    std::uint64_t checksum = 0, total = 0, bytes = 0;
    std::int64_t compute = 0, comm = 0;
    double throughput = 0.0;
    const bool collect = req.value("collect", false);
    const std::uint64_t n = req.at("dims").get<std::uint64_t>();
    const std::uint64_t b = req.at("block").get<std::uint64_t>();
    std::vector<double> y;
    if (collect) y.assign(n * n, 0.0);
    for (auto& [body, msg] : results) {
      checksum += body.at("checksum").get<std::uint64_t>();
      total += body.at("total").get<std::uint64_t>();
      bytes += body.at("bytes_sent").get<std::uint64_t>();
      throughput += worker_throughput(body);
      compute = std::max(compute, body.at("compute_ns").get<std::int64_t>());
      comm = std::max(comm, body.at("comm_ns").get<std::int64_t>());
      if (!collect) continue;
      const auto& blocks = body.at("blocks");
      for (std::size_t k = 0; k < blocks.size(); ++k) {
        const auto bi = blocks[k][0].get<std::uint64_t>();
        const auto bj = blocks[k][1].get<std::uint64_t>();
        const auto vals = f64_of(msg.frames.at(k + 1));
        for (std::uint64_t r = 0; r < b; ++r) {
          std::copy_n(vals.begin() + static_cast<std::ptrdiff_t>(r * b), b,
                      y.begin() + static_cast<std::ptrdiff_t>((bi * b + r) * n + bj * b));
        }
      }
    }
    out["checksum"] = checksum;
    out["total"] = total;
    out["bytes"] = bytes;
    out["throughput"] = throughput;
    out["compute_ns"] = compute;
    out["comm_ns"] = comm;
    std::vector<Frame> frames;
    if (collect) frames.push_back(f64_frame(y));
    return control(out, std::move(frames));
  }

  static Message combine_key_merge(const json& req, std::vector<std::pair<json, Message>>& results) {
    std::uint64_t joined = 0, generated = 0, sent = 0, received = 0, held = 0, bytes = 0;
    std::int64_t compute = 0, comm = 0;
    double throughput = 0.0;
    for (auto& [body, msg] : results) {
      joined += body.at("joined").get<std::uint64_t>();
      generated += body.at("generated").get<std::uint64_t>();
      sent += body.at("sent").get<std::uint64_t>();
      received += body.at("received").get<std::uint64_t>();
      held += body.at("held").get<std::uint64_t>();
      bytes += body.at("bytes_sent").get<std::uint64_t>();
      throughput += worker_throughput(body);
      compute = std::max(compute, body.at("compute_ns").get<std::int64_t>());
      comm = std::max(comm, body.at("comm_ns").get<std::int64_t>());
    }
    const std::uint64_t partitions = req.at("partitions").get<std::uint64_t>();
    const std::uint64_t expect = 2 * partitions * req.at("rows").get<std::uint64_t>();
    if (sent != received || held != generated || generated != expect) {
      fail(ErrorCode::correctness, "shuffle lost rows: generated " + std::to_string(generated) + " (expected " +
                                       std::to_string(expect) + "), sent " + std::to_string(sent) + ", received " +
                                       std::to_string(received) + ", held " + std::to_string(held));
    }
    json out = {{"op", "result"},       {"workers", results.size()}, {"partitions", partitions},
                {"joined", joined},     {"generated", generated},    {"sent", sent},
                {"received", received}, {"held", held},              {"bytes", bytes},
                {"throughput", throughput},
                {"compute_ns", compute}, {"comm_ns", comm}};
    return control(out);
  }

  Node& node_;
  Executor& ex_;
  Nanos interval_;
  std::uint32_t suspect_after_;
  std::uint32_t expected_;
  std::shared_ptr<Listener> listener_;
  std::map<std::uint32_t, WorkerSlot> workers_;
  std::vector<SuspectReport> suspects_;
  Event registered_;
  Event stopped_;
  bool stopping_ = false;
  std::uint64_t next_job_ = 0;
};

// ---- worker -------------------------------------------------------------------

class Worker {
 public:
  Worker(Node& node, Nanos interval)
      : node_(node), ex_(node.executor()), interval_(interval), heartbeat_done_(ex_) {}

  Task<> run() {
    listener_ = node_.listen(node_.address(), [this](EndpointPtr ep) -> Task<> {
      PeerSlot& s = slot(ep->peer().value);
      s.ep = std::move(ep);
      s.ready->set();
      co_return;
    });
    const Address scheduler{RankId{0}};
    tasks_ = co_await node_.connect(scheduler);
    const Message hello_tasks = control({{"op", "hello"}, {"role", "worker"}, {"stream", "tasks"}});
    co_await tasks_->write(hello_tasks);
    control_ = co_await node_.connect(scheduler);
    const Message hello_control = control({{"op", "hello"}, {"role", "worker"}, {"stream", "control"}});
    co_await control_->write(hello_control);
    ex_.spawn(heartbeat_loop());

    for (;;) {
      auto m = co_await tasks_->read();
      if (!m) break;
      const json req = body_of(*m);
      if (req.value("op", "") == "shutdown") break;
      Message reply;
      try {
        const std::string kind = req.value("kind", "");
        if (kind == "transpose_sum") {
          reply = co_await transpose_sum(req);
        } else if (kind == "key_merge") {
          reply = co_await key_merge(req);
        } else {
          fail(ErrorCode::usage, "unknown job kind '" + kind + "'");
        }
      } catch (const std::exception& e) {
        reply = control(error_body(e));
      }
      co_await tasks_->write(reply);
    }
    co_await wind_down();
  }

  void kill() { killed_ = true; }
  std::uint64_t beats_sent() const { return beats_sent_; }

 private:
  struct PeerSlot {
    EndpointPtr ep;
    std::unique_ptr<Event> ready;
    bool dialing = false;
  };

  PeerSlot& slot(std::uint32_t rank) {
    auto& s = peers_[rank];
    if (!s.ready) s.ready = std::make_unique<Event>(ex_);
    return s;
  }

  // The lower rank of a worker pair dials; the higher one waits for it.
  Task<EndpointPtr> peer(std::uint32_t rank) {
    PeerSlot& s = slot(rank);
    if (s.ep) co_return s.ep;
    if (node_.rank().value < rank && !s.dialing) {
      s.dialing = true;
      EndpointPtr ep = co_await node_.connect(Address{RankId{rank}});
      PeerSlot& again = slot(rank);
      again.ep = ep;
      again.ready->set();
      co_return ep;
    }
    Event* ready = s.ready.get();
    co_await ready->wait();
    co_return slot(rank).ep;
  }

  Task<> heartbeat_loop() {
    const Nanos start = ex_.now();
    for (std::uint64_t k = 0; !stopping_ && !killed_; ++k) {
      try {
        const Message beat = control({{"op", "beat"}, {"seq", k}});
        co_await control_->write(beat);
      } catch (const Error&) {
        break;
      }
      ++beats_sent_;
      co_await ex_.sleep_until(start + interval_ * static_cast<std::int64_t>(k + 1));
    }
    heartbeat_done_.set();
  }

  Task<> wind_down() {
    stopping_ = true;
    co_await heartbeat_done_.wait();
    std::vector<Task<>> closes;
    closes.push_back(control_->close());
    for (auto& [rank, s] : peers_) {
      if (s.ep) closes.push_back(s.ep->close());
    }
    co_await when_all(ex_, std::move(closes));
    co_await tasks_->close();
    listener_->stop();
  }

  static std::uint32_t index_in(const json& req, std::uint32_t rank) {
    const auto ranks = req.at("workers").get<std::vector<std::uint32_t>>();
    auto it = std::find(ranks.begin(), ranks.end(), rank);
    if (it == ranks.end()) fail(ErrorCode::protocol, "task does not list this worker");
    return static_cast<std::uint32_t>(it - ranks.begin());
  }

  Task<Message> transpose_sum(const json& req) {
    TransposeSpec spec;
    spec.dims = req.at("dims").get<std::uint32_t>();
    spec.block = req.at("block").get<std::uint32_t>();
    spec.pattern = req.value("pattern", "ramp") == "symmetric" ? Pattern::symmetric : Pattern::ramp;
    spec.domain = req.value("device", false) ? MemoryDomain::device_sim : MemoryDomain::host;
    spec.collect = req.value("collect", false);
    spec.validate();
    const auto ranks = req.at("workers").get<std::vector<std::uint32_t>>();
    const std::uint32_t w = static_cast<std::uint32_t>(ranks.size());
    const std::uint32_t me = index_in(req, node_.rank().value);
    const std::uint64_t job = req.at("job").get<std::uint64_t>();
    const std::uint32_t nb = spec.blocks_per_side();
    const std::uint64_t b = spec.block;
    using Coord = std::pair<std::uint32_t, std::uint32_t>;

    Nanos compute{0};
    Nanos t0 = ex_.now();
    std::map<Coord, Buffer> mine;
    std::map<std::uint32_t, std::vector<Coord>> to_send;  // peer index -> my blocks it needs
    std::map<std::uint32_t, std::size_t> to_recv;         // peer index -> block count
    std::vector<double> scratch(b * b);
    for (std::uint32_t bi = 0; bi < nb; ++bi) {
      for (std::uint32_t bj = 0; bj < nb; ++bj) {
        if (block_owner(bi, bj, nb, w) != me) continue;
        for (std::uint64_t r = 0; r < b; ++r) {
          for (std::uint64_t c = 0; c < b; ++c) scratch[r * b + c] = x_value(spec, bi * b + r, bj * b + c);
        }
        mine.emplace(Coord{bi, bj}, Buffer::copy_of(std::as_bytes(std::span(scratch)), spec.domain));
        const std::uint32_t partner = block_owner(bj, bi, nb, w);
        if (partner != me) {
          to_send[partner].push_back({bi, bj});
          ++to_recv[partner];
        }
        co_await ex_.yield();
      }
    }
    compute += ex_.now() - t0;

    // Exchange: every peer gets its blocks while we take in theirs.
    const Nanos c0 = ex_.now();
    std::map<Coord, Buffer> remote;
    std::uint64_t bytes_sent = 0;
    auto send_to = [&](std::uint32_t partner) -> Task<> {
      EndpointPtr ep = co_await peer(ranks[partner]);
      for (const Coord& at : to_send[partner]) {
        Buffer& block = mine.at(at);
        std::vector<Frame> data(1);
        data[0].data = std::move(block);
        data[0].serializer_tag = serializer::f64_array;
        Message m = control({{"op", "block"}, {"job", job}, {"bi", at.first}, {"bj", at.second}}, std::move(data));
        std::exception_ptr err;
        try {
          co_await ep->write(m);
        } catch (...) {
          err = std::current_exception();
        }
        block = std::move(m.frames[1].data);
        if (err) std::rethrow_exception(err);
        bytes_sent += block.size();
      }
    };
    auto recv_from = [&](std::uint32_t partner) -> Task<> {
      EndpointPtr ep = co_await peer(ranks[partner]);
      for (std::size_t k = 0; k < to_recv[partner]; ++k) {
        auto [body, m] = co_await read_control(ep);
        if (body.value("op", "") != "block" || body.value("job", std::uint64_t{0}) != job || m.frames.size() != 2) {
          fail(ErrorCode::protocol, "unexpected message from worker " + std::to_string(ranks[partner]));
        }
        remote.emplace(Coord{body.at("bi").get<std::uint32_t>(), body.at("bj").get<std::uint32_t>()},
                       std::move(m.frames[1].data));
      }
    };
    std::vector<Task<>> ts;
    for (auto& [partner, list] : to_send) {
      ts.push_back(send_to(partner));
      ts.push_back(recv_from(partner));
    }
    co_await when_all(ex_, std::move(ts));
    const Nanos comm = ex_.now() - c0;

    t0 = ex_.now();
    std::uint64_t checksum = 0, total = 0;
    json blocks = json::array();
    std::vector<Frame> frames;
    for (auto& [at, buf] : mine) {
      const auto [bi, bj] = at;
      const Coord mirror{bj, bi};
      const Buffer& other = mine.count(mirror) ? mine.at(mirror) : remote.at(mirror);
      const auto xs = doubles_of(buf);
      const auto xt = doubles_of(other);
      std::vector<double> y(b * b);
      for (std::uint64_t r = 0; r < b; ++r) {
        for (std::uint64_t c = 0; c < b; ++c) {
          const double v = xs[r * b + c] + xt[c * b + r];
          y[r * b + c] = v;
          const auto vi = static_cast<std::uint64_t>(v);
          total += vi;
          checksum += vi * checksum_weight(spec.dims, bi * b + r, bj * b + c);
        }
      }
      if (spec.collect) {
        blocks.push_back({bi, bj});
        frames.push_back(f64_frame(y));
      }
      co_await ex_.yield();
    }
    compute += ex_.now() - t0;
    json out = {{"op", "result"},    {"checksum", checksum},         {"total", total},
                {"bytes_sent", bytes_sent}, {"compute_ns", compute.count()}, {"comm_ns", comm.count()},
                {"blocks", blocks}};
    co_return control(out, std::move(frames));
  }

  Task<Message> key_merge(const json& req) {
    KeyMergeSpec spec;
    spec.rows = req.at("rows").get<std::uint64_t>();
    spec.fraction = req.at("fraction").get<double>();
    spec.seed = req.at("seed").get<std::uint64_t>();
    spec.validate();
    const std::uint32_t partitions = req.at("partitions").get<std::uint32_t>();
    const auto ranks = req.at("workers").get<std::vector<std::uint32_t>>();
    const std::uint32_t w = static_cast<std::uint32_t>(ranks.size());
    const std::uint32_t me = index_in(req, node_.rank().value);
    const std::uint64_t job = req.at("job").get<std::uint64_t>();

    Nanos t0 = ex_.now();
    std::vector<KeyTable> left_out(w), right_out(w);
    std::uint64_t generated = 0;
    for (std::uint32_t p = me; p < partitions; p += w) {
      for (Side side : {Side::left, Side::right}) {
        const KeyTable t = generate_partition(spec, p, partitions, side);
        generated += t.size();
        auto& bins = side == Side::left ? left_out : right_out;
        for (std::size_t i = 0; i < t.size(); ++i) {
          KeyTable& dst = bins[key_owner(t.keys[i], w)];
          dst.keys.push_back(t.keys[i]);
          dst.values.push_back(t.values[i]);
        }
        co_await ex_.yield();
      }
    }
    Nanos compute = ex_.now() - t0;

    const Nanos c0 = ex_.now();
    KeyTable left = std::move(left_out[me]);
    KeyTable right = std::move(right_out[me]);
    std::uint64_t sent = 0, received = 0, bytes_sent = 0;
    auto send_to = [&](std::uint32_t partner) -> Task<> {
      EndpointPtr ep = co_await peer(ranks[partner]);
      std::vector<Frame> data;
      data.push_back(u64_frame(left_out[partner].keys));
      data.push_back(f64_frame(left_out[partner].values));
      data.push_back(u64_frame(right_out[partner].keys));
      data.push_back(f64_frame(right_out[partner].values));
      for (auto& f : data) bytes_sent += f.length();
      sent += left_out[partner].size() + right_out[partner].size();
      const json header = {
          {"op", "rows"}, {"job", job}, {"left", left_out[partner].size()}, {"right", right_out[partner].size()}};
      const Message batch = control(header, std::move(data));
      co_await ep->write(batch);
    };
    auto recv_from = [&](std::uint32_t partner) -> Task<> {
      EndpointPtr ep = co_await peer(ranks[partner]);
      auto [body, m] = co_await read_control(ep);
      if (body.value("op", "") != "rows" || body.value("job", std::uint64_t{0}) != job || m.frames.size() != 5) {
        fail(ErrorCode::protocol, "unexpected message from worker " + std::to_string(ranks[partner]));
      }
      const auto lk = u64_of(m.frames[1]);
      const auto lv = f64_of(m.frames[2]);
      const auto rk = u64_of(m.frames[3]);
      const auto rv = f64_of(m.frames[4]);
      if (lk.size() != lv.size() || rk.size() != rv.size() || lk.size() != body.at("left").get<std::size_t>() ||
          rk.size() != body.at("right").get<std::size_t>()) {
        fail(ErrorCode::protocol, "row batch from worker " + std::to_string(ranks[partner]) + " is inconsistent");
      }
      for (auto* keys : {&lk, &rk}) {
        for (auto k : *keys) {
          if (key_owner(k, w) != me) {
            fail(ErrorCode::correctness, "row with key " + std::to_string(k) + " shuffled to the wrong worker");
          }
        }
      }
      left.keys.insert(left.keys.end(), lk.begin(), lk.end());
      left.values.insert(left.values.end(), lv.begin(), lv.end());
      right.keys.insert(right.keys.end(), rk.begin(), rk.end());
      right.values.insert(right.values.end(), rv.begin(), rv.end());
      received += lk.size() + rk.size();
    };
    std::vector<Task<>> ts;
    for (std::uint32_t partner = 0; partner < w; ++partner) {
      if (partner == me) continue;
      ts.push_back(send_to(partner));
      ts.push_back(recv_from(partner));
    }
    co_await when_all(ex_, std::move(ts));
    const Nanos comm = ex_.now() - c0;

    t0 = ex_.now();
    std::unordered_map<std::uint64_t, std::uint64_t> index;
    index.reserve(left.size());
    for (auto k : left.keys) ++index[k];
    std::uint64_t joined = 0;
    for (auto k : right.keys) {
      if (auto it = index.find(k); it != index.end()) joined += it->second;
    }
    compute += ex_.now() - t0;
    json out = {{"op", "result"},
                {"joined", joined},
                {"generated", generated},
                {"sent", sent},
                {"received", received},
                {"held", left.size() + right.size()},
                {"bytes_sent", bytes_sent},
                {"compute_ns", compute.count()},
                {"comm_ns", comm.count()}};
    co_return control(out);
  }

  Node& node_;
  Executor& ex_;
  Nanos interval_;
  std::shared_ptr<Listener> listener_;
  EndpointPtr tasks_;
  EndpointPtr control_;
  std::map<std::uint32_t, PeerSlot> peers_;
  Event heartbeat_done_;
  bool stopping_ = false;
  bool killed_ = false;
  std::uint64_t beats_sent_ = 0;
};

// ---- client -------------------------------------------------------------------

class ClientAgent {
 public:
  explicit ClientAgent(Node& node) : node_(node) {}

  Task<> connect() {
    ep_ = co_await node_.connect(Address{RankId{0}});
    const Message hello = control({{"op", "hello"}, {"role", "client"}});
    co_await ep_->write(hello);
    auto [body, m] = co_await read_control(ep_);
    if (body.value("op", "") != "ready") fail(ErrorCode::protocol, "scheduler did not report ready");
    for (auto r : body.at("workers")) workers_.push_back(RankId{r.get<std::uint32_t>()});
  }

  Task<std::pair<json, Message>> request(json req) {
    co_await ep_->write(control(req));
    auto reply = co_await read_control(ep_);
    if (reply.first.value("op", "") == "error") raise_remote(reply.first);
    co_return reply;
  }

  Task<> shutdown() {
    json req = {{"op", "shutdown"}};
    co_await request(std::move(req));
    co_await ep_->close();
  }

  const std::vector<RankId>& workers() const { return workers_; }

 private:
  Node& node_;
  EndpointPtr ep_;
  std::vector<RankId> workers_;
};

// ---- cluster ------------------------------------------------------------------

Cluster::Cluster(const ClusterConfig& config) : config_(config) {
  (void)role_of(RankId{0}, config.world.world_size);
  world_ = std::make_unique<World>(config.world);
  start();
}

Cluster::Cluster(const ClusterConfig& config, const std::vector<HostEntry>& hosts, RankId rank)
    : config_(config) {
  (void)role_of(rank, static_cast<std::uint32_t>(hosts.size()));
  world_ = std::make_unique<World>(config.world, hosts, rank);
  start();
}

Cluster::~Cluster() {
  if (world_) world_->executor().shutdown();
  client_.reset();
  workers_.clear();
  scheduler_.reset();
  world_.reset();
}

void Cluster::start() {
  interval_ = config_.heartbeat_interval > Nanos{0} ? config_.heartbeat_interval
                                                   : default_heartbeat_interval(world_->clock());
  world_->run(world_->bootstrap(), RunLimits{std::numeric_limits<std::uint64_t>::max(),
                                             world_->clock().now() + Nanos{std::chrono::minutes(2)}});
  const std::uint32_t n = world_->world_size();
  for (RankId r : world_->local_ranks()) {
    Node& node = world_->node(r);
    switch (role_of(r, n)) {
      case Role::scheduler:
        scheduler_ = std::make_unique<Scheduler>(node, interval_, config_.suspect_after, n - kFirstWorkerRank);
        programs_.push_back(world_->executor().spawn(scheduler_->run()));
        break;
      case Role::worker: {
        auto w = std::make_unique<Worker>(node, interval_);
        programs_.push_back(world_->executor().spawn(w->run()));
        workers_[r.value] = std::move(w);
        break;
      }
      case Role::client:
        client_ = std::make_unique<ClientAgent>(node);
        break;
    }
  }
  if (client_) drive(client_->connect());
}

bool Cluster::hosts_client() const { return client_ != nullptr; }

template <typename T>
T Cluster::drive(Task<T> task) {
  Nanos budget = config_.request_timeout;
  if (budget <= Nanos{0}) {
    budget = world_->is_virtual() ? Nanos{1'000'000'000'000} : Nanos{std::chrono::minutes(10)};
  }
  RunLimits limits;
  limits.max_time = world_->clock().now() + budget;
  try {
    return world_->run(std::move(task), limits);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::stalled) throw;
    // A stuck request usually means a rank program died; surface that.
    for (auto& h : programs_) {
      if (h.failed()) h.get();
    }
    throw;
  }
}

std::vector<RankId> Cluster::registered_workers() {
  if (!client_) fail(ErrorCode::usage, "the client rank is not hosted in this process");
  return client_->workers();
}

TransposeResult Cluster::transpose_sum(const TransposeSpec& spec) {
  if (!client_) fail(ErrorCode::usage, "the client rank is not hosted in this process");
  spec.validate();
  json req = {{"op", "job"},
              {"kind", "transpose_sum"},
              {"dims", spec.dims},
              {"block", spec.block},
              {"pattern", spec.pattern == Pattern::symmetric ? "symmetric" : "ramp"},
              {"device", spec.domain == MemoryDomain::device_sim},
              {"collect", spec.collect}};
  const Nanos t0 = world_->clock().now();
  auto [body, msg] = drive(client_->request(req));
  TransposeResult out;
  out.elapsed = world_->clock().now() - t0;
  out.checksum = body.at("checksum").get<std::uint64_t>();
  out.total = body.at("total").get<std::uint64_t>();
  out.bytes_exchanged = body.at("bytes").get<std::uint64_t>();
  out.aggregate_throughput = body.at("throughput").get<double>();
  out.workers = body.at("workers").get<std::uint32_t>();
  out.compute = Nanos{body.at("compute_ns").get<std::int64_t>()};
  out.comm = Nanos{body.at("comm_ns").get<std::int64_t>()};
  if (spec.collect) out.y = f64_of(msg.frames.at(1));
  return out;
}

KeyMergeResult Cluster::key_merge(const KeyMergeSpec& spec) {
  if (!client_) fail(ErrorCode::usage, "the client rank is not hosted in this process");
  spec.validate();
  const std::uint32_t partitions = spec.partition_count(static_cast<std::uint32_t>(client_->workers().size()));
  json req = {{"op", "job"},       {"kind", "key_merge"}, {"rows", spec.rows}, {"fraction", spec.fraction},
              {"seed", spec.seed}, {"partitions", partitions}};
  const Nanos t0 = world_->clock().now();
  auto [body, msg] = drive(client_->request(req));
  KeyMergeResult out;
  out.elapsed = world_->clock().now() - t0;
  out.joined = body.at("joined").get<std::uint64_t>();
  out.generated = body.at("generated").get<std::uint64_t>();
  out.sent = body.at("sent").get<std::uint64_t>();
  out.received = body.at("received").get<std::uint64_t>();
  out.held = body.at("held").get<std::uint64_t>();
  out.bytes_exchanged = body.at("bytes").get<std::uint64_t>();
  out.aggregate_throughput = body.at("throughput").get<double>();
  out.workers = body.at("workers").get<std::uint32_t>();
  out.partitions = body.at("partitions").get<std::uint32_t>();
  out.compute = Nanos{body.at("compute_ns").get<std::int64_t>()};
  out.comm = Nanos{body.at("comm_ns").get<std::int64_t>()};
  return out;
}

HeartbeatStats Cluster::heartbeat_stats() {
  if (scheduler_) return scheduler_->stats();
  if (!client_) fail(ErrorCode::usage, "neither scheduler nor client is hosted in this process");
  auto [body, msg] = drive(client_->request({{"op", "heartbeats"}}));
  HeartbeatStats s;
  for (auto& [k, v] : body.at("beats").items()) s.beats[static_cast<std::uint32_t>(std::stoul(k))] = v;
  for (auto& [k, v] : body.at("max_gap").items()) {
    s.max_gap[static_cast<std::uint32_t>(std::stoul(k))] = Nanos{v.get<std::int64_t>()};
  }
  for (auto& rep : body.at("suspects")) {
    s.suspects.push_back({RankId{rep[0].get<std::uint32_t>()}, Nanos{rep[1].get<std::int64_t>()},
                          Nanos{rep[2].get<std::int64_t>()}});
  }
  return s;
}

void Cluster::shutdown() {
  if (shut_down_) return;
  shut_down_ = true;
  if (!client_) return;
  drive(client_->shutdown());
  // Let the local rank programs finish their close handshakes.
  RunLimits limits;
  limits.max_time = world_->clock().now() + (world_->is_virtual() ? Nanos{1'000'000'000} : Nanos{std::chrono::seconds(30)});
  world_->executor().run_until(
      [&] { return std::all_of(programs_.begin(), programs_.end(), [](auto& h) { return h.done(); }); }, limits);
}

void Cluster::run_for(Nanos d) { world_->executor().run_for(d); }

Scheduler* Cluster::scheduler() { return scheduler_.get(); }

Worker* Cluster::worker(RankId rank) {
  auto it = workers_.find(rank.value);
  return it == workers_.end() ? nullptr : it->second.get();
}

void Cluster::kill_worker(RankId rank) {
  Worker* w = worker(rank);
  if (!w) fail(ErrorCode::usage, "worker " + std::to_string(rank.value) + " is not hosted in this process");
  w->kill();
}

void Cluster::serve() {
  const RunStatus status = world_->executor().run_until(
      [&] { return std::all_of(programs_.begin(), programs_.end(), [](auto& h) { return h.done(); }); });
  for (auto& h : programs_) {
    if (h.failed()) h.get();
  }
  if (status != RunStatus::done) {
    fail(ErrorCode::stalled, std::string("rank programs did not finish: ") + Executor::describe(status));
  }
}

}  // namespace commshim
