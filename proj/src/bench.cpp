#include "commshim/bench.hpp"

#include "commshim/sync.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>

namespace commshim {

// ---- sweep spec ---------------------------------------------------------------

void SweepSpec::validate() const {
  if (sizes.empty()) fail(ErrorCode::usage, "the size sweep is empty");
  for (std::size_t i = 1; i < sizes.size(); ++i) {
    if (sizes[i] <= sizes[i - 1]) {
      fail(ErrorCode::usage, "sizes must be strictly increasing (" + std::to_string(sizes[i - 1]) + " then " +
                                 std::to_string(sizes[i]) + ")");
    }
  }
  if (measure_iters < 1) fail(ErrorCode::usage, "at least one measured iteration is required");
}

std::pair<std::uint32_t, std::uint32_t> SweepSpec::iterations(std::size_t size) const {
  if (byte_budget == 0 || size == 0 || static_cast<std::uint64_t>(size) * measure_iters <= byte_budget) {
    return {warmup_iters, measure_iters};
  }
  const auto fit = static_cast<std::uint32_t>(byte_budget / size);
  const std::uint32_t measure = std::min(measure_iters, std::max(min_large_iters, fit));
  const std::uint32_t warmup = std::min(warmup_iters, std::max<std::uint32_t>(1, measure / 5));
  return {warmup, measure};
}

std::vector<std::size_t> default_sizes() {
  std::vector<std::size_t> out;
  for (std::size_t s = 1; s <= (std::size_t{1} << 27); s <<= 1) out.push_back(s);
  return out;
}

namespace {

std::uint64_t parse_count(std::string_view text, const std::string& whole) {
  std::uint64_t v = 0;
  const auto* end = text.data() + text.size();
  auto [p, ec] = std::from_chars(text.data(), end, v);
  if (text.empty() || ec != std::errc{} || p != end) {
    fail(ErrorCode::usage, "bad size '" + std::string(text) + "' in '" + whole + "'");
  }
  return v;
}

}  // namespace

std::vector<std::size_t> parse_sizes(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream items(text);
  std::string item;
  while (std::getline(items, item, ',')) {
    const auto c1 = item.find(':');
    if (c1 == std::string::npos) {
      out.push_back(parse_count(item, text));
      continue;
    }
    const auto c2 = item.find(':', c1 + 1);
    if (c2 == std::string::npos || c2 + 2 > item.size()) {
      fail(ErrorCode::usage, "range '" + item + "' must look like lo:hi:xF or lo:hi:+S");
    }
    const std::uint64_t lo = parse_count(std::string_view(item).substr(0, c1), text);
    const std::uint64_t hi = parse_count(std::string_view(item).substr(c1 + 1, c2 - c1 - 1), text);
    const char op = item[c2 + 1];
    const std::uint64_t step = parse_count(std::string_view(item).substr(c2 + 2), text);
    if (lo > hi) fail(ErrorCode::usage, "range '" + item + "' runs backwards");
    if (op == 'x') {
      if (step < 2 || lo == 0) fail(ErrorCode::usage, "geometric range '" + item + "' needs lo >= 1 and factor >= 2");
      for (std::uint64_t s = lo; s <= hi; s *= step) {
        out.push_back(s);
        if (s > hi / step) break;
      }
    } else if (op == '+') {
      if (step == 0) fail(ErrorCode::usage, "arithmetic range '" + item + "' needs a positive step");
      for (std::uint64_t s = lo; s <= hi; s += step) {
        out.push_back(s);
        if (hi - s < step) break;
      }
    } else {
      fail(ErrorCode::usage, "range '" + item + "' must look like lo:hi:xF or lo:hi:+S");
    }
  }
  SweepSpec check;
  check.sizes = out;
  check.validate();
  return out;
}

bool BenchRecord::same_row(const BenchRecord& o) const {
  return benchmark == o.benchmark && transport == o.transport && mode == o.mode && size == o.size &&
         iters == o.iters && mean_s == o.mean_s && median_s == o.median_s && p99_s == o.p99_s &&
         throughput_Bps == o.throughput_Bps;
}

SampleStats summarize(std::vector<double> samples) {
  SampleStats s;
  if (samples.empty()) return s;
  std::sort(samples.begin(), samples.end());
  const std::size_t n = samples.size();
  s.mean = std::accumulate(samples.begin(), samples.end(), 0.0) / static_cast<double>(n);
  s.median = n % 2 ? samples[n / 2] : (samples[n / 2 - 1] + samples[n / 2]) / 2.0;
  const auto rank = static_cast<std::size_t>(std::ceil(0.99 * static_cast<double>(n)));
  s.p99 = samples[std::max<std::size_t>(rank, 1) - 1];
  return s;
}

namespace {

std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// One leg of a round trip. A zero-byte payload is still one (empty) post so
// size 0 measures the bare per-message cost.
Task<> send_leg(Messenger& m, const Channel& ch, RankId peer, std::span<const std::byte> data) {
  if (data.empty()) {
    co_await m.await_request(m.transport().post_send(ch.id, peer, tags::data(0), ConstRegion::of(data)));
  } else {
    co_await m.send_chunks(ch.id, peer, tags::data(0), ConstRegion::of(data));
  }
}

Task<> recv_leg(Messenger& m, const Channel& ch, RankId peer, std::span<std::byte> data) {
  if (data.empty()) {
    co_await m.await_request(m.transport().post_recv(ch.id, peer, tags::data(0), MutableRegion::of(data)));
  } else {
    co_await m.recv_chunks(ch.id, peer, tags::data(0), MutableRegion::of(data));
  }
}

Task<> ping_side(World& world, const SweepSpec& spec, std::vector<BenchRecord>& out) {
  const RankId me{0}, peer{1};
  Messenger& m = world.messenger(me);
  const Channel ch = world.table(me).lookup(peer);
  Clock& clock = world.clock();
  const std::string transport = to_string(world.config().transport);
  const std::string mode = to_string(m.progress_mode());
  for (std::size_t size : spec.sizes) {
    const auto [warmup, measure] = spec.iterations(size);
    std::vector<std::byte> payload(size), echo(size);
    for (std::size_t i = 0; i < size; ++i) payload[i] = static_cast<std::byte>((i * 131 + size) & 0xFF);
    std::vector<double> rtts;
    rtts.reserve(measure);
    for (std::uint32_t it = 0; it < warmup + measure; ++it) {
      const Nanos t0 = clock.now();
      co_await send_leg(m, ch, peer, payload);
      co_await recv_leg(m, ch, peer, echo);
      const Nanos rtt = clock.now() - t0;
      if (it >= warmup) rtts.push_back(static_cast<double>(rtt.count()));
    }
    if (echo != payload) fail(ErrorCode::correctness, "ping-pong echo of " + std::to_string(size) + " bytes differs");
    const SampleStats ns = summarize(rtts);
    BenchRecord r;
    r.benchmark = "pingpong";
    r.transport = transport;
    r.mode = mode;
    r.size = size;
    r.iters = measure;
    r.mean_s = ns.mean / 2.0 / 1e9;
    r.median_s = ns.median / 2.0 / 1e9;
    r.p99_s = ns.p99 / 2.0 / 1e9;
    r.throughput_Bps = ns.mean > 0 ? 2.0 * static_cast<double>(size) / (ns.mean / 1e9) : 0.0;
    r.timestamp = utc_timestamp();
    out.push_back(std::move(r));
  }
}

Task<> echo_side(World& world, const SweepSpec& spec) {
  const RankId me{1}, peer{0};
  Messenger& m = world.messenger(me);
  const Channel ch = world.table(me).lookup(peer);
  for (std::size_t size : spec.sizes) {
    const auto [warmup, measure] = spec.iterations(size);
    std::vector<std::byte> buf(size);
    for (std::uint32_t it = 0; it < warmup + measure; ++it) {
      co_await recv_leg(m, ch, peer, buf);
      co_await send_leg(m, ch, peer, buf);
    }
  }
}

}  // namespace

std::vector<BenchRecord> pingpong(World& world, const SweepSpec& spec) {
  if (world.world_size() != 2) {
    fail(ErrorCode::usage, "ping-pong needs exactly 2 ranks, world size is " + std::to_string(world.world_size()));
  }
  spec.validate();
  std::vector<BenchRecord> out;
  std::vector<Task<>> sides;
  if (world.is_local(RankId{0})) sides.push_back(ping_side(world, spec, out));
  if (world.is_local(RankId{1})) sides.push_back(echo_side(world, spec));
  world.run(when_all(world.executor(), std::move(sides)));
  return out;
}

// ---- application benchmarks ---------------------------------------------------

const char* to_string(AppKind kind) {
  return kind == AppKind::transpose_sum ? "transpose_sum" : "key_merge";
}

AppReport run_app(Cluster& cluster, const AppSpec& spec) {
  if (spec.repetitions < 1) fail(ErrorCode::usage, "repetitions must be at least 1");
  World& world = cluster.world();
  const std::string name = to_string(spec.kind);
  const std::string transport = to_string(world.config().transport);
  const std::string mode = to_string(world.config().messenger.mode);
  const auto workers = static_cast<std::uint32_t>(cluster.registered_workers().size());

  // Oracles are computed once, before any timed run.
  std::uint64_t want_checksum = 0, want_total = 0, want_joined = 0;
  if (spec.kind == AppKind::transpose_sum) {
    const auto o = transpose_oracle(spec.transpose);
    want_checksum = o.checksum;
    want_total = o.total;
  } else {
    want_joined = key_merge_oracle(spec.merge, spec.merge.partition_count(workers));
  }

  auto record = [&](std::string bench, std::uint64_t size, Nanos t, double throughput) {
    BenchRecord r;
    r.benchmark = std::move(bench);
    r.transport = transport;
    r.mode = mode;
    r.size = size;
    r.iters = 1;
    r.mean_s = r.median_s = r.p99_s = static_cast<double>(t.count()) / 1e9;
    r.throughput_Bps = throughput;
    r.timestamp = utc_timestamp();
    return r;
  };

  AppReport report;
  for (std::uint32_t rep = 0; rep < spec.repetitions; ++rep) {
    if (spec.kind == AppKind::transpose_sum) {
      const auto r = cluster.transpose_sum(spec.transpose);
      if (r.checksum != want_checksum || r.total != want_total) {
        fail(ErrorCode::correctness, "transpose_sum repetition " + std::to_string(rep + 1) + ": checksum " +
                                         std::to_string(r.checksum) + ", oracle " + std::to_string(want_checksum));
      }
      report.records.push_back(record(name, spec.transpose.dims, r.elapsed, r.aggregate_throughput));
      report.comm_records.push_back(record(name + ".comm", spec.transpose.dims, r.comm, r.aggregate_throughput));
    } else {
      const auto r = cluster.key_merge(spec.merge);
      if (r.joined != want_joined) {
        fail(ErrorCode::correctness, "key_merge repetition " + std::to_string(rep + 1) + ": joined " +
                                         std::to_string(r.joined) + " rows, oracle " + std::to_string(want_joined));
      }
      report.records.push_back(record(name, spec.merge.rows, r.elapsed, r.aggregate_throughput));
      report.comm_records.push_back(record(name + ".comm", spec.merge.rows, r.comm, r.aggregate_throughput));
    }
    report.verdicts.push_back(true);
  }
  return report;
}

// ---- output -------------------------------------------------------------------

namespace {

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> cells(const BenchRecord& r) {
  return {r.benchmark,      r.transport,       r.mode,         std::to_string(r.size), std::to_string(r.iters),
          g17(r.mean_s),    g17(r.median_s),   g17(r.p99_s),   g17(r.throughput_Bps)};
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, sep)) out.push_back(cell);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

double parse_double(const std::string& s, std::size_t line) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  fail(ErrorCode::usage, "CSV line " + std::to_string(line) + ": '" + s + "' is not a number");
}

std::uint64_t parse_u64(const std::string& s, std::size_t line) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc{} || p != s.data() + s.size()) {
    fail(ErrorCode::usage, "CSV line " + std::to_string(line) + ": '" + s + "' is not a count");
  }
  return v;
}

}  // namespace

void emit(const std::vector<BenchRecord>& records, OutputFormat format, std::ostream& out) {
  if (records.empty()) fail(ErrorCode::usage, "no records to emit");
  if (format == OutputFormat::csv) {
    out << kCsvHeader << '\n';
    for (const auto& r : records) {
      const auto c = cells(r);
      for (std::size_t i = 0; i < c.size(); ++i) out << (i ? "," : "") << c[i];
      out << '\n';
    }
    return;
  }
  std::vector<std::vector<std::string>> rows{split(kCsvHeader, ',')};
  for (const auto& r : records) {
    auto c = cells(r);
    // Shorter numbers read better on a terminal; the CSV keeps full precision.
    for (std::size_t i = 5; i < c.size(); ++i) {
      std::ostringstream s;
      s << std::setprecision(6) << std::stod(c[i]);
      c[i] = s.str();
    }
    rows.push_back(std::move(c));
  }
  std::vector<std::size_t> width(rows[0].size(), 0);
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  }
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      const bool numeric = i >= 3;
      if (i) out << "  ";
      out << (numeric ? std::right : std::left) << std::setw(static_cast<int>(width[i])) << row[i];
    }
    out << '\n';
  }
}

void emit(const std::vector<BenchRecord>& records, OutputFormat format, const std::string& path) {
  if (records.empty()) fail(ErrorCode::usage, "no records to emit");
  std::ofstream f(path);
  if (!f) fail(ErrorCode::io, "cannot open '" + path + "' for writing");
  emit(records, format, f);
  f.flush();
  if (!f) fail(ErrorCode::io, "writing '" + path + "' failed");
}

std::vector<BenchRecord> parse_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) {
    fail(ErrorCode::usage, "CSV header must be exactly '" + std::string(kCsvHeader) + "'");
  }
  std::vector<BenchRecord> out;
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    const auto c = split(line, ',');
    if (c.size() != 9) fail(ErrorCode::usage, "CSV line " + std::to_string(n) + " has " + std::to_string(c.size()) + " columns, expected 9");
    BenchRecord r;
    r.benchmark = c[0];
    r.transport = c[1];
    r.mode = c[2];
    r.size = parse_u64(c[3], n);
    r.iters = parse_u64(c[4], n);
    r.mean_s = parse_double(c[5], n);
    r.median_s = parse_double(c[6], n);
    r.p99_s = parse_double(c[7], n);
    r.throughput_Bps = parse_double(c[8], n);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace commshim
