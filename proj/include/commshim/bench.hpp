#pragma once

#include "commshim/harness.hpp"
#include "commshim/world.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace commshim {

// ---- ping-pong sweep ----------------------------------------------------------

struct SweepSpec {
  std::vector<std::size_t> sizes;  // strictly increasing byte counts
  std::uint32_t warmup_iters = 10;
  std::uint32_t measure_iters = 100;
  // Past this many bytes moved per size (one way, measured loop), large
  // sizes run fewer iterations, never less than min_large_iters. Zero turns
  // the cap off.
  std::uint64_t byte_budget = std::uint64_t{1} << 30;
  std::uint32_t min_large_iters = 5;

  void validate() const;
  // Warmup and measured iterations actually used at `size`.
  std::pair<std::uint32_t, std::uint32_t> iterations(std::size_t size) const;
};

// Powers of two from 1 B to 128 MiB.
std::vector<std::size_t> default_sizes();
// Comma-separated items, each a single count or a range `lo:hi:xF`
// (geometric) or `lo:hi:+S` (arithmetic). "1:134217728:x2" is the default
// sweep.
std::vector<std::size_t> parse_sizes(const std::string& text);

struct BenchRecord {
  std::string benchmark;
  std::string transport;
  std::string mode;
  std::uint64_t size = 0;  // bytes for ping-pong, scale parameter for apps
  std::uint64_t iters = 0;
  double mean_s = 0.0;
  double median_s = 0.0;
  double p99_s = 0.0;
  double throughput_Bps = 0.0;
  std::string timestamp;  // ISO 8601 UTC; not part of the CSV

  // Equality over the CSV columns.
  bool same_row(const BenchRecord& other) const;
};

struct SampleStats {
  double mean = 0.0;
  double median = 0.0;
  double p99 = 0.0;  // nearest rank
};
SampleStats summarize(std::vector<double> samples);

// Two-rank ping-pong over the base channel. Rank 0 times each round trip;
// latency is half of it and throughput is 2 * size / mean round trip. With
// only rank 1 local (multi-process), the echo side runs and nothing is
// returned. World size other than 2 is a usage error.
std::vector<BenchRecord> pingpong(World& world, const SweepSpec& spec);

// ---- application benchmarks ---------------------------------------------------

enum class AppKind { transpose_sum, key_merge };
const char* to_string(AppKind kind);

struct AppSpec {
  AppKind kind = AppKind::transpose_sum;
  TransposeSpec transpose;
  KeyMergeSpec merge;
  std::uint32_t repetitions = 1;
};

struct AppReport {
  std::vector<BenchRecord> records;       // one per repetition, total time
  std::vector<BenchRecord> comm_records;  // "<name>.comm", communication time
  std::vector<bool> verdicts;             // oracle agreement per repetition
};

// Runs the benchmark through the cluster's client and checks every result
// against the single-process oracle first. A mismatch throws a correctness
// error; no timings are reported for it.
AppReport run_app(Cluster& cluster, const AppSpec& spec);

// ---- output -------------------------------------------------------------------

enum class OutputFormat { csv, table };

inline constexpr const char* kCsvHeader =
    "benchmark,transport,mode,size,iters,mean_s,median_s,p99_s,throughput_Bps";

void emit(const std::vector<BenchRecord>& records, OutputFormat format, std::ostream& out);
// Writes to a file; an unopenable path is an I/O error naming it.
void emit(const std::vector<BenchRecord>& records, OutputFormat format, const std::string& path);
std::vector<BenchRecord> parse_csv(std::istream& in);

}  // namespace commshim
