#include "commshim/bench.hpp"
#include "commshim/harness.hpp"
#include "commshim/wire.hpp"

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <sstream>

namespace py = pybind11;
using namespace commshim;

namespace {

WorldConfig make_world(std::uint32_t world_size, const std::string& transport, const std::string& mode,
                       double latency_s, double bandwidth, std::size_t max_chunk) {
  WorldConfig w;
  w.world_size = world_size;
  w.transport = parse_transport_kind(transport);
  w.link.latency = latency_s;
  w.link.bandwidth = bandwidth;
  w.link.validate();
  w.messenger.mode = parse_progress_mode(mode);
  w.messenger.max_chunk = max_chunk;
  return w;
}

py::bytes to_bytes(std::span<const std::byte> b) {
  return py::bytes(reinterpret_cast<const char*>(b.data()), b.size());
}

std::vector<std::byte> from_bytes(const py::bytes& b) {
  const std::string s = b;
  std::vector<std::byte> out(s.size());
  std::memcpy(out.data(), s.data(), s.size());
  return out;
}

}  // namespace

PYBIND11_MODULE(_commshim, m) {
  m.doc() = "Bindings for the commshim communication library";

  // Released so the type outlives module teardown.
  static py::handle error_type = py::exception<Error>(m, "Error").release();
  py::register_local_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::set_error(error_type, (std::string(to_string(e.code())) + ": " + e.what()).c_str());
    }
  });

  m.attr("CSV_HEADER") = kCsvHeader;
  m.attr("CLI_MAX_CHUNK") = kCliMaxChunk;

  m.def(
      "chunk_plan",
      [](std::size_t total, std::size_t max_chunk) {
        std::vector<std::pair<std::size_t, std::size_t>> out;
        for (const auto& s : chunk_plan(total, max_chunk).slices) out.emplace_back(s.offset, s.length);
        return out;
      },
      py::arg("total"), py::arg("max_chunk"), "(offset, length) slices for a chunked transfer");

  m.def("parse_sizes", &parse_sizes, py::arg("text"));
  m.def("default_sizes", &default_sizes);

  m.def(
      "encode_frame_header",
      [](std::uint32_t channel, std::uint32_t tag, bool device, std::uint64_t length) {
        wire::FrameHeader h;
        h.channel = channel;
        h.tag = tag;
        h.domain = device ? MemoryDomain::device_sim : MemoryDomain::host;
        h.length = length;
        return to_bytes(wire::encode_frame_header(h));
      },
      py::arg("channel"), py::arg("tag"), py::arg("device"), py::arg("length"));

  m.def(
      "encode_message_header",
      [](const std::vector<std::tuple<std::uint64_t, std::uint8_t, bool>>& frames, bool end_of_stream) {
        MessageHeader h;
        h.end_of_stream = end_of_stream;
        for (const auto& [len, tag, device] : frames) {
          h.frames.push_back({len, tag, device ? MemoryDomain::device_sim : MemoryDomain::host});
        }
        return to_bytes(encode_message_header(h));
      },
      py::arg("frames"), py::arg("end_of_stream") = false,
      "frames are (length, serializer_tag, device) triples");

  m.def(
      "decode_message_header",
      [](const py::bytes& data) {
        const auto bytes = from_bytes(data);
        const MessageHeader h = decode_message_header(bytes);
        std::vector<std::tuple<std::uint64_t, std::uint8_t, bool>> frames;
        for (const auto& f : h.frames) frames.emplace_back(f.length, f.serializer_tag, f.domain == MemoryDomain::device_sim);
        return py::make_tuple(frames, h.end_of_stream);
      },
      py::arg("data"));

  m.def(
      "pingpong",
      [](const std::vector<std::size_t>& sizes, std::uint32_t warmup, std::uint32_t iters, const std::string& transport,
         const std::string& mode, double latency_s, double bandwidth, std::size_t max_chunk) {
        World world(make_world(2, transport, mode, latency_s, bandwidth, max_chunk));
        world.run(world.bootstrap());
        SweepSpec spec;
        spec.sizes = sizes;
        spec.warmup_iters = warmup;
        spec.measure_iters = iters;
        py::gil_scoped_release release;
        return pingpong(world, spec);
      },
      py::arg("sizes"), py::arg("warmup") = 10, py::arg("iters") = 100, py::arg("transport") = "sim",
      py::arg("mode") = "cooperative", py::arg("latency_s") = 0.0, py::arg("bandwidth") = 10e9,
      py::arg("max_chunk") = kCliMaxChunk);

  py::class_<BenchRecord>(m, "BenchRecord")
      .def(py::init<>())
      .def_readwrite("benchmark", &BenchRecord::benchmark)
      .def_readwrite("transport", &BenchRecord::transport)
      .def_readwrite("mode", &BenchRecord::mode)
      .def_readwrite("size", &BenchRecord::size)
      .def_readwrite("iters", &BenchRecord::iters)
      .def_readwrite("mean_s", &BenchRecord::mean_s)
      .def_readwrite("median_s", &BenchRecord::median_s)
      .def_readwrite("p99_s", &BenchRecord::p99_s)
      .def_readwrite("throughput_Bps", &BenchRecord::throughput_Bps)
      .def_readwrite("timestamp", &BenchRecord::timestamp)
      .def("same_row", &BenchRecord::same_row)
      .def("__repr__", [](const BenchRecord& r) {
        return "<BenchRecord " + r.benchmark + " " + r.mode + " size=" + std::to_string(r.size) + ">";
      });

  m.def(
      "to_csv",
      [](const std::vector<BenchRecord>& records) {
        std::ostringstream out;
        emit(records, OutputFormat::csv, out);
        return out.str();
      },
      py::arg("records"));
  m.def(
      "to_table",
      [](const std::vector<BenchRecord>& records) {
        std::ostringstream out;
        emit(records, OutputFormat::table, out);
        return out.str();
      },
      py::arg("records"));
  m.def(
      "parse_csv",
      [](const std::string& text) {
        std::istringstream in(text);
        return parse_csv(in);
      },
      py::arg("text"));

  m.def(
      "transpose_sum",
      [](std::uint32_t dims, std::uint32_t block, std::uint32_t workers, const std::string& transport,
         const std::string& mode, bool symmetric, bool collect, std::size_t max_chunk) {
        ClusterConfig cc;
        cc.world = make_world(kFirstWorkerRank + workers, transport, mode, 0.0, 10e9, max_chunk);
        TransposeSpec spec;
        spec.dims = dims;
        spec.block = block;
        spec.pattern = symmetric ? Pattern::symmetric : Pattern::ramp;
        spec.collect = collect;
        TransposeResult r;
        {
          py::gil_scoped_release release;
          Cluster cluster(cc);
          r = cluster.transpose_sum(spec);
          cluster.shutdown();
        }
        py::dict out;
        out["checksum"] = r.checksum;
        out["total"] = r.total;
        out["bytes_exchanged"] = r.bytes_exchanged;
        out["workers"] = r.workers;
        out["elapsed_s"] = static_cast<double>(r.elapsed.count()) / 1e9;
        out["comm_s"] = static_cast<double>(r.comm.count()) / 1e9;
        if (collect) out["y"] = r.y;
        return out;
      },
      py::arg("dims"), py::arg("block"), py::arg("workers") = 2, py::arg("transport") = "sim",
      py::arg("mode") = "cooperative", py::arg("symmetric") = false, py::arg("collect") = false,
      py::arg("max_chunk") = kCliMaxChunk);

  m.def(
      "transpose_oracle",
      [](std::uint32_t dims, std::uint32_t block, bool symmetric) {
        TransposeSpec spec;
        spec.dims = dims;
        spec.block = block;
        spec.pattern = symmetric ? Pattern::symmetric : Pattern::ramp;
        const auto r = transpose_oracle(spec);
        return py::make_tuple(r.checksum, r.total);
      },
      py::arg("dims"), py::arg("block"), py::arg("symmetric") = false, "(checksum, total)");

  m.def(
      "key_merge",
      [](std::uint64_t rows, double fraction, std::uint32_t workers, std::uint32_t partitions, std::uint64_t seed,
         const std::string& transport, const std::string& mode, std::size_t max_chunk) {
        ClusterConfig cc;
        cc.world = make_world(kFirstWorkerRank + workers, transport, mode, 0.0, 10e9, max_chunk);
        KeyMergeSpec spec;
        spec.rows = rows;
        spec.fraction = fraction;
        spec.partitions = partitions;
        spec.seed = seed;
        KeyMergeResult r;
        {
          py::gil_scoped_release release;
          Cluster cluster(cc);
          r = cluster.key_merge(spec);
          cluster.shutdown();
        }
        py::dict out;
        out["joined"] = r.joined;
        out["generated"] = r.generated;
        out["sent"] = r.sent;
        out["received"] = r.received;
        out["held"] = r.held;
        out["partitions"] = r.partitions;
        out["workers"] = r.workers;
        out["elapsed_s"] = static_cast<double>(r.elapsed.count()) / 1e9;
        out["comm_s"] = static_cast<double>(r.comm.count()) / 1e9;
        return out;
      },
      py::arg("rows"), py::arg("fraction"), py::arg("workers") = 2, py::arg("partitions") = 0,
      py::arg("seed") = 42, py::arg("transport") = "sim", py::arg("mode") = "cooperative",
      py::arg("max_chunk") = kCliMaxChunk);

  m.def(
      "key_merge_oracle",
      [](std::uint64_t rows, double fraction, std::uint32_t partitions, std::uint64_t seed) {
        KeyMergeSpec spec;
        spec.rows = rows;
        spec.fraction = fraction;
        spec.seed = seed;
        return key_merge_oracle(spec, partitions);
      },
      py::arg("rows"), py::arg("fraction"), py::arg("partitions"), py::arg("seed") = 42);
}
