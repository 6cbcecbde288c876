#pragma once

#include "commshim/buffer.hpp"
#include "commshim/channels.hpp"
#include "commshim/executor.hpp"
#include "commshim/sync.hpp"
#include "commshim/task.hpp"
#include "commshim/transport.hpp"

#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace commshim {

// ---- chunking -------------------------------------------------------------

inline constexpr std::size_t kDefaultMaxChunk = std::size_t{1} << 30;
inline constexpr std::size_t kCliMaxChunk = std::size_t{64} << 10;

struct Slice {
  std::size_t offset = 0;
  std::size_t length = 0;
  bool operator==(const Slice&) const = default;
};

struct ChunkPlan {
  std::size_t total = 0;
  std::size_t max_chunk = 0;
  std::vector<Slice> slices;
};

ChunkPlan chunk_plan(std::size_t total, std::size_t max_chunk);
std::size_t chunk_count(std::size_t total, std::size_t max_chunk);

// Reads COMMSHIM_MAX_CHUNK, falling back to `fallback` when unset.
std::size_t max_chunk_from_env(std::size_t fallback);

// How a chunked transfer addresses its slices. `sliced` hands the transport
// a fresh pointer per slice; `offset` keeps the base pointer and advances an
// offset, the only option for allocators whose buffers cannot be sliced.
// Both put identical bytes on the wire.
enum class Addressing { sliced, offset };

// ---- frames, messages, serializers ----------------------------------------

using Value = std::variant<std::vector<std::byte>, std::string, std::vector<double>>;

namespace serializer {
inline constexpr std::uint8_t raw = 0;
inline constexpr std::uint8_t utf8 = 1;
inline constexpr std::uint8_t f64_array = 2;
}  // namespace serializer

struct Frame {
  Buffer data;
  std::uint8_t serializer_tag = serializer::raw;

  std::size_t length() const { return data.size(); }
  MemoryDomain domain() const { return data.domain(); }

  static Frame raw(std::span<const std::byte> bytes, MemoryDomain domain = MemoryDomain::host);
};

struct Message {
  std::vector<Frame> frames;
  // Filled by read() when a deserializer registry is supplied.
  std::vector<Value> values;
};

class SerializerRegistry {
 public:
  struct Entry {
    std::function<std::vector<std::byte>(const Value&)> encode;
    std::function<Value(std::span<const std::byte>)> decode;
  };

  // Registry holding the three built-in schemes.
  static const SerializerRegistry& defaults();

  void add(std::uint8_t tag, Entry entry);
  bool has(std::uint8_t tag) const { return entries_.count(tag) != 0; }

  Frame encode(std::uint8_t tag, const Value& value, MemoryDomain domain = MemoryDomain::host) const;
  Value decode(const Frame& frame) const;

 private:
  const Entry& at(std::uint8_t tag) const;
  std::map<std::uint8_t, Entry> entries_;
};

// ---- header wire layout ---------------------------------------------------

struct FrameInfo {
  std::uint64_t length = 0;
  std::uint8_t serializer_tag = 0;
  MemoryDomain domain = MemoryDomain::host;
  bool operator==(const FrameInfo&) const = default;
};

inline constexpr std::uint32_t kEndOfStream = 0xFFFF'FFFFu;
inline constexpr std::uint32_t kMaxFramesPerMessage = 4096;
inline constexpr std::size_t kHeaderEntrySize = 10;

struct MessageHeader {
  bool end_of_stream = false;
  std::vector<FrameInfo> frames;
  bool operator==(const MessageHeader&) const = default;
};

// u32 frame_count, then per frame u64 length, u8 serializer_tag, u8 domain.
// A frame_count of 0xFFFFFFFF marks end of stream.
std::vector<std::byte> encode_message_header(const MessageHeader& header);
MessageHeader decode_message_header(std::span<const std::byte> bytes);
MessageHeader header_of(const Message& message);

// ---- tags -------------------------------------------------------------------

namespace tags {
inline constexpr Tag agreement{0};
inline constexpr Tag header{1};
inline constexpr Tag handshake{2};
inline constexpr Tag handshake_reply{3};
inline Tag data(std::size_t frame_index) {
  return Tag{Tag::kFirstUser + static_cast<std::uint32_t>(frame_index % (std::size_t{1} << 15))};
}
}  // namespace tags

// ---- progress ---------------------------------------------------------------

struct ProgressMode {
  enum class Kind { cooperative, periodic };
  Kind kind = Kind::cooperative;
  Nanos interval{0};

  static ProgressMode cooperative() { return {}; }
  static ProgressMode periodic(Nanos interval) { return {Kind::periodic, interval}; }
  bool is_periodic() const { return kind == Kind::periodic; }
  bool operator==(const ProgressMode&) const = default;
};

// "cooperative" or "periodic:<milliseconds>" (fractional ms allowed).
ProgressMode parse_progress_mode(const std::string& text);
std::string to_string(const ProgressMode& mode);

// A failed transfer inside a chunked payload; records how far it got.
class TransferError : public Error {
 public:
  TransferError(ErrorCode code, const std::string& what, std::size_t bytes_moved)
      : Error(code, what), bytes_moved_(bytes_moved) {}
  std::size_t bytes_moved() const noexcept { return bytes_moved_; }

 private:
  std::size_t bytes_moved_;
};

struct MessengerConfig {
  std::size_t max_chunk = kDefaultMaxChunk;
  ProgressMode mode = ProgressMode::cooperative();
};

// Awaitable point-to-point operations for one rank. Every await either
// drives the transport itself (cooperative) or sleeps until a recurring
// progress task has run (periodic).
class Messenger {
 public:
  Messenger(Executor& ex, Transport& transport, MessengerConfig config = {});
  ~Messenger();
  Messenger(const Messenger&) = delete;
  Messenger& operator=(const Messenger&) = delete;

  Executor& executor() { return ex_; }
  Transport& transport() { return transport_; }
  RankId rank() const { return transport_.rank(); }

  // min(max_chunk, transport max_count).
  std::size_t effective_chunk() const;
  std::size_t max_chunk() const { return max_chunk_; }
  void set_max_chunk(std::size_t max_chunk);

  const ProgressMode& progress_mode() const { return mode_; }
  // Usage error while non-background transfers are pending.
  void set_progress_mode(const ProgressMode& mode);

  // Completes when the request leaves pending; rethrows its failure.
  Task<RequestPtr> await_request(RequestPtr request);
  // One idle step for a long-running service loop: park until the
  // transport may have moved, driving it in cooperative mode.
  Task<> progress_point();
  // Like await_request but gives up at `deadline`; returns whether the
  // request finished. Never throws for a failed request.
  Task<bool> await_until(RequestPtr request, Nanos deadline);

  // Chunked transfer of exactly `region.length` bytes, one post per slice.
  Task<> send_chunks(ChannelId channel, RankId peer, Tag tag, ConstRegion region,
                     Addressing addressing = Addressing::sliced);
  Task<> recv_chunks(ChannelId channel, RankId peer, Tag tag, MutableRegion region,
                     Addressing addressing = Addressing::sliced);

  // Self-describing single-frame transfer: a length/domain preamble, then
  // the chunks. The receiver allocates in the announced domain.
  Task<> send_payload(const Channel& channel, Tag tag, ConstRegion region,
                      Addressing addressing = Addressing::sliced);
  Task<Frame> recv_payload(const Channel& channel, Tag tag);

  // Header on the control tag, then each frame on its data tag.
  Task<> write_message(ChannelId channel, RankId peer, const Message& message);
  Task<> write_end_of_stream(ChannelId channel, RankId peer);
  // Header receive is split out so a closing endpoint can pre-post it.
  RequestPtr post_header_recv(ChannelId channel, RankId peer, Buffer& storage);
  std::size_t header_capacity() const;
  // nullopt means the peer sent end of stream.
  Task<std::optional<Message>> read_message(ChannelId channel, RankId peer,
                                            const SerializerRegistry* deserializers = nullptr);
  Task<std::optional<Message>> finish_read(ChannelId channel, RankId peer, RequestPtr header_request,
                                           Buffer header_storage, const SerializerRegistry* deserializers);

 private:
  struct Ticker {
    Transport* transport;
    Event progressed;
    bool stop = false;
    explicit Ticker(Executor& ex, Transport& t) : transport(&t), progressed(ex) {}
  };

  Task<> run_ticker(std::shared_ptr<Ticker> ticker, Nanos interval);
  void stop_ticker();

  Executor& ex_;
  Transport& transport_;
  std::size_t max_chunk_;
  ProgressMode mode_;
  std::shared_ptr<Ticker> ticker_;
};

}  // namespace commshim
