#include "commshim/messaging.hpp"

#include "commshim/wire.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <cstring>

namespace commshim {

ChunkPlan chunk_plan(std::size_t total, std::size_t max_chunk) {
  if (max_chunk == 0) fail(ErrorCode::usage, "max_chunk must be at least 1");
  ChunkPlan plan{total, max_chunk, {}};
  plan.slices.reserve(chunk_count(total, max_chunk));
  for (std::size_t off = 0; off < total; off += max_chunk) {
    plan.slices.push_back({off, std::min(max_chunk, total - off)});
  }
  return plan;
}

std::size_t chunk_count(std::size_t total, std::size_t max_chunk) {
  if (max_chunk == 0) fail(ErrorCode::usage, "max_chunk must be at least 1");
  return total / max_chunk + (total % max_chunk != 0 ? 1 : 0);
}

std::size_t max_chunk_from_env(std::size_t fallback) {
  const char* raw = std::getenv("COMMSHIM_MAX_CHUNK");
  if (raw == nullptr || *raw == '\0') return fallback;
  std::size_t v = 0;
  const char* end = raw + std::strlen(raw);
  auto [p, ec] = std::from_chars(raw, end, v);
  if (ec != std::errc{} || p != end || v == 0) {
    fail(ErrorCode::config, std::string("COMMSHIM_MAX_CHUNK must be a positive integer, got '") + raw + "'");
  }
  return v;
}

// ---- serializers ------------------------------------------------------------

Frame Frame::raw(std::span<const std::byte> bytes, MemoryDomain domain) {
  return Frame{Buffer::copy_of(bytes, domain), serializer::raw};
}

namespace {

bool valid_utf8(std::span<const std::byte> s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t extra = 0;
    std::uint32_t cp = 0;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c & 0xE0) == 0xC0) {
      extra = 1;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      extra = 2;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      extra = 3;
      cp = c & 0x07;
    } else {
      return false;
    }
    if (i + extra >= s.size()) return false;
    for (std::size_t k = 1; k <= extra; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc & 0xC0) != 0x80) return false;
      cp = (cp << 6) | (cc & 0x3F);
    }
    static constexpr std::uint32_t kMin[] = {0, 0x80, 0x800, 0x10000};
    if (cp < kMin[extra] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return false;
    i += extra + 1;
  }
  return true;
}

template <typename T>
const T& expect(const Value& v, const char* scheme) {
  if (const T* p = std::get_if<T>(&v)) return *p;
  fail(ErrorCode::usage, std::string("value does not match serializer '") + scheme + "'");
}

SerializerRegistry make_defaults() {
  SerializerRegistry r;
  r.add(serializer::raw, {[](const Value& v) { return expect<std::vector<std::byte>>(v, "raw"); },
                          [](std::span<const std::byte> s) -> Value {
                            return std::vector<std::byte>(s.begin(), s.end());
                          }});
  r.add(serializer::utf8,
        {[](const Value& v) {
           const std::string& s = expect<std::string>(v, "utf8");
           if (s.size() > 0xFFFF'FFFFu) fail(ErrorCode::usage, "string too long for utf8 serializer");
           std::vector<std::byte> out(4 + s.size());
           std::byte* p = out.data();
           wire::put_le<std::uint32_t>(p, static_cast<std::uint32_t>(s.size()));
           if (!s.empty()) std::memcpy(p, s.data(), s.size());
           if (!valid_utf8({out.data() + 4, s.size()})) fail(ErrorCode::usage, "string is not valid UTF-8");
           return out;
         },
         [](std::span<const std::byte> s) -> Value {
           if (s.size() < 4) fail(ErrorCode::protocol, "utf8 frame shorter than its length prefix");
           const std::byte* p = s.data();
           const auto n = wire::get_le<std::uint32_t>(p);
           if (n != s.size() - 4) {
             fail(ErrorCode::protocol, "utf8 length prefix says " + std::to_string(n) + " bytes, frame carries " +
                                           std::to_string(s.size() - 4));
           }
           if (!valid_utf8(s.subspan(4))) fail(ErrorCode::protocol, "utf8 frame is not valid UTF-8");
           return std::string(reinterpret_cast<const char*>(p), n);
         }});
  r.add(serializer::f64_array,
        {[](const Value& v) {
           const auto& xs = expect<std::vector<double>>(v, "f64_array");
           std::vector<std::byte> out(xs.size() * 8);
           std::byte* p = out.data();
           for (double x : xs) wire::put_le<std::uint64_t>(p, std::bit_cast<std::uint64_t>(x));
           return out;
         },
         [](std::span<const std::byte> s) -> Value {
           if (s.size() % 8 != 0) {
             fail(ErrorCode::protocol, "f64 frame length " + std::to_string(s.size()) + " is not a multiple of 8");
           }
           std::vector<double> xs(s.size() / 8);
           const std::byte* p = s.data();
           for (double& x : xs) x = std::bit_cast<double>(wire::get_le<std::uint64_t>(p));
           return xs;
         }});
  return r;
}

}  // namespace

const SerializerRegistry& SerializerRegistry::defaults() {
  static const SerializerRegistry r = make_defaults();
  return r;
}

void SerializerRegistry::add(std::uint8_t tag, Entry entry) { entries_[tag] = std::move(entry); }

const SerializerRegistry::Entry& SerializerRegistry::at(std::uint8_t tag) const {
  auto it = entries_.find(tag);
  if (it == entries_.end()) fail(ErrorCode::protocol, "no serializer registered for tag " + std::to_string(tag));
  return it->second;
}

Frame SerializerRegistry::encode(std::uint8_t tag, const Value& value, MemoryDomain domain) const {
  const std::vector<std::byte> bytes = at(tag).encode(value);
  return Frame{Buffer::copy_of(bytes, domain), tag};
}

Value SerializerRegistry::decode(const Frame& frame) const {
  const Entry& e = at(frame.serializer_tag);
  if (frame.domain() == MemoryDomain::device_sim) {
    const std::vector<std::byte> host = frame.data.to_host();
    return e.decode(host);
  }
  return e.decode(frame.data.span());
}

// ---- header -----------------------------------------------------------------

std::vector<std::byte> encode_message_header(const MessageHeader& header) {
  if (header.end_of_stream) {
    std::vector<std::byte> out(4);
    std::byte* p = out.data();
    wire::put_le<std::uint32_t>(p, kEndOfStream);
    return out;
  }
  if (header.frames.size() > kMaxFramesPerMessage) {
    fail(ErrorCode::usage, "message has " + std::to_string(header.frames.size()) + " frames, limit is " +
                               std::to_string(kMaxFramesPerMessage));
  }
  std::vector<std::byte> out(4 + kHeaderEntrySize * header.frames.size());
  std::byte* p = out.data();
  wire::put_le<std::uint32_t>(p, static_cast<std::uint32_t>(header.frames.size()));
  for (const FrameInfo& f : header.frames) {
    wire::put_le<std::uint64_t>(p, f.length);
    wire::put_u8(p, f.serializer_tag);
    wire::put_u8(p, static_cast<std::uint8_t>(f.domain));
  }
  return out;
}

MessageHeader decode_message_header(std::span<const std::byte> bytes) {
  if (bytes.size() < 4) fail(ErrorCode::protocol, "message header shorter than 4 bytes");
  const std::byte* p = bytes.data();
  const auto count = wire::get_le<std::uint32_t>(p);
  MessageHeader h;
  if (count == kEndOfStream) {
    if (bytes.size() != 4) fail(ErrorCode::protocol, "end-of-stream header carries trailing bytes");
    h.end_of_stream = true;
    return h;
  }
  if (count > kMaxFramesPerMessage) {
    fail(ErrorCode::protocol, "message header announces " + std::to_string(count) + " frames");
  }
  const std::size_t expected = 4 + kHeaderEntrySize * count;
  if (bytes.size() != expected) {
    fail(ErrorCode::protocol, "message header for " + std::to_string(count) + " frames needs " +
                                  std::to_string(expected) + " bytes, got " + std::to_string(bytes.size()));
  }
  h.frames.resize(count);
  for (FrameInfo& f : h.frames) {
    f.length = wire::get_le<std::uint64_t>(p);
    f.serializer_tag = wire::get_le<std::uint8_t>(p);
    const auto domain = wire::get_le<std::uint8_t>(p);
    if (domain > 1) fail(ErrorCode::protocol, "bad memory domain byte " + std::to_string(domain));
    f.domain = static_cast<MemoryDomain>(domain);
  }
  return h;
}

MessageHeader header_of(const Message& message) {
  MessageHeader h;
  for (const Frame& f : message.frames) h.frames.push_back({f.length(), f.serializer_tag, f.domain()});
  return h;
}

// ---- progress modes -----------------------------------------------------------

ProgressMode parse_progress_mode(const std::string& text) {
  if (text == "cooperative") return ProgressMode::cooperative();
  const std::string prefix = "periodic:";
  if (text.rfind(prefix, 0) == 0) {
    const std::string ms = text.substr(prefix.size());
    double v = 0;
    auto [p, ec] = std::from_chars(ms.data(), ms.data() + ms.size(), v);
    if (ec == std::errc{} && p == ms.data() + ms.size() && v > 0) {
      return ProgressMode::periodic(Nanos{static_cast<std::int64_t>(std::llround(v * 1e6))});
    }
  }
  fail(ErrorCode::usage, "progress mode must be 'cooperative' or 'periodic:<ms>', got '" + text + "'");
}

std::string to_string(const ProgressMode& mode) {
  if (!mode.is_periodic()) return "cooperative";
  char buf[64];
  const double ms = static_cast<double>(mode.interval.count()) / 1e6;
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), ms);
  return "periodic:" + std::string(buf, p);
}

// ---- messenger ----------------------------------------------------------------

Messenger::Messenger(Executor& ex, Transport& transport, MessengerConfig config)
    : ex_(ex), transport_(transport), max_chunk_(config.max_chunk) {
  if (max_chunk_ == 0) fail(ErrorCode::usage, "max_chunk must be at least 1");
  set_progress_mode(config.mode);
}

Messenger::~Messenger() { stop_ticker(); }

std::size_t Messenger::effective_chunk() const {
  return std::min(max_chunk_, transport_.capabilities().max_count);
}

void Messenger::set_max_chunk(std::size_t max_chunk) {
  if (max_chunk == 0) fail(ErrorCode::usage, "max_chunk must be at least 1");
  max_chunk_ = max_chunk;
}

void Messenger::set_progress_mode(const ProgressMode& mode) {
  if (mode.is_periodic() && mode.interval <= Nanos{0}) {
    fail(ErrorCode::usage, "periodic progress needs a positive interval");
  }
  if (mode == mode_ && static_cast<bool>(ticker_) == mode.is_periodic()) return;
  if (transport_.pending_count(false) != 0) {
    fail(ErrorCode::usage, "cannot switch progress mode with " +
                               std::to_string(transport_.pending_count(false)) + " transfer(s) pending");
  }
  stop_ticker();
  mode_ = mode;
  if (mode.is_periodic()) {
    ticker_ = std::make_shared<Ticker>(ex_, transport_);
    ex_.spawn(run_ticker(ticker_, mode.interval));
  }
}

void Messenger::stop_ticker() {
  if (!ticker_) return;
  ticker_->stop = true;
  ticker_->progressed.notify_all();
  ticker_.reset();
}

Task<> Messenger::run_ticker(std::shared_ptr<Ticker> ticker, Nanos interval) {
  Executor& ex = ex_;
  while (!ticker->stop) {
    co_await ex.sleep_for(interval);
    if (ticker->stop) break;
    ticker->transport->progress();
    ticker->progressed.notify_all();
  }
}

Task<RequestPtr> Messenger::await_request(RequestPtr request) {
  for (;;) {
    if (!ticker_) {
      if (transport_.test(request)) break;
      co_await ex_.poll();
    } else {
      if (request->done()) break;
      auto ticker = ticker_;
      co_await ticker->progressed.wait();
    }
  }
  request->rethrow_if_failed();
  co_return request;
}

Task<> Messenger::progress_point() {
  if (!ticker_) {
    co_await ex_.poll();
    transport_.progress();
  } else {
    auto ticker = ticker_;
    co_await ticker->progressed.wait();
  }
}

Task<bool> Messenger::await_until(RequestPtr request, Nanos deadline) {
  ex_.add_deadline(deadline);
  for (;;) {
    if (!ticker_) {
      if (transport_.test(request)) co_return true;
      if (ex_.now() >= deadline) co_return false;
      co_await ex_.poll();
    } else {
      if (request->done()) co_return true;
      if (ex_.now() >= deadline) co_return false;
      auto ticker = ticker_;
      co_await ticker->progressed.wait_until(deadline);
    }
  }
}

namespace {

ConstRegion slice_of(ConstRegion r, const Slice& s, Addressing a) {
  if (a == Addressing::sliced) return {r.data() + s.offset, 0, s.length, r.domain};
  return {r.base, r.offset + s.offset, s.length, r.domain};
}

MutableRegion slice_of(MutableRegion r, const Slice& s, Addressing a) {
  if (a == Addressing::sliced) return {r.data() + s.offset, 0, s.length, r.domain};
  return {r.base, r.offset + s.offset, s.length, r.domain};
}

}  // namespace

Task<> Messenger::send_chunks(ChannelId channel, RankId peer, Tag tag, ConstRegion region,
                              Addressing addressing) {
  const ChunkPlan plan = chunk_plan(region.length, effective_chunk());
  std::size_t moved = 0;
  for (const Slice& s : plan.slices) {
    std::optional<Error> failure;
    try {
      RequestPtr r = transport_.post_send(channel, peer, tag, slice_of(region, s, addressing));
      co_await await_request(r);
      moved += r->bytes_moved;
    } catch (const Error& e) {
      failure = e;
    }
    if (failure) {
      throw TransferError(failure->code(),
                          std::string("send of ") + std::to_string(region.length) + " bytes failed after " +
                              std::to_string(moved) + ": " + failure->what(),
                          moved);
    }
  }
}

Task<> Messenger::recv_chunks(ChannelId channel, RankId peer, Tag tag, MutableRegion region,
                              Addressing addressing) {
  const ChunkPlan plan = chunk_plan(region.length, effective_chunk());
  std::size_t moved = 0;
  for (const Slice& s : plan.slices) {
    std::optional<Error> failure;
    RequestPtr r;
    try {
      r = transport_.post_recv(channel, peer, tag, slice_of(region, s, addressing));
      co_await await_request(r);
    } catch (const Error& e) {
      failure = e;
    }
    if (failure) {
      if (failure->code() == ErrorCode::truncation) {
        throw TransferError(ErrorCode::protocol,
                            "expected " + std::to_string(region.length) + " bytes but a chunk overran slice " +
                                std::to_string(s.offset) + "+" + std::to_string(s.length) + ": " + failure->what(),
                            moved);
      }
      throw TransferError(failure->code(),
                          std::string("receive of ") + std::to_string(region.length) + " bytes failed after " +
                              std::to_string(moved) + ": " + failure->what(),
                          moved);
    }
    moved += r->bytes_moved;
    if (r->bytes_moved != s.length) {
      throw TransferError(ErrorCode::protocol,
                          "expected " + std::to_string(region.length) + " bytes, received " +
                              std::to_string(moved) + " (chunk of " + std::to_string(r->bytes_moved) +
                              " where " + std::to_string(s.length) + " was due)",
                          moved);
    }
  }
}

Task<> Messenger::send_payload(const Channel& channel, Tag tag, ConstRegion region, Addressing addressing) {
  const RankId peer = channel.peer_of(rank());
  std::array<std::byte, 9> preamble{};
  std::byte* p = preamble.data();
  wire::put_le<std::uint64_t>(p, region.length);
  wire::put_u8(p, static_cast<std::uint8_t>(region.domain));
  co_await await_request(transport_.post_send(channel.id, peer, tag, ConstRegion::of(preamble)));
  co_await send_chunks(channel.id, peer, tag, region, addressing);
}

Task<Frame> Messenger::recv_payload(const Channel& channel, Tag tag) {
  const RankId peer = channel.peer_of(rank());
  std::array<std::byte, 9> preamble{};
  RequestPtr r = transport_.post_recv(channel.id, peer, tag, MutableRegion::of(preamble));
  co_await await_request(r);
  if (r->bytes_moved != preamble.size()) {
    fail(ErrorCode::protocol, "payload preamble of " + std::to_string(r->bytes_moved) + " bytes, expected 9");
  }
  const std::byte* q = preamble.data();
  const auto length = wire::get_le<std::uint64_t>(q);
  const auto domain = wire::get_le<std::uint8_t>(q);
  if (domain > 1) fail(ErrorCode::protocol, "bad memory domain byte " + std::to_string(domain));
  Frame frame{Buffer(length, static_cast<MemoryDomain>(domain)), serializer::raw};
  co_await recv_chunks(channel.id, peer, tag, region_of(frame.data));
  co_return frame;
}

Task<> Messenger::write_message(ChannelId channel, RankId peer, const Message& message) {
  const std::vector<std::byte> header = encode_message_header(header_of(message));
  co_await await_request(transport_.post_send(channel, peer, tags::header, ConstRegion::of(header)));
  for (std::size_t i = 0; i < message.frames.size(); ++i) {
    co_await send_chunks(channel, peer, tags::data(i), region_of(message.frames[i].data));
  }
}

Task<> Messenger::write_end_of_stream(ChannelId channel, RankId peer) {
  MessageHeader eos;
  eos.end_of_stream = true;
  const std::vector<std::byte> header = encode_message_header(eos);
  co_await await_request(transport_.post_send(channel, peer, tags::header, ConstRegion::of(header)));
}

std::size_t Messenger::header_capacity() const {
  return std::min<std::size_t>(4 + kHeaderEntrySize * kMaxFramesPerMessage, transport_.capabilities().max_count);
}

RequestPtr Messenger::post_header_recv(ChannelId channel, RankId peer, Buffer& storage) {
  storage = Buffer(header_capacity(), MemoryDomain::host);
  return transport_.post_recv(channel, peer, tags::header, region_of(storage));
}

Task<std::optional<Message>> Messenger::read_message(ChannelId channel, RankId peer,
                                                     const SerializerRegistry* deserializers) {
  Buffer storage;
  RequestPtr r = post_header_recv(channel, peer, storage);
  co_return co_await finish_read(channel, peer, std::move(r), std::move(storage), deserializers);
}

Task<std::optional<Message>> Messenger::finish_read(ChannelId channel, RankId peer, RequestPtr header_request,
                                                    Buffer header_storage,
                                                    const SerializerRegistry* deserializers) {
  co_await await_request(header_request);
  const MessageHeader header =
      decode_message_header({header_storage.data(), header_request->bytes_moved});
  if (header.end_of_stream) co_return std::nullopt;
  Message message;
  message.frames.reserve(header.frames.size());
  for (std::size_t i = 0; i < header.frames.size(); ++i) {
    const FrameInfo& info = header.frames[i];
    Frame frame{Buffer(info.length, info.domain), info.serializer_tag};
    co_await recv_chunks(channel, peer, tags::data(i), region_of(frame.data));
    message.frames.push_back(std::move(frame));
  }
  if (deserializers) {
    for (const Frame& f : message.frames) message.values.push_back(deserializers->decode(f));
  }
  co_return message;
}

}  // namespace commshim
