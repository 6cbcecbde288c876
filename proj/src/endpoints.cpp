#include "commshim/endpoints.hpp"

#include "commshim/wire.hpp"

namespace commshim {

namespace {

constexpr std::uint32_t kPropose = 0;
constexpr std::uint32_t kReleaseNotice = 1;
constexpr std::uint32_t kAccept = 0;
constexpr std::uint32_t kRefuse = 1;

[[noreturn]] void bad_address(std::string_view text, std::size_t pos, const std::string& why) {
  fail(ErrorCode::usage, "invalid address '" + std::string(text) + "': " + why + " at position " +
                             std::to_string(pos));
}

}  // namespace

Address Address::parse(std::string_view text) {
  constexpr std::string_view scheme = "mpi://";
  for (std::size_t i = 0; i < scheme.size(); ++i) {
    if (i >= text.size()) bad_address(text, i, "truncated scheme");
    if (text[i] != scheme[i]) bad_address(text, i, std::string("unexpected character '") + text[i] + "'");
  }
  if (text.size() == scheme.size()) bad_address(text, scheme.size(), "expected a decimal rank");
  std::uint64_t v = 0;
  for (std::size_t i = scheme.size(); i < text.size(); ++i) {
    const char c = text[i];
    if (c < '0' || c > '9') bad_address(text, i, std::string("unexpected character '") + c + "'");
    if (i == scheme.size() + 1 && text[scheme.size()] == '0') bad_address(text, scheme.size(), "leading zero");
    v = v * 10 + static_cast<std::uint64_t>(c - '0');
    if (v > 0xFFFF'FFFFu) bad_address(text, i, "rank overflows 32 bits");
  }
  return Address{RankId{static_cast<std::uint32_t>(v)}};
}

Nanos default_connect_timeout(const Clock& clock) {
  return clock.is_virtual() ? Nanos{1'000'000} : Nanos{std::chrono::seconds(5)};
}

// ---- endpoint ---------------------------------------------------------------

Endpoint::Endpoint(Node& node, Channel channel, RankId peer, Origin origin, std::uint64_t connection_id)
    : node_(node),
      channel_(channel),
      peer_(peer),
      origin_(origin),
      connection_id_(connection_id),
      write_lock_(node.executor()),
      reader_changed_(node.executor()),
      closed_(node.executor()) {}

void Endpoint::poison(const std::string& why) {
  if (!poisoned_) poisoned_ = why;
}

Task<> Endpoint::write(const Message& message) {
  if (state_ != EndpointState::open) fail(ErrorCode::connection, "write on closed endpoint");
  if (poisoned_) fail(ErrorCode::connection, "endpoint failed earlier: " + *poisoned_);
  auto guard = co_await write_lock_.lock();
  if (state_ != EndpointState::open) fail(ErrorCode::connection, "write on closed endpoint");
  std::exception_ptr err;
  try {
    co_await node_.messenger().write_message(channel_.id, peer_, message);
  } catch (const std::exception& e) {
    poison(e.what());
    err = std::current_exception();
  }
  if (err) std::rethrow_exception(err);
}

Task<std::optional<Message>> Endpoint::read(const SerializerRegistry* deserializers) {
  if (reader_active_) fail(ErrorCode::usage, "concurrent read() on one endpoint");
  if (eos_received_) co_return std::nullopt;
  if (poisoned_) fail(ErrorCode::connection, "endpoint failed earlier: " + *poisoned_);
  if (state_ != EndpointState::open) fail(ErrorCode::connection, "read on closed endpoint");
  reader_active_ = true;
  std::optional<Message> message;
  std::exception_ptr err;
  try {
    message = co_await node_.messenger().read_message(channel_.id, peer_, deserializers);
  } catch (const std::exception& e) {
    poison(e.what());
    err = std::current_exception();
  }
  reader_active_ = false;
  if (!err && !message) eos_received_ = true;
  reader_changed_.notify_all();
  if (err) std::rethrow_exception(err);
  co_return message;
}

// Consumes (and drops) whatever the peer still writes until its
// end-of-stream marker. Returns false on timeout or transfer failure.
Task<bool> Endpoint::drain_until_eos(Nanos deadline) {
  Messenger& m = node_.messenger();
  Executor& ex = node_.executor();
  while (!eos_received_) {
    if (ex.now() >= deadline) co_return false;
    if (reader_active_) {
      co_await reader_changed_.wait_until(deadline);
      if (poisoned_) co_return false;
      continue;
    }
    Buffer storage;
    RequestPtr r = m.post_header_recv(channel_.id, peer_, storage);
    if (!co_await m.await_until(r, deadline)) {
      m.transport().cancel(r);
      co_return false;
    }
    if (!r->ok()) co_return false;
    bool ok = true;
    try {
      auto message = co_await m.finish_read(channel_.id, peer_, r, std::move(storage), nullptr);
      if (!message) eos_received_ = true;
    } catch (const std::exception& e) {
      poison(e.what());
      ok = false;
    }
    if (!ok) co_return false;
  }
  co_return true;
}

Task<> Endpoint::close() {
  if (state_ == EndpointState::closed) co_return;
  if (state_ == EndpointState::closing) {
    co_await closed_.wait();
    co_return;
  }
  state_ = EndpointState::closing;
  Messenger& m = node_.messenger();
  Transport& t = m.transport();
  auto guard = co_await write_lock_.lock();
  const Nanos deadline = node_.executor().now() + node_.close_timeout();

  bool clean = !poisoned_;
  if (clean) {
    MessageHeader eos;
    eos.end_of_stream = true;
    const std::vector<std::byte> marker = encode_message_header(eos);
    RequestPtr sent;
    try {
      sent = t.post_send(channel_.id, peer_, tags::header, ConstRegion::of(marker));
    } catch (const Error&) {
      clean = false;
    }
    if (clean) {
      // Drain while our marker is in flight: the peer may be mid-write and
      // only reach its own header receive after we consume that write.
      clean = co_await drain_until_eos(deadline);
      if (clean) clean = co_await m.await_until(sent, deadline) && sent->ok();
      if (!sent->done()) t.cancel(sent);
    }
  }
  guard.release();
  state_ = EndpointState::closed;
  clean_close_ = clean;
  node_.endpoint_closed(*this, clean);

  if (!node_.is_allocator_for(peer_)) {
    // Tell the allocating side our half is gone so it may recycle the id.
    const auto notice = Node::encode({kReleaseNotice, connection_id_, channel_.id.value});
    try {
      const Channel& base = node_.table().lookup(peer_);
      RequestPtr r = t.post_send(base.id, peer_, tags::handshake, ConstRegion::of(notice));
      if (!co_await m.await_until(r, node_.executor().now() + node_.close_timeout())) t.cancel(r);
    } catch (const Error&) {
    }
  }
  closed_.set();
}

// ---- listener / node --------------------------------------------------------

Listener::Listener(Node& node, Address address, ConnectionHandler handler)
    : node_(node), address_(address), handler_(std::move(handler)) {}

Node::Node(Messenger& messenger, CommTable& table, NodeConfig config)
    : messenger_(messenger), table_(table) {
  const Clock& clock = messenger.transport().clock();
  connect_timeout_ = config.connect_timeout > Nanos{0} ? config.connect_timeout : default_connect_timeout(clock);
  close_timeout_ = config.close_timeout > Nanos{0} ? config.close_timeout : connect_timeout_;
}

Node::~Node() { stop(); }

std::array<std::byte, 16> Node::encode(const Control& c) {
  std::array<std::byte, 16> out{};
  std::byte* p = out.data();
  wire::put_le<std::uint32_t>(p, c.kind);
  wire::put_le<std::uint64_t>(p, c.connection_id);
  wire::put_le<std::uint32_t>(p, c.channel);
  return out;
}

Node::Control Node::decode(const std::array<std::byte, 16>& b) {
  const std::byte* p = b.data();
  Control c;
  c.kind = wire::get_le<std::uint32_t>(p);
  c.connection_id = wire::get_le<std::uint64_t>(p);
  c.channel = wire::get_le<std::uint32_t>(p);
  return c;
}

void Node::start() {
  if (started_) return;
  started_ = true;
  stopping_ = false;
  const std::uint32_t n = table_.world_size();
  proposals_.assign(n, nullptr);
  replies_.assign(n, nullptr);
  for (std::uint32_t p = 0; p < n; ++p) {
    if (p == rank().value) continue;
    proposals_[p] = std::make_shared<Inbox>();
    replies_[p] = std::make_shared<Inbox>();
    post_inbox(*proposals_[p], RankId{p}, tags::handshake);
    post_inbox(*replies_[p], RankId{p}, tags::handshake_reply);
  }
  executor().spawn(service());
}

void Node::stop() {
  if (listener_) listener_->stop();
  if (!started_ || stopping_) return;
  stopping_ = true;
  Transport& t = messenger_.transport();
  for (auto* boxes : {&proposals_, &replies_}) {
    for (auto& box : *boxes) {
      if (box && box->request && !box->request->done()) t.cancel(box->request);
    }
  }
  for (auto& [id, slot] : waiting_) slot->arrived.notify_all();
}

void Node::post_inbox(Inbox& inbox, RankId peer, Tag tag) {
  const Channel& base = table_.lookup(peer);
  inbox.request = messenger_.transport().post_recv(base.id, peer, tag, MutableRegion::of(inbox.bytes), true);
}

Task<> Node::service() {
  const std::uint32_t n = table_.world_size();
  while (!stopping_) {
    for (std::uint32_t p = 0; p < n && !stopping_; ++p) {
      if (p == rank().value) continue;
      const RankId peer{p};
      for (bool is_reply : {false, true}) {
        auto box = is_reply ? replies_[p] : proposals_[p];
        if (!box->request || !box->request->done()) continue;
        const bool ok = box->request->ok() && box->request->bytes_moved == box->bytes.size();
        const bool dead = !box->request->ok();
        box->request = nullptr;
        if (ok) {
          const Control c = decode(box->bytes);
          if (is_reply) {
            handle_reply(peer, c);
          } else if (c.kind == kReleaseNotice) {
            handle_release(peer, c);
          } else {
            handle_proposal(peer, c);
          }
        }
        // A failed receive means the link itself is gone; stop listening on it.
        if (!dead && !stopping_) post_inbox(*box, peer, is_reply ? tags::handshake_reply : tags::handshake);
      }
    }
    if (stopping_) break;
    co_await messenger_.progress_point();
  }
}

void Node::handle_proposal(RankId peer, const Control& c) {
  if (!listener_ || !listener_->started()) {
    ++stats_.refusals_sent;
    executor().spawn(send_control(peer, tags::handshake_reply, {kRefuse, c.connection_id, 0}));
    return;
  }
  Channel channel;
  try {
    channel = is_allocator_for(peer) ? table_.duplicate(peer) : table_.adopt(peer, ChannelId{c.channel});
  } catch (const Error&) {
    ++stats_.refusals_sent;
    executor().spawn(send_control(peer, tags::handshake_reply, {kRefuse, c.connection_id, 0}));
    return;
  }
  auto ep = std::make_shared<Endpoint>(*this, channel, peer, Origin::listener, c.connection_id);
  executor().spawn(send_control(peer, tags::handshake_reply, {kAccept, c.connection_id, channel.id.value}));
  ++listener_->accepted_;
  ++stats_.accepts;
  executor().spawn(listener_->handler_(std::move(ep)));
}

void Node::handle_reply(RankId /*peer*/, const Control& c) {
  auto it = waiting_.find(c.connection_id);
  if (it == waiting_.end()) return;  // the connect already gave up
  it->second->reply = c;
  it->second->arrived.set();
}

void Node::handle_release(RankId /*peer*/, const Control& c) {
  if (!table_.is_live(ChannelId{c.channel})) return;
  PendingRelease& r = releases_[c.channel];
  r.remote = true;
  if (r.local) finalize_release(c.channel);
}

Task<> Node::send_control(RankId peer, Tag tag, Control c) {
  const auto bytes = encode(c);
  const Channel& base = table_.lookup(peer);
  RequestPtr r = messenger_.transport().post_send(base.id, peer, tag, ConstRegion::of(bytes));
  co_await messenger_.await_request(r);
}

std::shared_ptr<Listener> Node::listen(const Address& address, ConnectionHandler handler) {
  if (address.rank != rank()) {
    fail(ErrorCode::usage, "cannot listen on " + address.render() + " from rank " + std::to_string(rank().value));
  }
  if (listener_ && listener_->started()) {
    fail(ErrorCode::usage, "rank " + std::to_string(rank().value) + " already has a started listener");
  }
  if (!started_) start();
  listener_ = std::make_shared<Listener>(*this, address, std::move(handler));
  return listener_;
}

Task<EndpointPtr> Node::connect(Address address) {
  const RankId target = address.rank;
  if (target == rank()) fail(ErrorCode::usage, "cannot connect to own address " + address.render());
  if (target.value >= table_.world_size()) {
    fail(ErrorCode::usage, "no rank behind " + address.render() + " in a world of " +
                               std::to_string(table_.world_size()));
  }
  if (!started_) start();
  Transport& t = messenger_.transport();
  Executor& ex = executor();
  const std::uint64_t conn = (static_cast<std::uint64_t>(rank().value) << 20) | (++next_connection_ & 0xFFFFF);
  const bool allocator = is_allocator_for(target);
  std::optional<Channel> minted;
  if (allocator) minted = table_.duplicate(target);
  auto slot = std::make_shared<ReplySlot>(ex);
  waiting_[conn] = slot;

  const Nanos deadline = ex.now() + connect_timeout_;
  const Nanos retry = std::max(connect_timeout_ / 100, Nanos{1});
  bool accepted = false;
  bool answered = true;  // every attempt got a definite refusal
  const ChannelId base = table_.lookup(target).id;
  while (!stopping_) {
    slot->arrived.reset();
    const auto proposal = encode({kPropose, conn, minted ? minted->id.value : 0});
    RequestPtr r = t.post_send(base, target, tags::handshake, ConstRegion::of(proposal));
    if (!co_await messenger_.await_until(r, deadline)) {
      // Withdrawn proposals were never seen; anything else might have been.
      if (!t.cancel(r)) answered = false;
      break;
    }
    if (!r->ok()) break;
    if (!co_await slot->arrived.wait_until(deadline)) {
      answered = false;
      break;
    }
    if (slot->reply.kind == kAccept) {
      accepted = true;
      break;
    }
    if (ex.now() + retry >= deadline) {
      // Refused to the end: report at T, not at the last refusal.
      co_await ex.sleep_until(deadline);
      break;
    }
    ++stats_.retries;
    co_await ex.sleep_for(retry);
  }
  waiting_.erase(conn);

  if (accepted) {
    const Channel channel = allocator ? *minted : table_.adopt(target, ChannelId{slot->reply.channel});
    ++stats_.connects;
    co_return std::make_shared<Endpoint>(*this, channel, target, Origin::connector, conn);
  }
  if (minted) {
    // A proposal that may have been seen must never see its id recycled.
    if (answered) {
      table_.release(*minted);
    } else {
      table_.discard(*minted);
    }
  }
  fail(ErrorCode::connection_refused, "no listener accepted a connection at " + address.render() + " within " +
                                          std::to_string(connect_timeout_.count()) + " ns");
}

void Node::endpoint_closed(Endpoint& ep, bool clean) {
  ++stats_.closes;
  if (!clean) ++stats_.dirty_closes;
  const Channel& ch = ep.channel();
  if (is_allocator_for(ep.peer())) {
    if (!clean) {
      releases_.erase(ch.id.value);
      table_.discard(ch);
      ++stats_.channels_released;
      return;
    }
    PendingRelease& r = releases_[ch.id.value];
    r.channel = ch;
    r.local = true;
    if (r.remote) finalize_release(ch.id.value);
    return;
  }
  try {
    if (clean) {
      table_.release(ch);
    } else {
      table_.discard(ch);
    }
  } catch (const Error&) {
    table_.discard(ch);
  }
  ++stats_.channels_released;
}

void Node::finalize_release(std::uint32_t channel_id) {
  auto it = releases_.find(channel_id);
  const Channel ch = it->second.channel;
  releases_.erase(it);
  try {
    table_.release(ch);
  } catch (const Error&) {
    table_.discard(ch);
  }
  ++stats_.channels_released;
}

}  // namespace commshim
