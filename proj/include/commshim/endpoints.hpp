#pragma once

#include "commshim/channels.hpp"
#include "commshim/messaging.hpp"
#include "commshim/sync.hpp"

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>

namespace commshim {

// "mpi://<decimal rank>", nothing else. Leading zeros are rejected so that
// every rank has exactly one spelling.
struct Address {
  RankId rank;

  std::string render() const { return "mpi://" + std::to_string(rank.value); }
  // Error(usage) naming the offending character position (0-based).
  static Address parse(std::string_view text);
  bool operator==(const Address&) const = default;
};

class Node;

enum class Origin { listener, connector };
enum class EndpointState { open, closing, closed };

// One live connection on a duplicated channel. Single reader and single
// writer at a time; writes are serialized internally.
class Endpoint : public std::enable_shared_from_this<Endpoint> {
 public:
  Endpoint(Node& node, Channel channel, RankId peer, Origin origin, std::uint64_t connection_id);

  const Channel& channel() const { return channel_; }
  RankId peer() const { return peer_; }
  Origin origin() const { return origin_; }
  std::uint64_t connection_id() const { return connection_id_; }
  EndpointState state() const { return state_; }
  bool is_open() const { return state_ == EndpointState::open; }
  // True when the last close exchanged end-of-stream markers both ways.
  bool closed_cleanly() const { return clean_close_; }

  Task<> write(const Message& message);
  // nullopt once the peer has closed; a second concurrent read is a usage
  // error, and after any transfer failure reads raise Error(connection).
  Task<std::optional<Message>> read(const SerializerRegistry* deserializers = nullptr);
  // Drains, exchanges end-of-stream and hands the channel back. Idempotent.
  Task<> close();

 private:
  void poison(const std::string& why);
  Task<bool> drain_until_eos(Nanos deadline);

  Node& node_;
  Channel channel_;
  RankId peer_;
  Origin origin_;
  std::uint64_t connection_id_;
  EndpointState state_ = EndpointState::open;
  bool reader_active_ = false;
  bool eos_received_ = false;
  bool clean_close_ = false;
  std::optional<std::string> poisoned_;
  AsyncMutex write_lock_;
  Event reader_changed_;
  Event closed_;
};

using EndpointPtr = std::shared_ptr<Endpoint>;
using ConnectionHandler = std::function<Task<>(EndpointPtr)>;

class Listener {
 public:
  Listener(Node& node, Address address, ConnectionHandler handler);
  const Address& address() const { return address_; }
  bool started() const { return started_; }
  std::uint64_t accepted() const { return accepted_; }
  // Idempotent; open endpoints keep working.
  void stop() { started_ = false; }

 private:
  friend class Node;
  Node& node_;
  Address address_;
  ConnectionHandler handler_;
  bool started_ = true;
  std::uint64_t accepted_ = 0;
};

struct NodeConfig {
  // Zero picks the transport default: 10^6 virtual ticks on a simulated
  // clock, 5 s of wall time otherwise.
  Nanos connect_timeout{0};
  Nanos close_timeout{0};
};

Nanos default_connect_timeout(const Clock& clock);

struct NodeStats {
  std::uint64_t connects = 0;
  std::uint64_t accepts = 0;
  std::uint64_t refusals_sent = 0;
  std::uint64_t retries = 0;
  std::uint64_t closes = 0;
  std::uint64_t dirty_closes = 0;
  std::uint64_t channels_released = 0;
};

// Per-rank connection manager. Runs one background service task that
// answers handshakes on every base channel, whether or not a listener is
// started (without one the answer is a refusal).
//
// Tear-down order: stop(), Executor::shutdown(), then destroy the Node.
class Node {
 public:
  Node(Messenger& messenger, CommTable& table, NodeConfig config = {});
  ~Node();
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;

  void start();
  void stop();

  RankId rank() const { return messenger_.rank(); }
  Address address() const { return Address{rank()}; }
  Messenger& messenger() { return messenger_; }
  CommTable& table() { return table_; }
  Executor& executor() { return messenger_.executor(); }
  Nanos connect_timeout() const { return connect_timeout_; }
  Nanos close_timeout() const { return close_timeout_; }
  const NodeStats& stats() const { return stats_; }

  std::shared_ptr<Listener> listen(const Address& address, ConnectionHandler handler);
  Task<EndpointPtr> connect(Address address);

 private:
  friend class Endpoint;

  struct Control {
    std::uint32_t kind = 0;
    std::uint64_t connection_id = 0;
    std::uint32_t channel = 0;
  };
  struct Inbox {
    RequestPtr request;
    std::array<std::byte, 16> bytes{};
  };
  struct ReplySlot {
    explicit ReplySlot(Executor& ex) : arrived(ex) {}
    Event arrived;
    Control reply;
  };
  struct PendingRelease {
    Channel channel;
    bool local = false;
    bool remote = false;
  };

  static std::array<std::byte, 16> encode(const Control& c);
  static Control decode(const std::array<std::byte, 16>& b);

  Task<> service();
  void post_inbox(Inbox& inbox, RankId peer, Tag tag);
  void handle_proposal(RankId peer, const Control& c);
  void handle_reply(RankId peer, const Control& c);
  void handle_release(RankId peer, const Control& c);
  Task<> send_control(RankId peer, Tag tag, Control c);

  bool is_allocator_for(RankId peer) const { return rank() < peer; }
  void endpoint_closed(Endpoint& ep, bool clean);
  void finalize_release(std::uint32_t channel_id);

  Messenger& messenger_;
  CommTable& table_;
  Nanos connect_timeout_;
  Nanos close_timeout_;
  bool started_ = false;
  bool stopping_ = false;
  std::shared_ptr<Listener> listener_;
  std::vector<std::shared_ptr<Inbox>> proposals_;
  std::vector<std::shared_ptr<Inbox>> replies_;
  std::map<std::uint64_t, std::shared_ptr<ReplySlot>> waiting_;
  std::map<std::uint32_t, PendingRelease> releases_;
  std::uint64_t next_connection_ = 0;
  NodeStats stats_;
};

}  // namespace commshim
