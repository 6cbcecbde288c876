#pragma once

#include "commshim/executor.hpp"
#include "commshim/transport.hpp"
#include "commshim/wire.hpp"

#include <deque>
#include <iosfwd>
#include <map>
#include <memory>
#include <string>
#include <tuple>
#include <vector>

namespace commshim {

struct HostEntry {
  RankId rank;
  std::string host;
  std::uint16_t port = 0;
  bool operator==(const HostEntry&) const = default;
};

// Hostfile: one `rank host port` triple per line; blank lines and `#`
// comments are ignored. Ranks must cover 0..n-1 exactly once.
std::vector<HostEntry> parse_hostfile(std::istream& in);
std::vector<HostEntry> load_hostfile(const std::string& path);
void write_hostfile(const std::string& path, const std::vector<HostEntry>& hosts);

struct SocketConfig {
  std::vector<HostEntry> hosts;
  RankId rank;
  bool device_aware = false;
  std::size_t max_count = kDefaultMaxCount;
  Nanos connect_timeout = std::chrono::seconds(10);
};

// TCP transport: one stream per rank pair, every post framed with the wire
// header. Sends are eager (complete once handed to the kernel); incoming
// frames land in a per-process inbox and match receives FIFO per
// (channel, peer, tag).
class SocketTransport final : public Transport, public IdleSource {
 public:
  // Blocking bootstrap for one rank per process. Lower ranks accept, higher
  // ranks connect; an unreachable peer raises Error(startup) naming it.
  static std::unique_ptr<SocketTransport> connect(const SocketConfig& config, Clock& clock);

  // Brings up `world_size` ranks in this process over loopback with
  // ephemeral ports. Useful for tests and single-process socket runs.
  static std::vector<std::unique_ptr<SocketTransport>> bootstrap_local(std::uint32_t world_size,
                                                                      Clock& clock,
                                                                      bool device_aware = false,
                                                                      std::size_t max_count = kDefaultMaxCount);

  ~SocketTransport() override;

  const char* kind() const noexcept override { return "socket"; }

  std::uint64_t activity() const override { return activity_; }
  void collect_pollfds(std::vector<pollfd>& out) const override;

  // Hard-closes the link to `peer`; pending transfers with it fail.
  void drop_peer(RankId peer);

 protected:
  void start_send(const RequestPtr& request, ConstRegion payload) override;
  void start_recv(const RequestPtr& request, MutableRegion buffer) override;
  std::size_t advance() override;
  bool withdraw(const RequestPtr& request) override;

 private:
  struct Outgoing {
    RequestPtr request;
    std::array<std::byte, wire::kFrameHeaderSize> header{};
    const std::byte* data = nullptr;
    std::size_t length = 0;
    std::vector<std::byte> bounce;
    std::size_t written = 0;  // header + payload bytes already sent
  };
  struct PostedRecv {
    RequestPtr request;
    MutableRegion buffer;
  };
  struct Incoming {
    wire::FrameHeader header;
    std::vector<std::byte> payload;
  };
  struct Peer {
    int fd = -1;
    bool alive = false;
    std::deque<Outgoing> outq;
    std::array<std::byte, wire::kFrameHeaderSize> header_buf{};
    std::size_t header_got = 0;
    bool in_payload = false;
    Incoming current;
    std::size_t payload_got = 0;
  };
  using Key = std::tuple<std::uint32_t, std::uint32_t, std::uint32_t>;  // channel, src, tag

  SocketTransport(RankId self, std::uint32_t world_size, Capabilities caps, Clock& clock,
                  std::vector<int> fds);

  std::size_t flush(std::uint32_t peer);
  std::size_t drain(std::uint32_t peer);
  std::size_t deliver(std::uint32_t src, Incoming frame);
  std::size_t complete_recv(const PostedRecv& posted, const Incoming& frame);
  std::size_t peer_failed(std::uint32_t peer, const std::string& why);

  std::vector<Peer> peers_;
  std::map<Key, std::deque<PostedRecv>> posted_;
  std::map<Key, std::deque<Incoming>> unexpected_;
  std::uint64_t activity_ = 0;
  std::size_t pending_transitions_ = 0;
};

}  // namespace commshim
