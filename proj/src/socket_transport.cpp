#include "commshim/socket_transport.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <sys/uio.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

namespace commshim {

namespace {

constexpr std::size_t kHelloSize = 12;
constexpr std::size_t kReadSlice = std::size_t{4} << 20;

std::string errno_text() { return std::strerror(errno); }

void set_nonblocking(int fd) {
  const int flags = ::fcntl(fd, F_GETFL, 0);
  ::fcntl(fd, F_SETFL, flags | O_NONBLOCK);
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

sockaddr_in resolve(const std::string& host, std::uint16_t port) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(host.c_str(), nullptr, &hints, &res) != 0 || res == nullptr) {
    fail(ErrorCode::config, "cannot resolve host '" + host + "'");
  }
  sockaddr_in addr{};
  std::memcpy(&addr, res->ai_addr, sizeof(addr));
  ::freeaddrinfo(res);
  addr.sin_port = htons(port);
  return addr;
}

int make_listener(const std::string& host, std::uint16_t port, std::uint16_t* bound_port) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) fail(ErrorCode::io, "socket: " + errno_text());
  int one = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr = resolve(host, port);
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    const int err = errno;
    ::close(fd);
    if (err == EADDRINUSE) {
      fail(ErrorCode::config, "rank collision: " + host + ":" + std::to_string(port) + " already bound");
    }
    fail(ErrorCode::io, "bind " + host + ":" + std::to_string(port) + ": " + std::strerror(err));
  }
  if (::listen(fd, 128) != 0) {
    ::close(fd);
    fail(ErrorCode::io, "listen: " + errno_text());
  }
  if (bound_port) {
    socklen_t len = sizeof(addr);
    ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
    *bound_port = ntohs(addr.sin_port);
  }
  return fd;
}

bool wait_fd(int fd, short events, std::chrono::steady_clock::time_point deadline) {
  for (;;) {
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
        deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0) return false;
    pollfd p{fd, events, 0};
    const int rc = ::poll(&p, 1, static_cast<int>(std::min<long long>(left.count(), 100)));
    if (rc > 0) return true;
    if (rc < 0 && errno != EINTR) return false;
  }
}

void write_all(int fd, const std::byte* data, std::size_t n) {
  while (n > 0) {
    const ssize_t w = ::send(fd, data, n, MSG_NOSIGNAL);
    if (w < 0) {
      if (errno == EINTR) continue;
      fail(ErrorCode::io, "bootstrap write: " + errno_text());
    }
    data += w;
    n -= static_cast<std::size_t>(w);
  }
}

bool read_all(int fd, std::byte* data, std::size_t n, std::chrono::steady_clock::time_point deadline) {
  while (n > 0) {
    if (!wait_fd(fd, POLLIN, deadline)) return false;
    const ssize_t r = ::recv(fd, data, n, 0);
    if (r <= 0) {
      if (r < 0 && (errno == EINTR || errno == EAGAIN)) continue;
      return false;
    }
    data += r;
    n -= static_cast<std::size_t>(r);
  }
  return true;
}

std::array<std::byte, kHelloSize> make_hello(std::uint32_t rank, std::uint32_t world) {
  std::array<std::byte, kHelloSize> out{};
  std::byte* p = out.data();
  wire::put_le<std::uint32_t>(p, wire::kMagic);
  wire::put_le<std::uint32_t>(p, rank);
  wire::put_le<std::uint32_t>(p, world);
  return out;
}

int connect_with_retry(const HostEntry& entry, std::chrono::steady_clock::time_point deadline) {
  const sockaddr_in addr = resolve(entry.host, entry.port);
  while (std::chrono::steady_clock::now() < deadline) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) fail(ErrorCode::io, "socket: " + errno_text());
    if (::connect(fd, reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)) == 0) return fd;
    ::close(fd);
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
  return -1;
}

// Reads one hello from a freshly accepted stream; returns the announced rank.
std::uint32_t accept_hello(int fd, std::uint32_t self, std::uint32_t world,
                           std::chrono::steady_clock::time_point deadline) {
  std::array<std::byte, kHelloSize> hello{};
  if (!read_all(fd, hello.data(), hello.size(), deadline)) {
    fail(ErrorCode::startup, "incomplete hello on rank " + std::to_string(self));
  }
  const std::byte* p = hello.data();
  const auto magic = wire::get_le<std::uint32_t>(p);
  const auto rank = wire::get_le<std::uint32_t>(p);
  const auto peer_world = wire::get_le<std::uint32_t>(p);
  if (magic != wire::kMagic) fail(ErrorCode::protocol, "bad hello magic");
  if (peer_world != world) {
    fail(ErrorCode::config, "peer announced world size " + std::to_string(peer_world) + ", expected " +
                                std::to_string(world));
  }
  return rank;
}

}  // namespace

std::vector<HostEntry> parse_hostfile(std::istream& in) {
  std::vector<HostEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    long long rank = -1;
    std::string host;
    long long port = -1;
    if (!(ls >> rank)) continue;
    std::string extra;
    if (!(ls >> host >> port) || (ls >> extra) || rank < 0 || port <= 0 || port > 65535) {
      fail(ErrorCode::config, "hostfile line " + std::to_string(lineno) + ": expected `rank host port`");
    }
    out.push_back({RankId{static_cast<std::uint32_t>(rank)}, host, static_cast<std::uint16_t>(port)});
  }
  std::sort(out.begin(), out.end(), [](const HostEntry& a, const HostEntry& b) { return a.rank < b.rank; });
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i].rank.value != i) {
      fail(ErrorCode::config, "hostfile ranks must be 0..n-1 without gaps or duplicates");
    }
  }
  if (out.empty()) fail(ErrorCode::config, "hostfile lists no ranks");
  return out;
}

std::vector<HostEntry> load_hostfile(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::io, "cannot open hostfile " + path);
  return parse_hostfile(in);
}

void write_hostfile(const std::string& path, const std::vector<HostEntry>& hosts) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::io, "cannot write hostfile " + path);
  for (const HostEntry& h : hosts) out << h.rank.value << ' ' << h.host << ' ' << h.port << '\n';
}

std::unique_ptr<SocketTransport> SocketTransport::connect(const SocketConfig& config, Clock& clock) {
  const auto world = static_cast<std::uint32_t>(config.hosts.size());
  const std::uint32_t self = config.rank.value;
  if (self >= world) fail(ErrorCode::config, "rank " + std::to_string(self) + " not in hostfile");
  const auto deadline = std::chrono::steady_clock::now() +
                        std::chrono::duration_cast<std::chrono::steady_clock::duration>(config.connect_timeout);

  const HostEntry& me = config.hosts[self];
  const int listener = make_listener(me.host, me.port, nullptr);
  std::vector<int> fds(world, -1);
  auto cleanup = [&] {
    ::close(listener);
    for (int fd : fds) {
      if (fd >= 0) ::close(fd);
    }
  };

  try {
    for (std::uint32_t j = 0; j < self; ++j) {
      const int fd = connect_with_retry(config.hosts[j], deadline);
      if (fd < 0) {
        fail(ErrorCode::startup, "peer rank " + std::to_string(j) + " unreachable at " +
                                     config.hosts[j].host + ":" + std::to_string(config.hosts[j].port));
      }
      fds[j] = fd;
      const auto hello = make_hello(self, world);
      write_all(fd, hello.data(), hello.size());
    }
    for (std::uint32_t accepted = 0; accepted < world - 1 - self; ++accepted) {
      if (!wait_fd(listener, POLLIN, deadline)) {
        std::string missing;
        for (std::uint32_t j = self + 1; j < world; ++j) {
          if (fds[j] < 0) missing += (missing.empty() ? "" : ", ") + std::to_string(j);
        }
        fail(ErrorCode::startup, "rank " + std::to_string(self) + " timed out waiting for peer rank(s) " + missing);
      }
      const int fd = ::accept(listener, nullptr, nullptr);
      if (fd < 0) fail(ErrorCode::io, "accept: " + errno_text());
      std::uint32_t rank = 0;
      try {
        rank = accept_hello(fd, self, world, deadline);
      } catch (...) {
        ::close(fd);
        throw;
      }
      if (rank <= self || rank >= world || fds[rank] >= 0) {
        ::close(fd);
        fail(ErrorCode::config, "rank collision: rank " + std::to_string(rank) + " announced twice or out of order");
      }
      fds[rank] = fd;
    }
  } catch (...) {
    cleanup();
    throw;
  }
  ::close(listener);
  return std::unique_ptr<SocketTransport>(new SocketTransport(
      RankId{self}, world, Capabilities{config.device_aware, config.max_count}, clock, std::move(fds)));
}

std::vector<std::unique_ptr<SocketTransport>> SocketTransport::bootstrap_local(std::uint32_t world_size,
                                                                                Clock& clock,
                                                                                bool device_aware,
                                                                                std::size_t max_count) {
  if (world_size == 0) fail(ErrorCode::config, "world size must be at least 1");
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(10);
  std::vector<int> listeners(world_size, -1);
  std::vector<std::uint16_t> ports(world_size, 0);
  std::vector<std::vector<int>> fds(world_size, std::vector<int>(world_size, -1));
  try {
    for (std::uint32_t r = 0; r < world_size; ++r) listeners[r] = make_listener("127.0.0.1", 0, &ports[r]);
    // Connections complete in the listen backlog, so one thread can play
    // every rank: connect upward first, then accept.
    for (std::uint32_t i = 0; i < world_size; ++i) {
      for (std::uint32_t j = 0; j < i; ++j) {
        const int fd = connect_with_retry(HostEntry{RankId{j}, "127.0.0.1", ports[j]}, deadline);
        if (fd < 0) fail(ErrorCode::startup, "loopback connect to rank " + std::to_string(j) + " failed");
        fds[i][j] = fd;
        const auto hello = make_hello(i, world_size);
        write_all(fd, hello.data(), hello.size());
      }
    }
    for (std::uint32_t j = 0; j < world_size; ++j) {
      for (std::uint32_t k = j + 1; k < world_size; ++k) {
        if (!wait_fd(listeners[j], POLLIN, deadline)) fail(ErrorCode::startup, "loopback accept timed out");
        const int fd = ::accept(listeners[j], nullptr, nullptr);
        if (fd < 0) fail(ErrorCode::io, "accept: " + errno_text());
        const std::uint32_t rank = accept_hello(fd, j, world_size, deadline);
        if (rank <= j || rank >= world_size || fds[j][rank] >= 0) {
          ::close(fd);
          fail(ErrorCode::config, "rank collision during loopback bootstrap");
        }
        fds[j][rank] = fd;
      }
    }
  } catch (...) {
    for (int fd : listeners) {
      if (fd >= 0) ::close(fd);
    }
    for (auto& row : fds) {
      for (int fd : row) {
        if (fd >= 0) ::close(fd);
      }
    }
    throw;
  }
  for (int fd : listeners) ::close(fd);
  std::vector<std::unique_ptr<SocketTransport>> out;
  for (std::uint32_t r = 0; r < world_size; ++r) {
    out.push_back(std::unique_ptr<SocketTransport>(new SocketTransport(
        RankId{r}, world_size, Capabilities{device_aware, max_count}, clock, std::move(fds[r]))));
  }
  return out;
}

SocketTransport::SocketTransport(RankId self, std::uint32_t world_size, Capabilities caps, Clock& clock,
                                 std::vector<int> fds)
    : Transport(self, world_size, caps, clock), peers_(world_size) {
  for (std::uint32_t r = 0; r < world_size; ++r) {
    if (r == self.value || fds[r] < 0) continue;
    set_nonblocking(fds[r]);
    peers_[r].fd = fds[r];
    peers_[r].alive = true;
  }
}

SocketTransport::~SocketTransport() {
  for (Peer& p : peers_) {
    if (p.fd >= 0) ::close(p.fd);
  }
}

void SocketTransport::collect_pollfds(std::vector<pollfd>& out) const {
  for (const Peer& p : peers_) {
    if (!p.alive) continue;
    out.push_back(pollfd{p.fd, static_cast<short>(POLLIN | (p.outq.empty() ? 0 : POLLOUT)), 0});
  }
}

void SocketTransport::drop_peer(RankId peer) {
  if (peer.value < peers_.size() && peers_[peer.value].alive) {
    activity_ += peer_failed(peer.value, "link dropped locally");
  }
}

void SocketTransport::start_send(const RequestPtr& request, ConstRegion payload) {
  const std::uint32_t dst = request->peer.value;
  const bool staged = payload.domain == MemoryDomain::device_sim && !capabilities().device_aware;
  if (staged) record_staging(payload.length);
  ++activity_;
  if (dst == rank().value) {
    Incoming frame;
    frame.header = {request->channel.value, request->tag.value, payload.domain, payload.length};
    frame.payload.assign(payload.data(), payload.data() + payload.length);
    finish(request, RequestState::complete, payload.length);
    deliver(dst, std::move(frame));
    return;
  }
  Peer& peer = peers_[dst];
  if (!peer.alive) {
    finish(request, RequestState::failed, 0, ErrorCode::connection,
           "link to rank " + std::to_string(dst) + " is down");
    return;
  }
  Outgoing out;
  out.request = request;
  out.header = wire::encode_frame_header({request->channel.value, request->tag.value, payload.domain,
                                          static_cast<std::uint64_t>(payload.length)});
  if (staged) {
    out.bounce.assign(payload.data(), payload.data() + payload.length);
    out.data = out.bounce.data();
  } else {
    out.data = payload.data();
  }
  out.length = payload.length;
  peer.outq.push_back(std::move(out));
  flush(dst);
}

void SocketTransport::start_recv(const RequestPtr& request, MutableRegion buffer) {
  ++activity_;
  const Key key{request->channel.value, request->peer.value, request->tag.value};
  if (auto it = unexpected_.find(key); it != unexpected_.end() && !it->second.empty()) {
    Incoming frame = std::move(it->second.front());
    it->second.pop_front();
    if (it->second.empty()) unexpected_.erase(it);
    complete_recv(PostedRecv{request, buffer}, frame);
    return;
  }
  if (request->peer.value != rank().value && !peers_[request->peer.value].alive) {
    finish(request, RequestState::failed, 0, ErrorCode::connection,
           "link to rank " + std::to_string(request->peer.value) + " is down");
    return;
  }
  posted_[key].push_back(PostedRecv{request, buffer});
}

bool SocketTransport::withdraw(const RequestPtr& request) {
  if (request->direction == Direction::recv) {
    const Key key{request->channel.value, request->peer.value, request->tag.value};
    auto it = posted_.find(key);
    if (it == posted_.end()) return false;
    auto& q = it->second;
    auto pos = std::find_if(q.begin(), q.end(), [&](const PostedRecv& p) { return p.request == request; });
    if (pos == q.end()) return false;
    q.erase(pos);
    if (q.empty()) posted_.erase(it);
    ++activity_;
    return true;
  }
  Peer& peer = peers_[request->peer.value];
  auto pos = std::find_if(peer.outq.begin(), peer.outq.end(),
                          [&](const Outgoing& o) { return o.request == request; });
  if (pos == peer.outq.end() || pos->written > 0) return false;
  peer.outq.erase(pos);
  ++activity_;
  return true;
}

std::size_t SocketTransport::advance() {
  std::size_t transitions = 0;
  for (std::uint32_t r = 0; r < peers_.size(); ++r) {
    if (!peers_[r].alive) continue;
    transitions += flush(r);
    if (peers_[r].alive) transitions += drain(r);
  }
  activity_ += transitions;
  return transitions;
}

std::size_t SocketTransport::flush(std::uint32_t peer_rank) {
  Peer& peer = peers_[peer_rank];
  std::size_t transitions = 0;
  while (peer.alive && !peer.outq.empty()) {
    Outgoing& out = peer.outq.front();
    iovec iov[2];
    int n = 0;
    if (out.written < out.header.size()) {
      iov[n++] = {out.header.data() + out.written, out.header.size() - out.written};
    }
    const std::size_t payload_done = out.written > out.header.size() ? out.written - out.header.size() : 0;
    if (payload_done < out.length) {
      iov[n++] = {const_cast<std::byte*>(out.data) + payload_done, out.length - payload_done};
    }
    if (n > 0) {
      msghdr msg{};
      msg.msg_iov = iov;
      msg.msg_iovlen = static_cast<std::size_t>(n);
      const ssize_t w = ::sendmsg(peer.fd, &msg, MSG_NOSIGNAL);
      if (w < 0) {
        if (errno == EAGAIN || errno == EWOULDBLOCK || errno == EINTR) break;
        return transitions + peer_failed(peer_rank, "send failed: " + errno_text());
      }
      out.written += static_cast<std::size_t>(w);
      ++activity_;
    }
    if (out.written == out.header.size() + out.length) {
      finish(out.request, RequestState::complete, out.length);
      peer.outq.pop_front();
      ++transitions;
    }
  }
  return transitions;
}

std::size_t SocketTransport::drain(std::uint32_t peer_rank) {
  Peer& peer = peers_[peer_rank];
  std::size_t transitions = 0;
  while (peer.alive) {
    ssize_t r = 0;
    if (!peer.in_payload) {
      r = ::recv(peer.fd, peer.header_buf.data() + peer.header_got, peer.header_buf.size() - peer.header_got, 0);
    } else {
      const std::size_t left = peer.current.payload.size() - peer.payload_got;
      r = ::recv(peer.fd, peer.current.payload.data() + peer.payload_got, std::min(left, kReadSlice), 0);
    }
    if (r == 0) return transitions + peer_failed(peer_rank, "peer closed the connection");
    if (r < 0) {
      if (errno == EAGAIN || errno == EWOULDBLOCK || errno == EINTR) break;
      return transitions + peer_failed(peer_rank, "recv failed: " + errno_text());
    }
    ++activity_;
    if (!peer.in_payload) {
      peer.header_got += static_cast<std::size_t>(r);
      if (peer.header_got < peer.header_buf.size()) continue;
      peer.header_got = 0;
      try {
        peer.current.header = wire::decode_frame_header(peer.header_buf);
      } catch (const Error& e) {
        return transitions + peer_failed(peer_rank, e.what());
      }
      if (peer.current.header.length > capabilities().max_count) {
        return transitions + peer_failed(peer_rank, "incoming frame exceeds max_count");
      }
      peer.current.payload.resize(peer.current.header.length);
      peer.payload_got = 0;
      peer.in_payload = true;
    } else {
      peer.payload_got += static_cast<std::size_t>(r);
    }
    if (peer.in_payload && peer.payload_got == peer.current.payload.size()) {
      peer.in_payload = false;
      transitions += deliver(peer_rank, std::move(peer.current));
      peer.current = Incoming{};
    }
  }
  return transitions;
}

std::size_t SocketTransport::deliver(std::uint32_t src, Incoming frame) {
  const Key key{frame.header.channel, src, frame.header.tag};
  if (auto it = posted_.find(key); it != posted_.end() && !it->second.empty()) {
    PostedRecv posted = std::move(it->second.front());
    it->second.pop_front();
    if (it->second.empty()) posted_.erase(it);
    return complete_recv(posted, frame);
  }
  unexpected_[key].push_back(std::move(frame));
  return 0;
}

std::size_t SocketTransport::complete_recv(const PostedRecv& posted, const Incoming& frame) {
  const std::size_t n = frame.payload.size();
  if (n > posted.buffer.length) {
    finish(posted.request, RequestState::failed, 0, ErrorCode::truncation,
           "incoming message of " + std::to_string(n) + " bytes exceeds receive buffer of " +
               std::to_string(posted.buffer.length) + " bytes");
    return 1;
  }
  if (n > 0) std::memcpy(posted.buffer.data(), frame.payload.data(), n);
  if (posted.buffer.domain == MemoryDomain::device_sim && !capabilities().device_aware) record_staging(n);
  finish(posted.request, RequestState::complete, n);
  return 1;
}

std::size_t SocketTransport::peer_failed(std::uint32_t peer_rank, const std::string& why) {
  Peer& peer = peers_[peer_rank];
  if (peer.fd >= 0) ::close(peer.fd);
  peer.fd = -1;
  peer.alive = false;
  const std::string message = "link to rank " + std::to_string(peer_rank) + " failed: " + why;
  std::size_t transitions = 0;
  for (Outgoing& out : peer.outq) {
    finish(out.request, RequestState::failed, 0, ErrorCode::connection, message);
    ++transitions;
  }
  peer.outq.clear();
  for (auto it = posted_.begin(); it != posted_.end();) {
    if (std::get<1>(it->first) != peer_rank) {
      ++it;
      continue;
    }
    for (PostedRecv& p : it->second) {
      finish(p.request, RequestState::failed, 0, ErrorCode::connection, message);
      ++transitions;
    }
    it = posted_.erase(it);
  }
  ++activity_;
  return transitions;
}

}  // namespace commshim
