#include "fedsim/transport.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <bit>
#include <cerrno>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <thread>

#include "fedsim/bytes.hpp"

namespace fedsim::transport {

const char* to_string(MessageType type) noexcept {
  switch (type) {
    case MessageType::Broadcast: return "Broadcast";
    case MessageType::ClientResult: return "ClientResult";
    case MessageType::Shutdown: return "Shutdown";
    case MessageType::Ack: return "Ack";
  }
  return "Unknown";
}

const char* to_string(WireErrorKind kind) noexcept {
  switch (kind) {
    case WireErrorKind::BadMagic: return "BadMagic";
    case WireErrorKind::UnsupportedVersion: return "UnsupportedVersion";
    case WireErrorKind::UnknownType: return "UnknownType";
    case WireErrorKind::Truncated: return "Truncated";
    case WireErrorKind::LengthMismatch: return "LengthMismatch";
  }
  return "Unknown";
}

WireError::WireError(WireErrorKind kind, std::size_t offset, const std::string& detail)
    : std::runtime_error(std::string(to_string(kind)) + " at offset " + std::to_string(offset) +
                         ": " + detail),
      kind_(kind),
      offset_(offset) {}

RoundMessage RoundMessage::broadcast(std::uint32_t round, ParamVector params) {
  RoundMessage m;
  m.type = MessageType::Broadcast;
  m.round = round;
  m.client_id = kBroadcastClientId;
  m.params = std::move(params);
  return m;
}

RoundMessage RoundMessage::result(std::uint32_t round, const server::ClientResult& r) {
  RoundMessage m;
  m.type = MessageType::ClientResult;
  m.round = round;
  m.client_id = r.client_id;
  m.params = r.params;
  m.num_samples = r.num_samples;
  m.local_steps = r.local_steps;
  m.train_loss = r.train_loss;
  return m;
}

RoundMessage RoundMessage::shutdown(std::uint32_t round) {
  RoundMessage m;
  m.type = MessageType::Shutdown;
  m.round = round;
  m.client_id = kBroadcastClientId;
  return m;
}

RoundMessage RoundMessage::ack(std::uint32_t round, std::uint32_t client_id) {
  RoundMessage m;
  m.type = MessageType::Ack;
  m.round = round;
  m.client_id = client_id;
  return m;
}

server::ClientResult RoundMessage::to_client_result() const {
  return server::ClientResult{client_id, params, num_samples, train_loss, local_steps};
}

bool RoundMessage::bit_equal(const RoundMessage& o) const noexcept {
  if (type != o.type || round != o.round || client_id != o.client_id) return false;
  if (type == MessageType::Shutdown || type == MessageType::Ack) return true;
  if (params.size() != o.params.size()) return false;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (std::bit_cast<std::uint64_t>(params[i]) != std::bit_cast<std::uint64_t>(o.params[i])) {
      return false;
    }
  }
  if (type == MessageType::Broadcast) return true;
  return num_samples == o.num_samples && local_steps == o.local_steps &&
         std::bit_cast<std::uint64_t>(train_loss) == std::bit_cast<std::uint64_t>(o.train_loss);
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::uint64_t kResultFixedBytes = 8 + 8 + 8 + 8;

std::uint64_t payload_size(const RoundMessage& m) {
  switch (m.type) {
    case MessageType::Broadcast: return 8 + 8 * static_cast<std::uint64_t>(m.params.size());
    case MessageType::ClientResult:
      return kResultFixedBytes + 8 * static_cast<std::uint64_t>(m.params.size());
    case MessageType::Shutdown:
    case MessageType::Ack: return 0;
  }
  return 0;
}

bool known_type(std::uint8_t t) { return t >= 1 && t <= 4; }

}  // namespace

std::vector<unsigned char> encode(const RoundMessage& m) {
  const auto payload_len = payload_size(m);
  std::vector<unsigned char> out;
  out.reserve(kHeaderSize + payload_len);
  ByteWriter w(out);
  w.put<std::uint16_t>(kWireMagic);
  w.put<std::uint8_t>(kWireVersion);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(m.type));
  w.put<std::uint32_t>(m.round);
  w.put<std::uint32_t>(m.client_id);
  w.put<std::uint64_t>(payload_len);
  if (m.type == MessageType::ClientResult) {
    w.put<std::uint64_t>(m.num_samples);
    w.put<std::uint64_t>(m.local_steps);
    w.put_f64(m.train_loss);
  }
  if (m.type == MessageType::Broadcast || m.type == MessageType::ClientResult) {
    w.put<std::uint64_t>(m.params.size());
    for (double v : m.params) w.put_f64(v);
  }
  return out;
}

std::uint64_t decode_header(std::span<const unsigned char> bytes) {
  if (bytes.size() < 2) throw WireError(WireErrorKind::Truncated, bytes.size(), "no magic");
  ByteReader r(bytes);
  const auto magic = r.get<std::uint16_t>();
  if (magic != kWireMagic) {
    throw WireError(WireErrorKind::BadMagic, 0, "expected 0xFDC5");
  }
  if (bytes.size() < 3) throw WireError(WireErrorKind::Truncated, bytes.size(), "no version");
  const auto version = r.get<std::uint8_t>();
  if (version != kWireVersion) {
    throw WireError(WireErrorKind::UnsupportedVersion, 2, "version " + std::to_string(version));
  }
  if (bytes.size() < 4) throw WireError(WireErrorKind::Truncated, bytes.size(), "no type");
  const auto type = r.get<std::uint8_t>();
  if (!known_type(type)) {
    throw WireError(WireErrorKind::UnknownType, 3, "msg_type " + std::to_string(type));
  }
  if (bytes.size() < kHeaderSize) {
    throw WireError(WireErrorKind::Truncated, bytes.size(), "incomplete header");
  }
  r.get<std::uint32_t>();
  r.get<std::uint32_t>();
  const auto payload_len = r.get<std::uint64_t>();

  // Type-specific length sanity, checkable from the header alone.
  const auto t = static_cast<MessageType>(type);
  if ((t == MessageType::Shutdown || t == MessageType::Ack) && payload_len != 0) {
    throw WireError(WireErrorKind::LengthMismatch, 12, "control message with payload");
  }
  if (t == MessageType::Broadcast && (payload_len < 8 || (payload_len - 8) % 8 != 0)) {
    throw WireError(WireErrorKind::LengthMismatch, 12, "bad broadcast payload_len");
  }
  if (t == MessageType::ClientResult &&
      (payload_len < kResultFixedBytes || (payload_len - kResultFixedBytes) % 8 != 0)) {
    throw WireError(WireErrorKind::LengthMismatch, 12, "bad result payload_len");
  }
  return payload_len;
}

RoundMessage decode(std::span<const unsigned char> bytes) {
  const auto payload_len = decode_header(bytes);
  const std::size_t remaining = bytes.size() - kHeaderSize;
  if (payload_len > remaining) {
    throw WireError(WireErrorKind::Truncated, bytes.size(),
                    "payload_len " + std::to_string(payload_len) + " exceeds " +
                        std::to_string(remaining) + " remaining bytes");
  }
  if (payload_len < remaining) {
    throw WireError(WireErrorKind::LengthMismatch, kHeaderSize + payload_len, "trailing bytes");
  }

  ByteReader r(bytes);
  r.get<std::uint16_t>();
  r.get<std::uint8_t>();
  RoundMessage m;
  m.type = static_cast<MessageType>(r.get<std::uint8_t>());
  m.round = r.get<std::uint32_t>();
  m.client_id = r.get<std::uint32_t>();
  r.get<std::uint64_t>();

  if (m.type == MessageType::ClientResult) {
    m.num_samples = r.get<std::uint64_t>();
    m.local_steps = r.get<std::uint64_t>();
    m.train_loss = r.get_f64();
  }
  if (m.type == MessageType::Broadcast || m.type == MessageType::ClientResult) {
    const std::size_t count_at = r.offset();
    const auto count = r.get<std::uint64_t>();
    if (count != r.remaining() / 8 || r.remaining() % 8 != 0) {
      throw WireError(WireErrorKind::LengthMismatch, count_at,
                      "param_count " + std::to_string(count) + " disagrees with payload_len");
    }
    std::vector<double> values(static_cast<std::size_t>(count));
    for (auto& v : values) v = r.get_f64();
    m.params = ParamVector(std::move(values));
  }
  return m;
}

// ---------------------------------------------------------------------------
// In-process carrier

void FrameQueue::push(std::vector<unsigned char> frame) {
  {
    std::lock_guard lock(mu_);
    if (closed_) throw ConnectionLost("in-process peer closed");
    frames_.push_back(std::move(frame));
  }
  cv_.notify_one();
}

std::vector<unsigned char> FrameQueue::pop(std::chrono::milliseconds timeout) {
  std::unique_lock lock(mu_);
  auto ready = [&] { return !frames_.empty() || closed_; };
  if (timeout.count() < 0) {
    cv_.wait(lock, ready);
  } else if (!cv_.wait_for(lock, timeout, ready)) {
    throw ReceiveTimeout("no message within " + std::to_string(timeout.count()) + " ms");
  }
  if (frames_.empty()) throw ConnectionLost("in-process peer closed");
  auto frame = std::move(frames_.front());
  frames_.pop_front();
  return frame;
}

void FrameQueue::close() {
  {
    std::lock_guard lock(mu_);
    closed_ = true;
  }
  cv_.notify_all();
}

void InProcConnection::send(const RoundMessage& m) { outbox_->push(encode(m)); }

RoundMessage InProcConnection::receive(std::chrono::milliseconds timeout) {
  return decode(inbox_->pop(timeout));
}

void InProcConnection::close() {
  // Queued frames stay readable by the peer; only new sends fail.
  outbox_->close();
  inbox_->close();
}

std::pair<std::unique_ptr<Connection>, std::unique_ptr<Connection>> inproc_pair() {
  auto a_to_b = std::make_shared<FrameQueue>();
  auto b_to_a = std::make_shared<FrameQueue>();
  return {std::make_unique<InProcConnection>(b_to_a, a_to_b),
          std::make_unique<InProcConnection>(a_to_b, b_to_a)};
}

// ---------------------------------------------------------------------------
// TCP carrier

namespace {

std::string errno_text(const char* what) { return std::string(what) + ": " + std::strerror(errno); }

bool wait_readable(int fd, std::chrono::milliseconds timeout) {
  pollfd p{fd, POLLIN, 0};
  const int ms = timeout.count() < 0 ? -1 : static_cast<int>(timeout.count());
  while (true) {
    const int rc = ::poll(&p, 1, ms);
    if (rc > 0) return true;
    if (rc == 0) return false;
    if (errno != EINTR) throw ConnectionLost(errno_text("poll"));
  }
}

sockaddr_in make_addr(const std::string& host, std::uint16_t port) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  const std::string h = host == "localhost" ? "127.0.0.1" : host;
  if (::inet_pton(AF_INET, h.c_str(), &addr.sin_addr) != 1) {
    addrinfo hints{};
    hints.ai_family = AF_INET;
    addrinfo* res = nullptr;
    if (::getaddrinfo(h.c_str(), nullptr, &hints, &res) != 0 || !res) {
      throw std::invalid_argument("cannot resolve host " + host);
    }
    addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
    ::freeaddrinfo(res);
  }
  return addr;
}

}  // namespace

TcpConnection::TcpConnection(int fd) : fd_(fd) {
  int one = 1;
  ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

TcpConnection::~TcpConnection() { close(); }

void TcpConnection::close() {
  if (fd_ >= 0) {
    ::shutdown(fd_, SHUT_RDWR);
    ::close(fd_);
    fd_ = -1;
  }
}

void TcpConnection::send(const RoundMessage& m) {
  const auto frame = encode(m);
  std::lock_guard lock(send_mu_);
  if (fd_ < 0) throw ConnectionLost("send on closed connection");
  std::size_t sent = 0;
  while (sent < frame.size()) {
    const auto n = ::send(fd_, frame.data() + sent, frame.size() - sent, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw ConnectionLost(errno_text("send"));
    }
    sent += static_cast<std::size_t>(n);
  }
}

void TcpConnection::read_exact(unsigned char* out, std::size_t n,
                               std::chrono::milliseconds timeout) {
  std::size_t got = 0;
  while (got < n) {
    if (!wait_readable(fd_, timeout)) {
      throw ReceiveTimeout("no data within " + std::to_string(timeout.count()) + " ms");
    }
    const auto r = ::recv(fd_, out + got, n - got, 0);
    if (r == 0) throw ConnectionLost("peer closed the connection");
    if (r < 0) {
      if (errno == EINTR) continue;
      throw ConnectionLost(errno_text("recv"));
    }
    got += static_cast<std::size_t>(r);
  }
}

RoundMessage TcpConnection::receive(std::chrono::milliseconds timeout) {
  if (fd_ < 0) throw ConnectionLost("receive on closed connection");
  std::vector<unsigned char> frame(kHeaderSize);
  read_exact(frame.data(), kHeaderSize, timeout);
  const auto payload_len = decode_header(frame);
  // 1 GiB of payload is far beyond any model this carrier moves.
  if (payload_len > (std::uint64_t{1} << 30)) {
    throw WireError(WireErrorKind::LengthMismatch, 12, "payload_len over framing limit");
  }
  frame.resize(kHeaderSize + static_cast<std::size_t>(payload_len));
  read_exact(frame.data() + kHeaderSize, static_cast<std::size_t>(payload_len), timeout);
  return decode(frame);
}

TcpListener::TcpListener(const std::string& host, std::uint16_t port) {
  fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd_ < 0) throw std::runtime_error(errno_text("socket"));
  int one = 1;
  ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  auto addr = make_addr(host, port);
  if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    const auto msg = errno_text(("bind " + host + ":" + std::to_string(port)).c_str());
    ::close(fd_);
    throw std::runtime_error(msg);
  }
  if (::listen(fd_, 64) != 0) {
    const auto msg = errno_text("listen");
    ::close(fd_);
    throw std::runtime_error(msg);
  }
  socklen_t len = sizeof(addr);
  ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

TcpListener::~TcpListener() {
  if (fd_ >= 0) ::close(fd_);
}

std::unique_ptr<TcpConnection> TcpListener::accept(std::chrono::milliseconds timeout) {
  if (!wait_readable(fd_, timeout)) {
    throw ReceiveTimeout("no worker connected within " + std::to_string(timeout.count()) + " ms");
  }
  const int fd = ::accept(fd_, nullptr, nullptr);
  if (fd < 0) throw ConnectionLost(errno_text("accept"));
  return std::make_unique<TcpConnection>(fd);
}

std::unique_ptr<TcpConnection> tcp_connect(const std::string& host, std::uint16_t port,
                                           std::chrono::milliseconds timeout) {
  const auto addr = make_addr(host, port);
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  while (true) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw std::runtime_error(errno_text("socket"));
    if (::connect(fd, reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)) == 0) {
      return std::make_unique<TcpConnection>(fd);
    }
    const int err = errno;
    ::close(fd);
    if (std::chrono::steady_clock::now() >= deadline) {
      throw ConnectionLost("connect " + host + ":" + std::to_string(port) + ": " + std::strerror(err));
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
}

std::uint16_t resolve_port(const std::string& flag_value) {
  auto parse = [](const std::string& s, const char* source) -> std::uint16_t {
    std::size_t used = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != s.size() || s.empty() || v > 65535) {
      throw std::invalid_argument(std::string("invalid port from ") + source + ": \"" + s + "\"");
    }
    return static_cast<std::uint16_t>(v);
  };
  if (!flag_value.empty()) return parse(flag_value, "--port");
  if (const char* env = std::getenv("FEDSIM_PORT"); env && *env) return parse(env, "FEDSIM_PORT");
  return TcpListener::kDefaultPort;
}

// ---------------------------------------------------------------------------
// Protocol

std::vector<Endpoint> assign_clients(std::size_t num_clients, std::size_t num_workers) {
  if (num_workers == 0) throw std::invalid_argument("need at least one worker");
  std::vector<Endpoint> workers(num_workers);
  for (std::size_t w = 0; w < num_workers; ++w) {
    workers[w].role = Role::Worker;
    workers[w].worker_id = static_cast<std::uint32_t>(w);
  }
  for (std::size_t k = 0; k < num_clients; ++k) {
    workers[k % num_workers].clients_hosted.push_back(static_cast<std::uint32_t>(k));
  }
  return workers;
}

void validate_topology(std::span<const Endpoint> workers, std::size_t num_clients) {
  std::vector<int> owner(num_clients, -1);
  for (std::size_t w = 0; w < workers.size(); ++w) {
    if (workers[w].role != Role::Worker) throw std::invalid_argument("topology entry is not a worker");
    if (workers[w].worker_id != w) throw std::invalid_argument("worker ids must be 0..W-1 in order");
    for (auto c : workers[w].clients_hosted) {
      if (c >= num_clients) throw std::invalid_argument("worker hosts unknown client " + std::to_string(c));
      if (owner[c] != -1) throw std::invalid_argument("client " + std::to_string(c) + " hosted twice");
      owner[c] = static_cast<int>(w);
    }
  }
  for (std::size_t c = 0; c < num_clients; ++c) {
    if (owner[c] == -1) throw std::invalid_argument("client " + std::to_string(c) + " has no worker");
  }
}

RemoteExecutor::RemoteExecutor(std::vector<std::unique_ptr<Connection>> workers,
                               std::vector<Endpoint> topology,
                               std::chrono::milliseconds round_timeout)
    : workers_(std::move(workers)), topology_(std::move(topology)), round_timeout_(round_timeout) {
  if (workers_.size() != topology_.size()) {
    throw std::invalid_argument("one connection per worker required");
  }
}

RemoteExecutor::~RemoteExecutor() {
  if (!shut_down_) {
    try {
      shutdown(std::chrono::milliseconds(1000));
    } catch (...) {
    }
  }
}

std::vector<server::ClientResult> RemoteExecutor::run_clients(
    std::size_t round, std::span<const std::uint32_t> cohort, const ParamVector& global_params) {
  const auto wire_round = static_cast<std::uint32_t>(round);
  std::vector<std::vector<std::uint32_t>> expected(workers_.size());
  for (std::size_t w = 0; w < topology_.size(); ++w) {
    for (auto c : topology_[w].clients_hosted) {
      if (std::binary_search(cohort.begin(), cohort.end(), c)) expected[w].push_back(c);
    }
    std::sort(expected[w].begin(), expected[w].end());
  }

  try {
    const auto bcast = RoundMessage::broadcast(wire_round, global_params);
    for (auto& conn : workers_) conn->send(bcast);
  } catch (const std::exception& e) {
    throw server::RoundAbort("round " + std::to_string(round) + ": broadcast failed: " + e.what());
  }

  // One reader per connection; results land in per-worker slots.
  std::vector<std::vector<server::ClientResult>> got(workers_.size());
  std::vector<std::string> errors(workers_.size());
  auto collect = [&](std::size_t w) {
    try {
      for (auto c : expected[w]) {
        auto msg = workers_[w]->receive(round_timeout_);
        if (msg.type != MessageType::ClientResult) {
          throw std::runtime_error(std::string("unexpected ") + to_string(msg.type));
        }
        if (msg.round != wire_round || msg.client_id != c) {
          throw std::runtime_error("out-of-order result (round " + std::to_string(msg.round) +
                                   ", client " + std::to_string(msg.client_id) + "), expected client " +
                                   std::to_string(c));
        }
        got[w].push_back(msg.to_client_result());
      }
    } catch (const std::exception& e) {
      errors[w] = e.what();
    }
  };
  std::vector<std::thread> readers;
  for (std::size_t w = 0; w < workers_.size(); ++w) {
    if (!expected[w].empty()) readers.emplace_back(collect, w);
  }
  for (auto& t : readers) t.join();

  for (std::size_t w = 0; w < workers_.size(); ++w) {
    if (!errors[w].empty()) {
      throw server::RoundAbort("round " + std::to_string(round) + ": worker " + std::to_string(w) +
                               ": " + errors[w]);
    }
  }
  std::vector<server::ClientResult> results;
  for (auto& g : got) {
    for (auto& r : g) results.push_back(std::move(r));
  }
  return results;
}

std::size_t RemoteExecutor::shutdown(std::chrono::milliseconds grace) {
  shut_down_ = true;
  std::size_t acked = 0;
  for (auto& conn : workers_) {
    try {
      conn->send(RoundMessage::shutdown(0));
    } catch (const std::exception&) {
    }
  }
  const auto deadline = std::chrono::steady_clock::now() + grace;
  for (auto& conn : workers_) {
    try {
      // Results left over from an aborted round may still be queued ahead of the Ack.
      while (true) {
        auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
            deadline - std::chrono::steady_clock::now());
        auto msg = conn->receive(std::max(left, std::chrono::milliseconds(0)));
        if (msg.type == MessageType::Ack) {
          ++acked;
          break;
        }
      }
    } catch (const std::exception&) {
    }
    conn->close();
  }
  return acked;
}

RoundMessage worker_hello(std::uint32_t worker_id) { return RoundMessage::ack(0, worker_id); }

WorkerStats run_worker(Connection& conn, const Endpoint& self,
                       std::vector<client::ClientState>& hosted,
                       const client::ClientConfig& cfg, const models::Model& model,
                       const server::FederationConfig& federation, bool send_hello) {
  if (hosted.size() != self.clients_hosted.size()) {
    throw std::invalid_argument("hosted client states do not match the endpoint");
  }
  for (std::size_t i = 0; i < hosted.size(); ++i) {
    if (hosted[i].client_id != self.clients_hosted[i]) {
      throw std::invalid_argument("hosted client states out of order");
    }
  }
  WorkerStats stats;
  if (send_hello) conn.send(worker_hello(self.worker_id));
  while (true) {
    const auto msg = conn.receive();
    switch (msg.type) {
      case MessageType::Shutdown:
        conn.send(RoundMessage::ack(msg.round, self.worker_id));
        return stats;
      case MessageType::Broadcast: {
        const auto cohort = server::sample_cohort(federation, msg.round);
        for (auto& state : hosted) {
          if (!std::binary_search(cohort.begin(), cohort.end(), state.client_id)) continue;
          auto update = client::client_update(state, cfg, model, msg.params, msg.round);
          conn.send(RoundMessage::result(
              msg.round, server::ClientResult{state.client_id, std::move(update.params),
                                              update.num_samples, update.train_loss,
                                              update.local_steps}));
          ++stats.client_updates;
        }
        ++stats.rounds;
        break;
      }
      default:
        throw std::runtime_error(std::string("worker received unexpected ") + to_string(msg.type));
    }
  }
}

}  // namespace fedsim::transport
