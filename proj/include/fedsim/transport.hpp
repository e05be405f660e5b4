#pragma once

#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fedsim/client.hpp"
#include "fedsim/params.hpp"
#include "fedsim/server.hpp"

namespace fedsim::transport {

// ---------------------------------------------------------------------------
// Wire format
//
// Little-endian header (20 bytes):
//   magic u16 = 0xFDC5 | version u8 = 1 | msg_type u8 | round u32 |
//   client_id u32 | payload_len u64
// Payloads:
//   Broadcast     param_count u64, f64 x param_count
//   ClientResult  num_samples u64, local_steps u64, train_loss f64,
//                 param_count u64, f64 x param_count
//   Shutdown/Ack  empty

enum class MessageType : std::uint8_t { Broadcast = 1, ClientResult = 2, Shutdown = 3, Ack = 4 };

inline constexpr std::uint16_t kWireMagic = 0xFDC5;
inline constexpr std::uint8_t kWireVersion = 1;
inline constexpr std::size_t kHeaderSize = 20;
inline constexpr std::uint32_t kBroadcastClientId = 0xFFFFFFFF;

const char* to_string(MessageType type) noexcept;

struct RoundMessage {
  MessageType type = MessageType::Ack;
  std::uint32_t round = 0;
  std::uint32_t client_id = kBroadcastClientId;
  // Broadcast and ClientResult.
  ParamVector params;
  // ClientResult only.
  std::uint64_t num_samples = 0;
  std::uint64_t local_steps = 0;
  double train_loss = 0.0;

  static RoundMessage broadcast(std::uint32_t round, ParamVector params);
  static RoundMessage result(std::uint32_t round, const server::ClientResult& r);
  static RoundMessage shutdown(std::uint32_t round);
  static RoundMessage ack(std::uint32_t round, std::uint32_t client_id);

  server::ClientResult to_client_result() const;

  /// Bitwise comparison of f64 fields, so NaN payloads and signed zeros
  /// compare the way they travel.
  bool bit_equal(const RoundMessage& other) const noexcept;
};

enum class WireErrorKind { BadMagic, UnsupportedVersion, UnknownType, Truncated, LengthMismatch };

const char* to_string(WireErrorKind kind) noexcept;

class WireError : public std::runtime_error {
 public:
  WireError(WireErrorKind kind, std::size_t offset, const std::string& detail);
  WireErrorKind kind() const noexcept { return kind_; }
  std::size_t offset() const noexcept { return offset_; }

 private:
  WireErrorKind kind_;
  std::size_t offset_;
};

std::vector<unsigned char> encode(const RoundMessage& m);

/// Total over arbitrary input: either a message or a WireError.
RoundMessage decode(std::span<const unsigned char> bytes);

/// Validates a 20-byte header and returns its payload_len.
std::uint64_t decode_header(std::span<const unsigned char> header);

// ---------------------------------------------------------------------------
// Carriers

class ConnectionLost : public std::runtime_error {
 public:
  explicit ConnectionLost(const std::string& what) : std::runtime_error(what) {}
};

class ReceiveTimeout : public std::runtime_error {
 public:
  explicit ReceiveTimeout(const std::string& what) : std::runtime_error(what) {}
};

/// One end of an ordered, reliable message stream. One reader and one writer
/// may use a connection concurrently.
class Connection {
 public:
  static constexpr std::chrono::milliseconds kForever{-1};

  virtual ~Connection() = default;
  virtual void send(const RoundMessage& m) = 0;
  /// Blocks until a message arrives. Throws ConnectionLost when the peer is
  /// gone and ReceiveTimeout when `timeout` (if not kForever) elapses.
  virtual RoundMessage receive(std::chrono::milliseconds timeout = kForever) = 0;
  virtual void close() = 0;
};

/// Thread-safe FIFO of encoded frames.
class FrameQueue {
 public:
  void push(std::vector<unsigned char> frame);
  /// Throws ReceiveTimeout on timeout and ConnectionLost once closed and drained.
  std::vector<unsigned char> pop(std::chrono::milliseconds timeout);
  void close();

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::vector<unsigned char>> frames_;
  bool closed_ = false;
};

/// In-process carrier. Messages are encoded on send and decoded on receive,
/// so simulation exercises the same codec as the socket carrier.
class InProcConnection final : public Connection {
 public:
  InProcConnection(std::shared_ptr<FrameQueue> inbox, std::shared_ptr<FrameQueue> outbox)
      : inbox_(std::move(inbox)), outbox_(std::move(outbox)) {}
  ~InProcConnection() override { close(); }

  void send(const RoundMessage& m) override;
  RoundMessage receive(std::chrono::milliseconds timeout = kForever) override;
  void close() override;

 private:
  std::shared_ptr<FrameQueue> inbox_;
  std::shared_ptr<FrameQueue> outbox_;
};

/// Two connected in-process endpoints.
std::pair<std::unique_ptr<Connection>, std::unique_ptr<Connection>> inproc_pair();

/// TCP carrier over a connected socket.
class TcpConnection final : public Connection {
 public:
  explicit TcpConnection(int fd);
  ~TcpConnection() override;
  TcpConnection(const TcpConnection&) = delete;
  TcpConnection& operator=(const TcpConnection&) = delete;

  void send(const RoundMessage& m) override;
  RoundMessage receive(std::chrono::milliseconds timeout = kForever) override;
  void close() override;

 private:
  void read_exact(unsigned char* out, std::size_t n, std::chrono::milliseconds timeout);

  int fd_;
  std::mutex send_mu_;
};

class TcpListener {
 public:
  static constexpr std::uint16_t kDefaultPort = 9898;

  /// Port 0 picks an ephemeral port; see port().
  TcpListener(const std::string& host, std::uint16_t port);
  ~TcpListener();
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  std::uint16_t port() const noexcept { return port_; }
  std::unique_ptr<TcpConnection> accept(std::chrono::milliseconds timeout);

 private:
  int fd_;
  std::uint16_t port_;
};

/// Connects, retrying until `timeout` while the listener comes up.
std::unique_ptr<TcpConnection> tcp_connect(const std::string& host, std::uint16_t port,
                                           std::chrono::milliseconds timeout);

/// Port from --port, then FEDSIM_PORT, then 9898.
std::uint16_t resolve_port(const std::string& flag_value);

// ---------------------------------------------------------------------------
// Topology and protocol roles

enum class Role { Server, Worker };

struct Endpoint {
  Role role = Role::Worker;
  std::uint32_t worker_id = 0;
  std::vector<std::uint32_t> clients_hosted;
};

/// Client k is hosted by worker k mod num_workers.
std::vector<Endpoint> assign_clients(std::size_t num_clients, std::size_t num_workers);

/// Every client id in [0, num_clients) hosted by exactly one worker.
void validate_topology(std::span<const Endpoint> workers, std::size_t num_clients);

/// Server half of the protocol. Each round every worker receives a Broadcast
/// and answers with one ClientResult per hosted cohort member, in ascending
/// client id. Connections are indexed by worker id.
class RemoteExecutor final : public server::ClientExecutor {
 public:
  RemoteExecutor(std::vector<std::unique_ptr<Connection>> workers, std::vector<Endpoint> topology,
                 std::chrono::milliseconds round_timeout = std::chrono::minutes(10));
  ~RemoteExecutor() override;

  std::vector<server::ClientResult> run_clients(std::size_t round,
                                                std::span<const std::uint32_t> cohort,
                                                const ParamVector& global_params) override;

  /// Sends Shutdown and waits up to `grace` for each worker's Ack.
  /// Returns the number of workers that acknowledged.
  std::size_t shutdown(std::chrono::milliseconds grace);

 private:
  std::vector<std::unique_ptr<Connection>> workers_;
  std::vector<Endpoint> topology_;
  std::chrono::milliseconds round_timeout_;
  bool shut_down_ = false;
};

/// Hello sent by a worker right after connecting: Ack with client_id = worker id.
RoundMessage worker_hello(std::uint32_t worker_id);

struct WorkerStats {
  std::size_t rounds = 0;
  std::size_t client_updates = 0;
};

/// Worker half of the protocol. Replays the server's cohort draw from the
/// shared federation config and trains its hosted clients sequentially.
/// Returns after acknowledging Shutdown.
WorkerStats run_worker(Connection& conn, const Endpoint& self,
                       std::vector<client::ClientState>& hosted,
                       const client::ClientConfig& cfg, const models::Model& model,
                       const server::FederationConfig& federation, bool send_hello = true);

}  // namespace fedsim::transport
