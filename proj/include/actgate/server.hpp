#pragma once

// Line-delimited JSON transport for a Gate: one request object per line in,
// one response object per line out.

#include <atomic>
#include <cstdint>
#include <iosfwd>
#include <string>

#include "actgate/gate.hpp"

namespace actgate::gate {

/// Answers requests in arrival order until end of stream. Blank lines are
/// skipped. Returns the number of lines answered.
std::int64_t serve_stream(Gate& gate, std::istream& in, std::ostream& out);

/// TCP listener; each connection is served on its own thread and each
/// response line is written with a single send loop before the next request
/// on that connection is read.
class TcpServer {
 public:
  /// Binds and listens immediately; port 0 picks an ephemeral port.
  TcpServer(Gate& gate, std::uint16_t port, const std::string& host = "127.0.0.1");
  ~TcpServer();
  TcpServer(const TcpServer&) = delete;
  TcpServer& operator=(const TcpServer&) = delete;

  std::uint16_t port() const { return port_; }

  /// Blocks until stop() is called or `*external_stop` becomes true.
  void run(const std::atomic<bool>* external_stop = nullptr);
  void stop() { stop_ = true; }

 private:
  void serve_connection(int fd);

  Gate& gate_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> stop_{false};
};

}  // namespace actgate::gate
