#include "actgate/server.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <istream>
#include <ostream>
#include <thread>
#include <vector>

#include "actgate/error.hpp"

namespace actgate::gate {
namespace {

constexpr int kPollMs = 100;

bool send_all(int fd, std::string_view data) {
  while (!data.empty()) {
    const ssize_t n = ::send(fd, data.data(), data.size(), MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
  return true;
}

bool blank(std::string_view s) {
  return s.find_first_not_of(" \t\r") == std::string_view::npos;
}

}  // namespace

std::int64_t serve_stream(Gate& gate, std::istream& in, std::ostream& out) {
  std::int64_t answered = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (blank(line)) continue;
    out << gate.handle_line(line) << '\n';
    out.flush();
    ++answered;
  }
  return answered;
}

TcpServer::TcpServer(Gate& gate, std::uint16_t port, const std::string& host) : gate_(gate) {
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw Error(std::string("socket: ") + std::strerror(errno));
  const int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
    ::close(listen_fd_);
    throw Error("invalid listen address '" + host + "'");
  }
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 ||
      ::listen(listen_fd_, 64) != 0) {
    const std::string msg = std::strerror(errno);
    ::close(listen_fd_);
    throw Error("bind failure on " + host + ":" + std::to_string(port) + ": " + msg);
  }
  socklen_t len = sizeof addr;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

TcpServer::~TcpServer() {
  if (listen_fd_ >= 0) ::close(listen_fd_);
}

void TcpServer::run(const std::atomic<bool>* external_stop) {
  std::vector<std::jthread> connections;
  auto stopping = [&] { return stop_.load() || (external_stop && external_stop->load()); };
  while (!stopping()) {
    pollfd pfd{listen_fd_, POLLIN, 0};
    const int ready = ::poll(&pfd, 1, kPollMs);
    if (ready <= 0) continue;
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) continue;
    connections.emplace_back([this, fd] { serve_connection(fd); });
  }
  stop_ = true;
  // jthreads join here; connections notice stop_ within one poll interval.
}

void TcpServer::serve_connection(int fd) {
  std::string buffer;
  char chunk[4096];
  bool open = true;
  while (open && !stop_.load()) {
    pollfd pfd{fd, POLLIN, 0};
    const int ready = ::poll(&pfd, 1, kPollMs);
    if (ready <= 0) continue;
    const ssize_t n = ::recv(fd, chunk, sizeof chunk, 0);
    if (n <= 0) {
      open = false;
    } else {
      buffer.append(chunk, static_cast<std::size_t>(n));
    }
    std::size_t pos;
    while ((pos = buffer.find('\n')) != std::string::npos) {
      const std::string line = buffer.substr(0, pos);
      buffer.erase(0, pos + 1);
      if (blank(line)) continue;
      if (!send_all(fd, gate_.handle_line(line) + "\n")) {
        open = false;
        break;
      }
    }
  }
  if (!buffer.empty() && !blank(buffer)) send_all(fd, gate_.handle_line(buffer) + "\n");
  ::close(fd);
}

}  // namespace actgate::gate
