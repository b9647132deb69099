#pragma once

// Minimal length-prefixed TCP framing for detection stream replay.
// Wire format: 4-byte big-endian length, then that many bytes of one JSONL
// record (without trailing newline).

#include "calib/geometry.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cstring>
#include <string>
#include <vector>

namespace calib {

struct SocketError : Error {
  explicit SocketError(const std::string& msg) : Error(msg) {}
};

class TcpSocket {
 public:
  TcpSocket() = default;
  explicit TcpSocket(int fd) : fd_(fd) {}
  TcpSocket(const TcpSocket&) = delete;
  TcpSocket& operator=(const TcpSocket&) = delete;
  TcpSocket(TcpSocket&& other) noexcept : fd_(other.fd_) { other.fd_ = -1; }
  TcpSocket& operator=(TcpSocket&& other) noexcept {
    close_fd();
    fd_ = other.fd_;
    other.fd_ = -1;
    return *this;
  }
  ~TcpSocket() { close_fd(); }

  bool valid() const { return fd_ >= 0; }

  static TcpSocket connect_to(const std::string& host, uint16_t port) {
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw SocketError("socket() failed");
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
      ::close(fd);
      throw SocketError("invalid address: " + host);
    }
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      ::close(fd);
      throw SocketError("connect() failed to " + host + ":" + std::to_string(port));
    }
    return TcpSocket(fd);
  }

  void send_record(const std::string& record) {
    uint32_t len = htonl(uint32_t(record.size()));
    write_all(reinterpret_cast<const char*>(&len), 4);
    write_all(record.data(), record.size());
  }

  // returns false on orderly close
  bool recv_record(std::string* record) {
    uint32_t len_be = 0;
    if (!read_all(reinterpret_cast<char*>(&len_be), 4)) return false;
    uint32_t len = ntohl(len_be);
    if (len > 64u * 1024u * 1024u) throw SocketError("record too large");
    record->resize(len);
    if (!read_all(record->data(), len)) throw SocketError("truncated record");
    return true;
  }

 private:
  void close_fd() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }
  void write_all(const char* data, size_t n) {
    size_t off = 0;
    while (off < n) {
      ssize_t w = ::write(fd_, data + off, n - off);
      if (w <= 0) throw SocketError("write() failed");
      off += size_t(w);
    }
  }
  bool read_all(char* data, size_t n) {
    size_t off = 0;
    while (off < n) {
      ssize_t r = ::read(fd_, data + off, n - off);
      if (r == 0 && off == 0) return false;
      if (r <= 0) throw SocketError("read() failed");
      off += size_t(r);
    }
    return true;
  }

  int fd_ = -1;
};

class TcpListener {
 public:
  explicit TcpListener(uint16_t port) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw SocketError("socket() failed");
    int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(port);
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      ::close(fd_);
      fd_ = -1;
      throw SocketError("bind() failed on port " + std::to_string(port));
    }
    if (::listen(fd_, 4) != 0) {
      ::close(fd_);
      fd_ = -1;
      throw SocketError("listen() failed");
    }
  }
  ~TcpListener() {
    if (fd_ >= 0) ::close(fd_);
  }
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  uint16_t port() const {
    sockaddr_in addr{};
    socklen_t len = sizeof(addr);
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    return ntohs(addr.sin_port);
  }

  TcpSocket accept_one() {
    int cfd = ::accept(fd_, nullptr, nullptr);
    if (cfd < 0) throw SocketError("accept() failed");
    return TcpSocket(cfd);
  }

 private:
  int fd_ = -1;
};

}  // namespace calib
