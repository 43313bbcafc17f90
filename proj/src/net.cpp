#include "gmei/net.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

namespace gmei::net {

namespace {

Status set_nonblocking(int fd, bool nonblocking) {
    int flags = fcntl(fd, F_GETFL, 0);
    if (flags < 0) return fail("io_error", "fcntl failed");
    if (nonblocking) flags |= O_NONBLOCK;
    else flags &= ~O_NONBLOCK;
    if (fcntl(fd, F_SETFL, flags) < 0) return fail("io_error", "fcntl failed");
    return ok_status();
}

sockaddr_in make_addr(const std::string& host, int port) {
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<uint16_t>(port));
    if (host.empty() || host == "0.0.0.0") {
        addr.sin_addr.s_addr = INADDR_ANY;
    } else {
        inet_pton(AF_INET, host.c_str(), &addr.sin_addr);
    }
    return addr;
}

}  // namespace

Result<Endpoint> parse_endpoint(const std::string& text) {
    std::size_t colon = text.rfind(':');
    if (colon == std::string::npos || colon + 1 >= text.size())
        return Result<Endpoint>::failure("bad_endpoint", "expected host:port, got '" + text + "'");
    Endpoint ep;
    ep.host = text.substr(0, colon);
    try {
        ep.port = std::stoi(text.substr(colon + 1));
    } catch (...) {
        return Result<Endpoint>::failure("bad_endpoint", "port is not a number in '" + text + "'");
    }
    if (ep.port <= 0 || ep.port > 65535)
        return Result<Endpoint>::failure("bad_endpoint", "port out of range in '" + text + "'");
    return ep;
}

TcpStream::TcpStream(TcpStream&& other) noexcept : fd_(other.fd_) { other.fd_ = -1; }

TcpStream& TcpStream::operator=(TcpStream&& other) noexcept {
    if (this != &other) {
        close();
        fd_ = other.fd_;
        other.fd_ = -1;
    }
    return *this;
}

TcpStream::~TcpStream() { close(); }

void TcpStream::close() {
    if (fd_ >= 0) {
        ::close(fd_);
        fd_ = -1;
    }
}

Result<TcpStream> TcpStream::connect(const std::string& host, int port, int timeout_ms) {
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) return Result<TcpStream>::failure("io_error", "socket() failed");
    set_nonblocking(fd, true);

    sockaddr_in addr = make_addr(host.empty() ? "127.0.0.1" : host, port);
    int rc = ::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr));
    if (rc < 0 && errno == EINPROGRESS) {
        pollfd pfd{fd, POLLOUT, 0};
        rc = ::poll(&pfd, 1, timeout_ms);
        if (rc <= 0) {
            ::close(fd);
            return Result<TcpStream>::failure("connect_failed", "connect timeout to " + host + ":" + std::to_string(port));
        }
        int err = 0;
        socklen_t len = sizeof(err);
        getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len);
        if (err != 0) {
            ::close(fd);
            return Result<TcpStream>::failure("connect_failed", std::strerror(err));
        }
    } else if (rc < 0) {
        ::close(fd);
        return Result<TcpStream>::failure("connect_failed", std::strerror(errno));
    }
    set_nonblocking(fd, false);
    int one = 1;
    setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    return TcpStream(fd);
}

Result<std::string> TcpStream::read_some(int timeout_ms) {
    if (fd_ < 0) return Result<std::string>::failure("closed", "stream not open");
    pollfd pfd{fd_, POLLIN, 0};
    int rc = ::poll(&pfd, 1, timeout_ms);
    if (rc == 0) return std::string{};  // timeout
    if (rc < 0) return Result<std::string>::failure("io_error", std::strerror(errno));
    char buf[4096];
    ssize_t n = ::recv(fd_, buf, sizeof(buf), 0);
    if (n == 0) return Result<std::string>::failure("closed", "peer closed connection");
    if (n < 0) return Result<std::string>::failure("io_error", std::strerror(errno));
    return std::string(buf, static_cast<std::size_t>(n));
}

Status TcpStream::write_all(const std::string& data) {
    if (fd_ < 0) return fail("closed", "stream not open");
    std::size_t sent = 0;
    while (sent < data.size()) {
        ssize_t n = ::send(fd_, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR) continue;
            return fail("io_error", std::strerror(errno));
        }
        sent += static_cast<std::size_t>(n);
    }
    return ok_status();
}

TcpListener::TcpListener(TcpListener&& other) noexcept : fd_(other.fd_), port_(other.port_) {
    other.fd_ = -1;
}

TcpListener& TcpListener::operator=(TcpListener&& other) noexcept {
    if (this != &other) {
        close();
        fd_ = other.fd_;
        port_ = other.port_;
        other.fd_ = -1;
    }
    return *this;
}

TcpListener::~TcpListener() { close(); }

void TcpListener::close() {
    if (fd_ >= 0) {
        ::close(fd_);
        fd_ = -1;
    }
}

Result<TcpListener> TcpListener::bind(const std::string& host, int port) {
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) return Result<TcpListener>::failure("io_error", "socket() failed");
    int one = 1;
    setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr = make_addr(host, port);
    if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) < 0) {
        std::string err = std::strerror(errno);
        ::close(fd);
        return Result<TcpListener>::failure("bind_failure", err + " for " + host + ":" + std::to_string(port));
    }
    if (::listen(fd, 16) < 0) {
        std::string err = std::strerror(errno);
        ::close(fd);
        return Result<TcpListener>::failure("bind_failure", err);
    }
    TcpListener listener;
    listener.fd_ = fd;
    sockaddr_in actual{};
    socklen_t len = sizeof(actual);
    getsockname(fd, reinterpret_cast<sockaddr*>(&actual), &len);
    listener.port_ = ntohs(actual.sin_port);
    return listener;
}

Result<TcpStream> TcpListener::accept(int timeout_ms) {
    if (fd_ < 0) return Result<TcpStream>::failure("closed", "listener not open");
    pollfd pfd{fd_, POLLIN, 0};
    int rc = ::poll(&pfd, 1, timeout_ms);
    if (rc == 0) return TcpStream{};  // timeout: invalid stream
    if (rc < 0) return Result<TcpStream>::failure("io_error", std::strerror(errno));
    int client = ::accept(fd_, nullptr, nullptr);
    if (client < 0) return Result<TcpStream>::failure("io_error", std::strerror(errno));
    int one = 1;
    setsockopt(client, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    return TcpStream(client);
}

int free_port() {
    auto listener = TcpListener::bind("127.0.0.1", 0);
    if (!listener.ok()) return 0;
    return listener.value().port();
}

}  // namespace gmei::net
