#pragma once

#include <memory>
#include <string>

#include "gmei/result.hpp"

namespace gmei::net {

struct Endpoint {
    std::string host;
    int port = 0;
    std::string to_string() const { return host + ":" + std::to_string(port); }
};

// "host:port" -> Endpoint. Error: bad_endpoint.
Result<Endpoint> parse_endpoint(const std::string& text);

// Blocking TCP stream with poll-based deadlines.
class TcpStream {
public:
    TcpStream() = default;
    explicit TcpStream(int fd) : fd_(fd) {}
    TcpStream(TcpStream&& other) noexcept;
    TcpStream& operator=(TcpStream&& other) noexcept;
    TcpStream(const TcpStream&) = delete;
    TcpStream& operator=(const TcpStream&) = delete;
    ~TcpStream();

    static Result<TcpStream> connect(const std::string& host, int port, int timeout_ms);

    // Reads whatever is available within timeout_ms. Ok with an empty string
    // means timeout; errors: closed, io_error.
    Result<std::string> read_some(int timeout_ms);
    Status write_all(const std::string& data);
    void close();
    bool valid() const { return fd_ >= 0; }

private:
    int fd_ = -1;
};

class TcpListener {
public:
    TcpListener() = default;
    TcpListener(TcpListener&& other) noexcept;
    TcpListener& operator=(TcpListener&& other) noexcept;
    TcpListener(const TcpListener&) = delete;
    TcpListener& operator=(const TcpListener&) = delete;
    ~TcpListener();

    static Result<TcpListener> bind(const std::string& host, int port);

    // Ok with an invalid stream means timeout.
    Result<TcpStream> accept(int timeout_ms);
    int port() const { return port_; }
    void close();
    bool valid() const { return fd_ >= 0; }

private:
    int fd_ = -1;
    int port_ = 0;
};

// Asks the kernel for a currently free TCP port (fleet fixture generation).
int free_port();

}  // namespace gmei::net
