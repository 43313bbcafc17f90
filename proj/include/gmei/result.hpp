#pragma once

#include <optional>
#include <string>
#include <utility>
#include <variant>

namespace gmei {

// Carried by every fallible operation. `code` is a stable machine-readable
// identifier ("checksum_mismatch", "unknown_device", ...); `detail` is for
// humans and logs.
struct Error {
    std::string code;
    std::string detail;

    std::string to_string() const {
        return detail.empty() ? code : code + ": " + detail;
    }
};

template <typename T>
class Result {
public:
    Result(T value) : v_(std::move(value)) {}
    Result(Error err) : v_(std::move(err)) {}

    static Result failure(std::string code, std::string detail = {}) {
        return Result(Error{std::move(code), std::move(detail)});
    }

    bool ok() const { return std::holds_alternative<T>(v_); }
    explicit operator bool() const { return ok(); }

    T& value() & { return std::get<T>(v_); }
    const T& value() const& { return std::get<T>(v_); }
    T&& value() && { return std::get<T>(std::move(v_)); }

    const Error& error() const { return std::get<Error>(v_); }

private:
    std::variant<T, Error> v_;
};

// For operations that either succeed or report an Error.
using Status = std::optional<Error>;

inline Status ok_status() { return std::nullopt; }
inline Status fail(std::string code, std::string detail = {}) {
    return Error{std::move(code), std::move(detail)};
}

}  // namespace gmei
