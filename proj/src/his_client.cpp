#include "gmei/his_client.hpp"

#include <httplib.h>

namespace gmei {

using nlohmann::json;

namespace {

struct ParsedUrl {
    std::string host = "127.0.0.1";
    int port = 80;
};

ParsedUrl parse_url(const std::string& base_url) {
    ParsedUrl out;
    std::string rest = base_url;
    if (rest.rfind("http://", 0) == 0) rest = rest.substr(7);
    std::size_t slash = rest.find('/');
    if (slash != std::string::npos) rest = rest.substr(0, slash);
    std::size_t colon = rest.rfind(':');
    if (colon != std::string::npos) {
        out.host = rest.substr(0, colon);
        try {
            out.port = std::stoi(rest.substr(colon + 1));
        } catch (...) {
        }
    } else {
        out.host = rest;
    }
    return out;
}

httplib::Client make_client(const HisClient::Config& config) {
    ParsedUrl url = parse_url(config.base_url);
    httplib::Client cli(url.host, url.port);
    cli.set_connection_timeout(0, config.timeout_ms * 1000);
    cli.set_read_timeout(config.timeout_ms / 1000, (config.timeout_ms % 1000) * 1000);
    cli.set_write_timeout(config.timeout_ms / 1000, (config.timeout_ms % 1000) * 1000);
    return cli;
}

}  // namespace

Result<PostAck> HisClient::post_results(const UploadEnvelope& envelope) const {
    auto cli = make_client(config_);
    auto res = cli.Post("/api/v1/results", envelope_to_wire(envelope).dump(), "application/json");
    if (!res) return Result<PostAck>::failure("network_error", httplib::to_string(res.error()));
    if (res->status >= 500)
        return Result<PostAck>::failure("server_error", "HIS returned " + std::to_string(res->status));
    if (res->status >= 400)
        return Result<PostAck>::failure("client_error",
                                        "HIS returned " + std::to_string(res->status) + ": " + res->body);
    json body = json::parse(res->body, nullptr, false);
    if (body.is_discarded())
        return Result<PostAck>::failure("server_error", "HIS ack body is not JSON");
    return PostAck{body.value("accepted", 0), body.value("duplicates", 0)};
}

Result<WorklistOrder> HisClient::fetch_worklist(const std::string& sample_id) const {
    auto cli = make_client(config_);
    auto res = cli.Get(("/api/v1/worklist/" + sample_id).c_str());
    if (!res) {
        const char* code = res.error() == httplib::Error::ConnectionTimeout ||
                                   res.error() == httplib::Error::Read
                               ? "timeout"
                               : "network_error";
        return Result<WorklistOrder>::failure(code, httplib::to_string(res.error()));
    }
    if (res->status == 404) return Result<WorklistOrder>::failure("not_found", sample_id);
    if (res->status != 200)
        return Result<WorklistOrder>::failure("network_error",
                                              "HIS returned " + std::to_string(res->status));
    json body = json::parse(res->body, nullptr, false);
    if (body.is_discarded())
        return Result<WorklistOrder>::failure("network_error", "worklist body is not JSON");
    auto order = worklist_from_wire(body);
    if (!order.ok()) return Result<WorklistOrder>::failure(order.error().code, order.error().detail);
    return order.value();
}

}  // namespace gmei
