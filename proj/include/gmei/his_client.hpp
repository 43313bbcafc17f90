#pragma once

#include <string>

#include "gmei/result.hpp"
#include "gmei/wire.hpp"

namespace gmei {

struct PostAck {
    int accepted = 0;
    int duplicates = 0;
};

// HTTP client for the cloud HIS wire protocol. Thread-safe: each call opens
// its own connection.
class HisClient {
public:
    struct Config {
        std::string base_url;  // http://host:port
        int timeout_ms = 5000;
    };

    explicit HisClient(Config config) : config_(std::move(config)) {}

    // POST /api/v1/results. Errors: network_error, server_error (5xx,
    // retryable), client_error (4xx, poison).
    Result<PostAck> post_results(const UploadEnvelope& envelope) const;

    // GET /api/v1/worklist/{sample_id}. Errors: not_found, network_error, timeout.
    Result<WorklistOrder> fetch_worklist(const std::string& sample_id) const;

    const Config& config() const { return config_; }

private:
    Config config_;
};

}  // namespace gmei
