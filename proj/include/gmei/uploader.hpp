#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <mutex>
#include <random>
#include <string>
#include <thread>

#include "gmei/his_client.hpp"
#include "gmei/queue.hpp"

namespace gmei {

// Sends pending envelopes oldest-first per device; devices progress
// independently. Network and 5xx failures back off exponentially (base 1 s,
// x2, cap 60 s, full jitter); 4xx envelopes are parked as poison.
class Uploader {
public:
    struct Config {
        HisClient::Config his;
        int backoff_base_ms = 1000;
        int backoff_cap_ms = 60000;
        int poll_interval_ms = 20;
        std::uint64_t jitter_seed = 0;  // 0: seeded from the clock
    };

    struct Stats {
        std::uint64_t envelopes_delivered = 0;
        std::uint64_t observations_delivered = 0;
        std::uint64_t retries = 0;
        std::uint64_t parked_envelopes = 0;
        std::uint64_t duplicates_reported = 0;
        std::string last_delivery_at;  // ISO-8601, empty until first delivery
        std::map<std::string, std::string> last_delivery_per_device;
    };

    Uploader(ObservationQueue& queue, Config config);
    ~Uploader();

    void start();
    // Graceful: when flush_first, runs one final sweep that ignores batching
    // idle rules so partial envelopes go out before the thread stops.
    void stop(bool flush_first);

    Stats stats() const;

private:
    struct DeviceDelivery {
        int failure_streak = 0;
        std::int64_t next_attempt_ms = 0;
    };

    void run();
    bool sweep(bool flush);
    std::int64_t backoff_delay(int streak);

    ObservationQueue& queue_;
    Config config_;
    HisClient client_;
    std::thread thread_;
    std::atomic<bool> stop_{false};
    std::atomic<bool> flush_{false};

    mutable std::mutex mutex_;
    std::map<std::string, DeviceDelivery> delivery_;
    Stats stats_;
    std::mt19937_64 rng_;
};

}  // namespace gmei
