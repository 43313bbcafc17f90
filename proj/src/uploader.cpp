#include "gmei/uploader.hpp"

#include <chrono>

#include "gmei/domain.hpp"
#include "gmei/util.hpp"

namespace gmei {

Uploader::Uploader(ObservationQueue& queue, Config config)
    : queue_(queue), config_(std::move(config)), client_(config_.his) {
    std::uint64_t seed = config_.jitter_seed;
    if (seed == 0) seed = static_cast<std::uint64_t>(util::now_ms()) * 2654435761ull + 1;
    rng_.seed(seed);
}

Uploader::~Uploader() { stop(false); }

void Uploader::start() {
    stop_ = false;
    thread_ = std::thread([this] { run(); });
}

void Uploader::stop(bool flush_first) {
    if (!thread_.joinable()) return;
    if (flush_first) flush_ = true;
    stop_ = true;
    thread_.join();
}

Uploader::Stats Uploader::stats() const {
    std::lock_guard lock(mutex_);
    return stats_;
}

std::int64_t Uploader::backoff_delay(int streak) {
    std::int64_t window = config_.backoff_base_ms;
    for (int i = 1; i < streak && window < config_.backoff_cap_ms; ++i) window *= 2;
    if (window > config_.backoff_cap_ms) window = config_.backoff_cap_ms;
    std::uniform_int_distribution<std::int64_t> jitter(0, window);  // full jitter
    std::lock_guard lock(mutex_);
    return jitter(rng_);
}

void Uploader::run() {
    while (!stop_) {
        sweep(false);
        std::this_thread::sleep_for(std::chrono::milliseconds(config_.poll_interval_ms));
    }
    if (flush_) {
        // Final pass: push whatever is pending, once per device.
        sweep(true);
    }
}

bool Uploader::sweep(bool flush) {
    bool sent_any = false;
    for (const auto& device : queue_.device_ids()) {
        const std::int64_t now = util::now_ms();
        {
            std::lock_guard lock(mutex_);
            if (!flush && delivery_[device].next_attempt_ms > now) continue;
        }
        auto envelope = queue_.next_envelope(device, now, flush);
        if (!envelope) continue;

        auto ack = client_.post_results(*envelope);
        if (ack.ok()) {
            queue_.mark_acked(*envelope);
            std::lock_guard lock(mutex_);
            delivery_[device].failure_streak = 0;
            delivery_[device].next_attempt_ms = 0;
            stats_.envelopes_delivered += 1;
            stats_.observations_delivered += envelope->observations.size();
            stats_.duplicates_reported += static_cast<std::uint64_t>(ack.value().duplicates);
            stats_.last_delivery_at = now_utc_iso8601();
            stats_.last_delivery_per_device[device] = stats_.last_delivery_at;
            sent_any = true;
        } else if (ack.error().code == "client_error") {
            // Poison: schema rejections need human action; retrying cannot
            // fix them. Later envelopes for other devices still flow.
            queue_.park(*envelope, ack.error().detail);
            std::lock_guard lock(mutex_);
            delivery_[device].failure_streak = 0;
            stats_.parked_envelopes += 1;
        } else {
            int streak;
            {
                std::lock_guard lock(mutex_);
                DeviceDelivery& d = delivery_[device];
                d.failure_streak += 1;
                streak = d.failure_streak;
                stats_.retries += 1;
            }
            const std::int64_t delay = backoff_delay(streak);
            std::lock_guard lock(mutex_);
            delivery_[device].next_attempt_ms = util::now_ms() + delay;
        }
    }
    return sent_any;
}

}  // namespace gmei
