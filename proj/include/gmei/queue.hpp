#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "gmei/result.hpp"
#include "gmei/wire.hpp"

namespace gmei {

// Durable store-and-forward queue. Observations are appended to a
// checksummed log before any protocol acknowledgement goes back to the
// instrument; delivery state (acks, parks) is appended behind them. A torn
// tail record is truncated on recovery and was necessarily unacknowledged.
class ObservationQueue {
public:
    struct Config {
        std::string path;
        std::string gateway_id = "GW1";
        std::size_t batch_max = 100;           // observations per envelope
        int flush_idle_ms = 2000;              // envelope flush on enqueue idleness
        std::size_t dedup_window = 4096;       // content hashes kept per device
        std::size_t compact_min_bytes = 8 * 1024 * 1024;
        bool fsync_writes = true;
    };

    struct AppendOutcome {
        bool duplicate = false;  // content_hash already recorded; nothing appended
        std::uint64_t first_sequence = 0;
        std::uint64_t last_sequence = 0;
    };

    struct Receipt {
        std::string device_id;
        std::uint64_t sequence = 0;
    };

    struct ParkedEnvelope {
        std::string device_id;
        std::string reason;
        std::vector<ObservationResult> observations;
    };

    explicit ObservationQueue(Config config);

    // Recovery: replays the log, truncates a torn tail, compacts.
    Status open();

    // Atomically and durably appends one delivery batch, assigning contiguous
    // sequences. content_hash identifies the instrument delivery so that a
    // resend after a crash is recorded exactly once; an empty observation
    // list still records the hash.
    Result<AppendOutcome> append_batch(const std::string& device_id, const std::string& content_hash,
                                       std::vector<ObservationResult> observations);

    // Single-observation convenience; durable before the receipt returns.
    Result<Receipt> enqueue(const ObservationResult& obs);

    bool seen_hash(const std::string& device_id, const std::string& content_hash) const;

    // Oldest pending observations for one device, if batching rules say it is
    // time to send (batch full, enqueue-idle, or flush). Does not remove
    // them; call mark_acked / park after the HIS answers.
    std::optional<UploadEnvelope> next_envelope(const std::string& device_id, std::int64_t now_ms,
                                                bool flush);

    Status mark_acked(const UploadEnvelope& envelope);
    Status park(const UploadEnvelope& envelope, const std::string& reason);

    std::vector<std::string> device_ids() const;
    std::size_t pending_count(const std::string& device_id) const;
    std::size_t pending_total() const;
    std::size_t parked_count() const;
    std::vector<ParkedEnvelope> parked() const;
    std::uint64_t next_sequence(const std::string& device_id) const;

    Status compact();

private:
    struct DeviceState {
        std::deque<ObservationResult> pending;
        std::uint64_t next_seq = 1;
        std::deque<std::string> hash_order;
        std::set<std::string> hashes;
        std::int64_t last_enqueue_ms = 0;
    };

    Status append_record_locked(const nlohmann::json& payload, bool fsync);
    Status apply_record(const nlohmann::json& payload);
    Status compact_locked();
    void remember_hash(DeviceState& state, const std::string& hash);

    Config config_;
    mutable std::mutex mutex_;
    std::map<std::string, DeviceState> devices_;
    std::vector<ParkedEnvelope> parked_;
    std::uint64_t enqueue_counter_ = 0;
    std::size_t log_bytes_ = 0;
    bool open_ = false;
};

}  // namespace gmei
