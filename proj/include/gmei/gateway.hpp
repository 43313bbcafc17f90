#pragma once

#include <atomic>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "gmei/astm_transport.hpp"
#include "gmei/deadletter.hpp"
#include "gmei/net.hpp"
#include "gmei/queue.hpp"
#include "gmei/registry.hpp"
#include "gmei/uploader.hpp"

namespace gmei {

struct GatewayConfig {
    std::string gateway_id = "GW1";
    std::string registry_dir = "registry";
    std::string queue_path = "queue.log";
    std::string deadletter_path = "deadletters.jsonl";
    std::string audit_path;  // defaults to <registry_dir>/audit.log
    std::string his_base_url = "http://127.0.0.1:8600";
    std::string control_endpoint = "127.0.0.1:8601";
    int his_timeout_ms = 5000;
    int worklist_budget_ms = 5000;
    std::size_t batch_max = 100;
    int flush_idle_ms = 2000;
    int backoff_base_ms = 1000;
    int backoff_cap_ms = 60000;
    astm::TimerPolicy astm_timers{};

    static Result<GatewayConfig> from_json(const nlohmann::json& j);
    static Result<GatewayConfig> load_file(const std::string& path);
    nlohmann::json to_json() const;
};

// Pure normalization step: raw instrument fields plus the test-parameter
// mapping become one global-format observation. Numeric values are scaled by
// the conversion factor; non-numeric values pass through with a note.
ObservationResult normalize(const RawResult& raw, const TestMapping& mapping,
                            const std::string& gateway_id, std::uint64_t sequence,
                            const std::string& received_at, const std::string& ref_range_hint);

struct ProcessOutcome {
    int emitted = 0;
    int dead_lettered = 0;
    bool duplicate = false;                    // delivery already recorded, skipped
    std::vector<std::string> order_downloads;  // serialized ASTM replies to submit
};

// Counters surfaced by the status endpoint; monotone within a run.
struct DeviceCounters {
    std::atomic<std::uint64_t> frames_ok{0};
    std::atomic<std::uint64_t> frames_nak{0};
    std::atomic<std::uint64_t> results_emitted{0};
    std::atomic<std::uint64_t> dead_lettered{0};
    std::atomic<std::uint64_t> duplicates_skipped{0};
    std::atomic<std::uint64_t> queries_handled{0};
    std::atomic<std::uint64_t> his_unreachable{0};
};

// The running service: one listener per enabled device endpoint, per-device
// protocol sessions, normalization, worklist brokering, durable handoff to
// the uploader, and a local control endpoint.
class GatewayService {
public:
    explicit GatewayService(GatewayConfig config);
    ~GatewayService();

    Status start();
    void shutdown();
    bool running() const { return running_; }
    bool shutdown_requested() const;  // set via POST /shutdown
    int control_port() const { return control_port_; }

    nlohmann::json status_json() const;

    // Message entry point shared by sessions and direct tests: payload is a
    // complete transport-delivered message (ASTM text, HL7 message text, or
    // one generic frame).
    ProcessOutcome on_message(const std::string& device_id, const std::string& payload);

    // Bulk insertion; transactional per file. Errors: unknown_device,
    // unknown_operator, empty_file, no_file_format.
    Result<nlohmann::json> ingest_content(const std::string& device_id, const std::string& operator_id,
                                          const std::string& content);

    Registry& registry() { return registry_; }
    ObservationQueue& queue() { return queue_; }
    DeadLetterStore& deadletters() { return deadletters_; }
    Uploader& uploader() { return *uploader_; }

    void audit(const std::string& operator_id, const std::string& action, const std::string& detail);

private:
    struct DeviceRuntime {
        DeviceProfile profile;
        std::string listener_state;  // listening | bind_failed | file_only
        std::string listener_detail;
        std::atomic<bool> session_active{false};
        DeviceCounters counters;
        net::TcpListener listener;
        std::thread thread;
    };

    void listener_loop(DeviceRuntime& rt);
    void run_session(DeviceRuntime& rt, net::TcpStream conn);
    void astm_session(DeviceRuntime& rt, net::TcpStream& conn);
    void hl7_session(DeviceRuntime& rt, net::TcpStream& conn);
    void generic_session(DeviceRuntime& rt, net::TcpStream& conn);

    ProcessOutcome process_astm_text(const DeviceProfile& profile, const RegistrySnapshot& snap,
                                     DeviceCounters& counters, const std::string& text);
    ProcessOutcome process_hl7_text(const DeviceProfile& profile, const RegistrySnapshot& snap,
                                    DeviceCounters& counters, const std::string& text,
                                    std::string* ack_out);
    ProcessOutcome process_generic_frame(const DeviceProfile& profile, const RegistrySnapshot& snap,
                                         DeviceCounters& counters, const std::string& frame_bytes,
                                         bool* ok_out);
    // Shared mapping + normalization + durable enqueue step.
    ProcessOutcome commit_raw_results(const DeviceProfile& profile, const RegistrySnapshot& snap,
                                      DeviceCounters& counters, const std::string& content_hash,
                                      std::vector<RawResult> raws, const std::string& ref_range_hint);

    void start_control_endpoint();

    GatewayConfig config_;
    Registry registry_;
    ObservationQueue queue_;
    DeadLetterStore deadletters_;
    std::unique_ptr<Uploader> uploader_;

    std::vector<std::unique_ptr<DeviceRuntime>> runtimes_;
    std::atomic<bool> stop_{false};
    std::atomic<bool> running_{false};
    std::int64_t started_ms_ = 0;

    struct ControlServer;
    std::unique_ptr<ControlServer> control_;
    int control_port_ = 0;

    std::mutex audit_mutex_;
};

}  // namespace gmei
