#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gmei/domain.hpp"
#include "gmei/registry.hpp"
#include "gmei/result.hpp"

namespace gmei::sim {

// Timestamped bidirectional byte log. '>' analyzer-to-gateway, '<'
// gateway-to-analyzer, '#' note.
struct TranscriptEntry {
    std::int64_t t_ms = 0;
    char dir = '#';
    std::string bytes;
    std::string note;
};

struct Transcript {
    std::vector<TranscriptEntry> entries;

    void sent(const std::string& bytes);
    void received(const std::string& bytes);
    void note(const std::string& text);
    std::string render() const;  // line-delimited timestamped hex+ASCII
};

// Every valid final/intermediate frame the analyzer sent must be answered by
// exactly one ACK before the next frame goes out. Returns an empty string
// when the discipline holds.
std::string check_ack_discipline(const Transcript& transcript);

struct ScriptStep {
    enum class Kind { send_control, send_frame, send_raw, expect_control, expect_order, pause, fault };
    enum class Fault { drop_connection, corrupt_next_frame, delay, duplicate_next_send };

    Kind kind = Kind::send_control;
    char control = 0;          // send_control
    int frame_number = 1;      // send_frame
    std::string text;
    bool final_frame = true;
    std::string raw;           // send_raw: one protocol payload (message / frame)
    char expected = 0;         // expect_control
    int timeout_ms = 3000;
    std::string sample_id;     // expect_order; empty means expect the no-order reply
    std::vector<std::string> tests;  // expect_order: required test ids, in order
    int pause_ms = 0;          // pause
    Fault fault = Fault::drop_connection;
    int delay_ms = 0;          // fault(delay)

    static ScriptStep send_control_step(char byte);
    static ScriptStep send_frame_step(int number, std::string text, bool final_frame = true);
    static ScriptStep send_raw_step(std::string bytes);
    static ScriptStep expect_control_step(char byte, int timeout_ms = 3000);
    static ScriptStep expect_order_step(std::string sample_id, std::vector<std::string> tests = {},
                                        int timeout_ms = 5000);
    static ScriptStep pause_step(int ms);
    static ScriptStep fault_step(Fault fault, int delay_ms = 0);
};

// Scripts serialize as line-delimited JSON actions.
struct SimScript {
    std::vector<ScriptStep> steps;

    std::string to_jsonl() const;
    static Result<SimScript> from_jsonl(const std::string& text);
};

enum class AnalyzerKind { astm, hl7, generic };

struct AnalyzerOptions {
    std::uint64_t seed = 1;
    int connect_timeout_ms = 2000;
    int response_timeout_ms = 3000;
    int reconnect_backoff_ms = 100;
    std::int64_t deadline_ms = 0;  // absolute util::now_ms() deadline; 0 = none
    double corrupt_rate = 0;       // random per-frame corruption (NAK/resend path)
    double drop_rate = 0;          // random spontaneous disconnects
    std::optional<char> ack_byte;  // generic protocol confirmation byte
    bool resilient = true;         // reconnect and resend unconfirmed work
    int inter_send_pause_ms = 0;   // instrument pacing between deliveries
};

struct AnalyzerOutcome {
    bool ok = false;
    std::string error;  // expectation_failed / connect_failed details with byte diff
    Transcript transcript;
    int messages_delivered = 0;
    int reconnects = 0;
    int naks_seen = 0;
};

// Executes a script against a gateway endpoint, speaking the instrument side
// of the given protocol. Deterministic for a given seed and gateway behavior.
AnalyzerOutcome run_analyzer(AnalyzerKind kind, const std::string& host, int port,
                             const SimScript& script, const AnalyzerOptions& opts = {});

// Script builders for the common analyzer behaviors.
SimScript astm_upload_script(const std::vector<std::string>& messages);
SimScript hl7_upload_script(const std::vector<std::string>& messages);
SimScript generic_upload_script(const std::vector<std::string>& frames);

// ---------------------------------------------------------------------------
// Mock HIS with a verifiable ledger. Faults are applied after the ledger
// insert so delivered-then-lost-ack is exercised.
class HisStub {
public:
    struct FaultProfile {
        double drop_rate = 0;           // ack dropped after the ledger applied
        double duplicate_ack_rate = 0;  // envelope re-applied after responding
        int delay_ms = 0;
        std::uint64_t seed = 1;
    };

    struct LedgerEntry {
        std::string gateway_id;
        std::string device_id;
        std::uint64_t sequence = 0;
        nlohmann::json observation;
    };

    HisStub(std::string host, int port);
    HisStub(std::string host, int port, FaultProfile faults);
    ~HisStub();

    Status start();
    void stop();
    int port() const;

    void seed_worklist(const WorklistOrder& order);

    std::size_t ledger_size() const;
    std::uint64_t duplicates() const;
    std::uint64_t requests_seen() const;
    std::vector<std::string> ledger_devices() const;
    std::vector<LedgerEntry> ledger_for(const std::string& device_id) const;  // arrival order

    // Test hook: answer this device's envelopes with 400 (poison path).
    void reject_device(const std::string& device_id);

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

// ---------------------------------------------------------------------------
// Fleet topology: m facilities x n devices with mixed protocols.
struct FleetTopology {
    int facilities = 3;
    int devices_per_facility = 4;
    int total_results = 4000;
    std::uint64_t seed = 42;
    std::string host = "127.0.0.1";
    int device_timeout_ms = 5000;  // comm timeout written into profiles
    // 0: endpoints get free ports from the kernel (non-deterministic).
    // Nonzero: sequential ports from here, fully deterministic fixtures.
    int base_port = 0;
};

struct ExpectedObservation {
    std::string sample_id;
    std::string test_id;
    std::string machine_test_code;
    std::string value_text;  // canonical decimal text, or raw text for qualitative values
    std::optional<std::string> unit;
    std::optional<std::string> ref_low;
    std::optional<std::string> ref_high;
    std::optional<std::string> flag;
    std::string status = "final";
};

struct FleetDevice {
    DeviceProfile profile;
    std::vector<TestParameterMapping> mappings;
    AnalyzerKind kind = AnalyzerKind::astm;
    bool file_device = false;
    std::vector<std::string> payloads;  // protocol messages / frames, in order
    std::string file_content;           // file devices
    SimScript script;                   // stream devices
    std::vector<ExpectedObservation> expected;  // the directly-constructed ledger oracle
};

struct FleetPlan {
    FleetTopology topology;
    std::vector<FleetDevice> devices;
    std::vector<UserRecord> users;
    int total_results = 0;
};

// Deterministic from the topology seed. Endpoints get currently-free ports.
FleetPlan generate_fleet(const FleetTopology& topology);

Status write_fleet_registry(const FleetPlan& plan, const std::string& registry_dir);

// Multiset/order comparison of the stub ledger against the plan's expected
// ledger. Empty string = exact match.
std::string compare_ledger(const FleetPlan& plan, const HisStub& stub);

// Uploads a file device's content through the gateway control endpoint,
// retrying across gateway restarts. Duplicate responses count as success.
Status ingest_via_control(const std::string& control_host, int control_port,
                          const std::string& device_id, const std::string& operator_id,
                          const std::string& content, std::int64_t deadline_ms);

}  // namespace gmei::sim
