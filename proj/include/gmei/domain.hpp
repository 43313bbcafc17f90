#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gmei/decimal.hpp"

namespace gmei {

// Where a raw result entered the gateway.
enum class ResultSource { stream, file };

// A result exactly as the instrument reported it. `value` is kept
// byte-for-byte; no numeric coercion happens at this layer.
struct RawResult {
    std::string device_id;
    std::string sample_id;
    std::string machine_test_code;
    std::string value;
    std::optional<std::string> unit;
    std::optional<std::string> ref_range_raw;  // e.g. "70^110", instrument-formatted
    std::optional<std::string> abnormal_flag;
    std::optional<std::string> result_status;  // e.g. F=final, P=preliminary
    std::optional<std::string> observed_at;    // instrument clock, ISO-8601 once parsed
    std::optional<std::string> operator_id;
    ResultSource source = ResultSource::stream;
    std::vector<std::string> notes;  // comment records, parse notes
};

enum class AbnormalFlag { N, L, H, LL, HH, A };
enum class ResultStatus { final_, preliminary, corrected };

std::string to_string(AbnormalFlag f);
std::string to_string(ResultStatus s);
std::optional<AbnormalFlag> abnormal_flag_from_string(const std::string& s);
std::optional<ResultStatus> result_status_from_string(const std::string& s);

// Decimal-or-text union. Analyzers emit qualitative results ("POSITIVE")
// alongside numerics; forcing decimals would drop data.
struct ObservationValue {
    std::optional<Decimal> number;  // set when the value is numeric
    std::string text;               // always set; canonical rendering for numerics

    static ObservationValue from_raw(const std::string& raw);
    static ObservationValue from_decimal(const Decimal& d);
    bool is_numeric() const { return number.has_value(); }
    bool operator==(const ObservationValue& other) const { return text == other.text; }
};

// The normalized global record delivered to the HIS.
struct ObservationResult {
    std::string gateway_id;
    std::string device_id;
    std::string sample_id;
    std::string test_id;  // hospital-side canonical code
    std::string machine_test_code;
    ObservationValue value;
    std::optional<std::string> unit;  // canonical when a mapping provides one
    std::optional<Decimal> ref_low;
    std::optional<Decimal> ref_high;
    std::optional<AbnormalFlag> abnormal_flag;
    ResultStatus result_status = ResultStatus::final_;
    std::optional<std::string> observed_at;  // instrument clock, never corrected
    std::string received_at;                 // gateway clock, authoritative for ordering
    std::optional<std::string> operator_id;
    std::uint64_t sequence = 0;  // strictly increasing per (gateway_id, device_id)
    std::vector<std::string> notes;  // diagnostics only, never serialized to the wire
};

enum class OrderPriority { routine, stat };

std::string to_string(OrderPriority p);
std::optional<OrderPriority> priority_from_string(const std::string& s);

// Sample plus its ordered tests, brokered to bidirectional analyzers.
struct WorklistOrder {
    std::string sample_id;
    std::optional<std::string> patient_ref;
    std::vector<std::string> tests;  // non-empty, no duplicates
    OrderPriority priority = OrderPriority::routine;
};

struct Violation {
    std::string code;
    std::string message;
};

// Returns every invariant violation, not just the first. Violations are
// data, not failures.
std::vector<Violation> validate_observation(const ObservationResult& obs);
std::vector<Violation> validate_worklist_order(const WorklistOrder& order);

struct RefRange {
    std::optional<Decimal> low;
    std::optional<Decimal> high;
    std::optional<std::string> note;  // set when the raw text was not recognized
};

// Lenient by design: recognizes "L^H", "L-H" and "L to H"; anything else
// yields (none, none) plus a note. Never blocks result delivery.
RefRange parse_ref_range(const std::string& raw, const std::string& delimiter_hint);

// "YYYYMMDDHHMMSS" (seconds optional) -> "YYYY-MM-DDTHH:MM:SSZ".
// Unparseable input yields nullopt; callers leave observed_at unset.
std::optional<std::string> parse_instrument_timestamp(const std::string& raw);

// Current gateway clock as ISO-8601 UTC.
std::string now_utc_iso8601();

}  // namespace gmei
