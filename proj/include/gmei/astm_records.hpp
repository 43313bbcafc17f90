#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gmei/domain.hpp"
#include "gmei/result.hpp"

namespace gmei::astm {

// Delimiter set, read from each message's header record.
struct Delimiters {
    char field = '|';
    char repeat = '\\';
    char component = '^';
    char escape = '&';

    bool valid() const;
    bool operator==(const Delimiters&) const = default;
};

enum class RecordType { header, patient, order, result, query, comment, terminator };

char record_type_char(RecordType t);

// Field content is structured: repeats, then components, each component an
// unescaped string. Unknown trailing fields are preserved and re-emitted.
struct AstmField {
    std::vector<std::vector<std::string>> repeats;

    static AstmField from_text(std::string text);
    // First repeat, first component; empty when absent.
    const std::string& text() const;
    // 1-based component of the first repeat; empty when absent.
    const std::string& component(std::size_t index) const;
    // First repeat with its components rejoined, for fields whose separator
    // is data rather than structure (e.g. "70^110" reference ranges).
    std::string joined(char component_separator) const;
    bool empty() const;
    bool operator==(const AstmField&) const = default;
};

struct AstmRecord {
    RecordType type = RecordType::header;
    // fields[0] is the record-type field; for headers fields[1] holds the raw
    // delimiter block and is never escape-processed.
    std::vector<AstmField> fields;

    // 1-based, counting the record-type field as field 1.
    const AstmField& field(std::size_t index) const;
    void set_field(std::size_t index, AstmField value);
    long sequence() const;  // field 2 as integer, -1 when not numeric

    bool operator==(const AstmRecord&) const = default;
};

struct AstmMessage {
    Delimiters delimiters;
    std::vector<AstmRecord> records;

    bool is_query() const;
    bool operator==(const AstmMessage&) const = default;
};

// Field positions for the O and R records, 1-based with the record-type
// field counted as field 1. Table-driven so a device profile can override
// them (CLASS A / CLASS B style variants).
struct AstmFieldMap {
    int order_sample_id = 3;
    int order_tests = 5;
    int order_priority = 6;
    int result_test_code = 3;
    int result_test_code_component = 4;  // "^^^GLU" keeps the code in component 4
    int result_value = 4;
    int result_unit = 5;
    int result_ref_range = 6;
    int result_flag = 7;
    int result_status = 9;
    int result_operator = 11;
    int result_completed_at = 13;
    int header_sender = 5;
    int header_processing_id = 11;
    int patient_id = 3;
    int query_sample_id = 3;
    int query_sample_component = 2;  // "^SAMP001" carries the id in component 2
    int query_scope = 5;
    int comment_text = 4;
};

// One CR-terminated record with the CR stripped.
// Errors: unknown_record_type, malformed.
Result<AstmRecord> parse_record(const std::string& line, const Delimiters& d);

// Transport-delivered message text (CR-separated records). Delimiters come
// from the header itself. Errors: missing_header, missing_terminator,
// hierarchy_violation, plus per-record errors carrying the record index.
Result<AstmMessage> parse_message(const std::string& text);

// Inverse of parse_message; escape sequences are applied to content that
// contains delimiter characters. Errors: hierarchy_violation.
Result<std::string> serialize_message(const AstmMessage& msg);

std::string serialize_record(const AstmRecord& record, const Delimiters& d);

// One RawResult per R record; sample_id inherited from the enclosing Order;
// comment records attach to the preceding result's notes. Query messages
// yield an empty list. Errors: orphan_result.
Result<std::vector<RawResult>> extract_results(const AstmMessage& msg, const std::string& device_id,
                                               const AstmFieldMap& map = {});

// Queries found in a message (H Q L); empty for result messages.
std::vector<std::string> extract_query_sample_ids(const AstmMessage& msg, const AstmFieldMap& map = {});

// H, P, O, L with the order's tests as repeated component-coded test ids.
AstmMessage build_order_message(const WorklistOrder& order, const Delimiters& d = {},
                                const AstmFieldMap& map = {});

// H, L: the explicit "no orders for this sample" reply.
AstmMessage build_no_order_message(const Delimiters& d = {});

// Construction helpers used by the simulator and tests.
struct ResultSpec {
    std::string test_code;
    std::string value;
    std::string unit;
    std::string ref_range;
    std::string flag;
    std::string status = "F";
    std::string operator_id;
    std::string completed_at;
};

AstmMessage build_result_message(const std::string& sender, const std::string& sample_id,
                                 const std::vector<ResultSpec>& results, const Delimiters& d = {},
                                 const AstmFieldMap& map = {});

AstmMessage build_query_message(const std::string& sample_id, const Delimiters& d = {},
                                const AstmFieldMap& map = {});

}  // namespace gmei::astm
