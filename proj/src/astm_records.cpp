#include "gmei/astm_records.hpp"

#include <algorithm>
#include <cstdlib>

namespace gmei::astm {

namespace {

const std::string kEmpty;

bool known_record_char(char c) {
    return c == 'H' || c == 'P' || c == 'O' || c == 'R' || c == 'Q' || c == 'C' || c == 'L';
}

RecordType type_from_char(char c) {
    switch (c) {
        case 'H': return RecordType::header;
        case 'P': return RecordType::patient;
        case 'O': return RecordType::order;
        case 'R': return RecordType::result;
        case 'Q': return RecordType::query;
        case 'C': return RecordType::comment;
        default: return RecordType::terminator;
    }
}

bool known_escape_token(const std::string& token) {
    return token == "F" || token == "S" || token == "R" || token == "E";
}

// Splits on `sep`, treating escape-delimited runs as atomic so that
// pass-through escape tokens can contain structural characters.
std::vector<std::string> split_escaped(const std::string& text, char sep, char escape) {
    std::vector<std::string> parts(1);
    for (std::size_t i = 0; i < text.size();) {
        char c = text[i];
        if (c == escape) {
            std::size_t close = text.find(escape, i + 1);
            if (close != std::string::npos) {
                parts.back().append(text, i, close - i + 1);
                i = close + 1;
                continue;
            }
        }
        if (c == sep) {
            parts.emplace_back();
        } else {
            parts.back() += c;
        }
        ++i;
    }
    return parts;
}

std::string unescape(const std::string& text, const Delimiters& d) {
    std::string out;
    out.reserve(text.size());
    for (std::size_t i = 0; i < text.size();) {
        char c = text[i];
        if (c != d.escape) {
            out += c;
            ++i;
            continue;
        }
        std::size_t close = text.find(d.escape, i + 1);
        if (close == std::string::npos) {
            out.append(text, i, std::string::npos);
            break;
        }
        std::string token = text.substr(i + 1, close - i - 1);
        if (token == "F") out += d.field;
        else if (token == "S") out += d.component;
        else if (token == "R") out += d.repeat;
        else if (token == "E") out += d.escape;
        else out.append(text, i, close - i + 1);  // unknown escape passes through verbatim
        i = close + 1;
    }
    return out;
}

std::string escape(const std::string& text, const Delimiters& d) {
    std::string out;
    out.reserve(text.size());
    auto emit_escape = [&](char token) {
        out += d.escape;
        out += token;
        out += d.escape;
    };
    for (std::size_t i = 0; i < text.size();) {
        char c = text[i];
        if (c == d.escape) {
            // A well-formed unknown escape sequence is re-emitted verbatim.
            std::size_t close = text.find(d.escape, i + 1);
            if (close != std::string::npos) {
                std::string token = text.substr(i + 1, close - i - 1);
                if (!known_escape_token(token) &&
                    token.find(d.field) == std::string::npos && token.find(d.repeat) == std::string::npos &&
                    token.find(d.component) == std::string::npos) {
                    out.append(text, i, close - i + 1);
                    i = close + 1;
                    continue;
                }
            }
            emit_escape('E');
        } else if (c == d.field) {
            emit_escape('F');
        } else if (c == d.component) {
            emit_escape('S');
        } else if (c == d.repeat) {
            emit_escape('R');
        } else {
            out += c;
        }
        ++i;
    }
    return out;
}

AstmField parse_field(const std::string& raw, const Delimiters& d) {
    AstmField field;
    for (const auto& rep : split_escaped(raw, d.repeat, d.escape)) {
        std::vector<std::string> components;
        for (const auto& comp : split_escaped(rep, d.component, d.escape))
            components.push_back(unescape(comp, d));
        field.repeats.push_back(std::move(components));
    }
    return field;
}

std::string serialize_field(const AstmField& field, const Delimiters& d) {
    std::string out;
    for (std::size_t r = 0; r < field.repeats.size(); ++r) {
        if (r > 0) out += d.repeat;
        const auto& components = field.repeats[r];
        for (std::size_t c = 0; c < components.size(); ++c) {
            if (c > 0) out += d.component;
            out += escape(components[c], d);
        }
    }
    return out;
}

// Hierarchy checker shared by parse and serialize. Returns an error message
// or empty when the record stream satisfies H (P (O (R, C)*)*)* L / H Q+ L.
std::string check_hierarchy(const std::vector<AstmRecord>& records) {
    if (records.empty() || records.front().type != RecordType::header) return "message must begin with H";
    if (records.back().type != RecordType::terminator) return "message must end with L";
    bool saw_query = false, saw_patient = false;
    long patient_seq = 0, order_seq = 0, result_seq = 0, comment_seq = 0, query_seq = 0;
    bool in_order = false;
    for (std::size_t i = 1; i + 1 < records.size(); ++i) {
        const AstmRecord& rec = records[i];
        switch (rec.type) {
            case RecordType::patient:
                if (saw_query) return "P record in a query message";
                saw_patient = true;
                in_order = false;
                if (rec.sequence() != ++patient_seq)
                    return "P sequence expected " + std::to_string(patient_seq) + " at record " + std::to_string(i);
                order_seq = 0;
                break;
            case RecordType::order:
                if (!saw_patient) return "O record without enclosing P at record " + std::to_string(i);
                in_order = true;
                if (rec.sequence() != ++order_seq)
                    return "O sequence expected " + std::to_string(order_seq) + " at record " + std::to_string(i);
                result_seq = 0;
                comment_seq = 0;
                break;
            case RecordType::result:
                if (!in_order) return "R record without enclosing O at record " + std::to_string(i);
                if (rec.sequence() != ++result_seq)
                    return "R sequence expected " + std::to_string(result_seq) + " at record " + std::to_string(i);
                break;
            case RecordType::comment:
                if (!in_order) return "C record without enclosing O at record " + std::to_string(i);
                if (rec.sequence() != ++comment_seq)
                    return "C sequence expected " + std::to_string(comment_seq) + " at record " + std::to_string(i);
                break;
            case RecordType::query:
                if (saw_patient) return "Q record mixed with patient records";
                saw_query = true;
                if (rec.sequence() != ++query_seq)
                    return "Q sequence expected " + std::to_string(query_seq) + " at record " + std::to_string(i);
                break;
            case RecordType::header:
                return "duplicate H record at record " + std::to_string(i);
            case RecordType::terminator:
                return "L record before end of message at record " + std::to_string(i);
        }
    }
    return {};
}

AstmRecord make_record(RecordType type, std::vector<std::pair<int, AstmField>> fields) {
    AstmRecord rec;
    rec.type = type;
    rec.fields.push_back(AstmField::from_text(std::string(1, record_type_char(type))));
    for (auto& [index, value] : fields) rec.set_field(index, std::move(value));
    return rec;
}

AstmRecord make_header(const Delimiters& d, const std::string& sender, const AstmFieldMap& map) {
    AstmRecord rec;
    rec.type = RecordType::header;
    rec.fields.push_back(AstmField::from_text("H"));
    std::string block;
    block += d.repeat;
    block += d.component;
    block += d.escape;
    rec.fields.push_back(AstmField::from_text(block));
    rec.set_field(map.header_sender, AstmField::from_text(sender));
    rec.set_field(map.header_processing_id, AstmField::from_text("P"));
    return rec;
}

AstmRecord make_terminator() {
    AstmRecord rec;
    rec.type = RecordType::terminator;
    rec.fields.push_back(AstmField::from_text("L"));
    rec.set_field(2, AstmField::from_text("1"));
    rec.set_field(3, AstmField::from_text("N"));
    return rec;
}

}  // namespace

bool Delimiters::valid() const {
    return field != repeat && field != component && field != escape && repeat != component &&
           repeat != escape && component != escape;
}

char record_type_char(RecordType t) {
    switch (t) {
        case RecordType::header: return 'H';
        case RecordType::patient: return 'P';
        case RecordType::order: return 'O';
        case RecordType::result: return 'R';
        case RecordType::query: return 'Q';
        case RecordType::comment: return 'C';
        case RecordType::terminator: return 'L';
    }
    return '?';
}

AstmField AstmField::from_text(std::string text) {
    AstmField f;
    f.repeats.push_back({std::move(text)});
    return f;
}

const std::string& AstmField::text() const {
    if (repeats.empty() || repeats.front().empty()) return kEmpty;
    return repeats.front().front();
}

const std::string& AstmField::component(std::size_t index) const {
    if (repeats.empty() || index == 0 || index > repeats.front().size()) return kEmpty;
    return repeats.front()[index - 1];
}

std::string AstmField::joined(char component_separator) const {
    if (repeats.empty()) return {};
    std::string out;
    for (std::size_t i = 0; i < repeats.front().size(); ++i) {
        if (i > 0) out += component_separator;
        out += repeats.front()[i];
    }
    return out;
}

bool AstmField::empty() const {
    for (const auto& rep : repeats)
        for (const auto& comp : rep)
            if (!comp.empty()) return false;
    return true;
}

const AstmField& AstmRecord::field(std::size_t index) const {
    static const AstmField empty_field{{{""}}};
    if (index == 0 || index > fields.size()) return empty_field;
    return fields[index - 1];
}

void AstmRecord::set_field(std::size_t index, AstmField value) {
    if (index == 0) return;
    if (fields.size() < index) fields.resize(index, AstmField{{{""}}});
    fields[index - 1] = std::move(value);
}

long AstmRecord::sequence() const {
    const std::string& s = field(2).text();
    if (s.empty() || !std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); }))
        return -1;
    return std::strtol(s.c_str(), nullptr, 10);
}

bool AstmMessage::is_query() const {
    return std::any_of(records.begin(), records.end(),
                       [](const AstmRecord& r) { return r.type == RecordType::query; });
}

Result<AstmRecord> parse_record(const std::string& line, const Delimiters& d) {
    if (line.empty()) return Result<AstmRecord>::failure("malformed", "empty record");
    char type_char = line[0];
    if (!known_record_char(type_char))
        return Result<AstmRecord>::failure("unknown_record_type", std::string("record type '") + type_char + "'");

    AstmRecord rec;
    rec.type = type_from_char(type_char);

    if (rec.type == RecordType::header) {
        // H <field-sep> <repeat><component><escape> [<field-sep> fields...]
        if (line.size() < 2 || line[1] != d.field)
            return Result<AstmRecord>::failure("malformed", "header lacks delimiter definition");
        std::size_t block_end = line.find(d.field, 2);
        std::string block = line.substr(2, block_end == std::string::npos ? std::string::npos : block_end - 2);
        rec.fields.push_back(AstmField::from_text("H"));
        rec.fields.push_back(AstmField::from_text(block));
        if (block_end != std::string::npos) {
            for (const auto& part : split_escaped(line.substr(block_end + 1), d.field, d.escape))
                rec.fields.push_back(parse_field(part, d));
        }
        return rec;
    }

    auto parts = split_escaped(line, d.field, d.escape);
    if (parts.size() < 2)
        return Result<AstmRecord>::failure("malformed", "record has fewer than 2 fields");
    if (parts[0].size() != 1)
        return Result<AstmRecord>::failure("unknown_record_type", "record type field is '" + parts[0] + "'");
    for (const auto& part : parts) rec.fields.push_back(parse_field(part, d));
    return rec;
}

Result<AstmMessage> parse_message(const std::string& text) {
    std::vector<std::string> lines;
    std::string current;
    for (char c : text) {
        if (c == '\r') {
            lines.push_back(current);
            current.clear();
        } else {
            current += c;
        }
    }
    if (!current.empty()) lines.push_back(current);
    while (!lines.empty() && lines.back().empty()) lines.pop_back();

    if (lines.empty() || lines.front().empty() || lines.front()[0] != 'H')
        return Result<AstmMessage>::failure("missing_header", "message does not begin with an H record");

    const std::string& header = lines.front();
    AstmMessage msg;
    if (header.size() >= 5) {
        msg.delimiters.field = header[1];
        msg.delimiters.repeat = header[2];
        msg.delimiters.component = header[3];
        msg.delimiters.escape = header[4];
    }
    if (!msg.delimiters.valid())
        return Result<AstmMessage>::failure("malformed", "header delimiters not distinct (record 0)");

    for (std::size_t i = 0; i < lines.size(); ++i) {
        auto rec = parse_record(lines[i], msg.delimiters);
        if (!rec.ok())
            return Result<AstmMessage>::failure(rec.error().code,
                                                rec.error().detail + " (record " + std::to_string(i) + ")");
        msg.records.push_back(std::move(rec.value()));
    }

    if (msg.records.back().type != RecordType::terminator)
        return Result<AstmMessage>::failure("missing_terminator", "message does not end with an L record");
    if (auto err = check_hierarchy(msg.records); !err.empty())
        return Result<AstmMessage>::failure("hierarchy_violation", err);
    return msg;
}

std::string serialize_record(const AstmRecord& record, const Delimiters& d) {
    std::string out(1, record_type_char(record.type));
    if (record.type == RecordType::header) {
        out += d.field;
        out += record.field(2).text();  // raw delimiter block
        for (std::size_t i = 2; i < record.fields.size(); ++i) {
            out += d.field;
            out += serialize_field(record.fields[i], d);
        }
        return out;
    }
    for (std::size_t i = 1; i < record.fields.size(); ++i) {
        out += d.field;
        out += serialize_field(record.fields[i], d);
    }
    return out;
}

Result<std::string> serialize_message(const AstmMessage& msg) {
    if (auto err = check_hierarchy(msg.records); !err.empty())
        return Result<std::string>::failure("hierarchy_violation", err);
    std::string out;
    for (const auto& rec : msg.records) {
        out += serialize_record(rec, msg.delimiters);
        out += '\r';
    }
    return out;
}

Result<std::vector<RawResult>> extract_results(const AstmMessage& msg, const std::string& device_id,
                                               const AstmFieldMap& map) {
    std::vector<RawResult> results;
    std::optional<std::string> current_sample;
    bool after_result = false;
    for (const auto& rec : msg.records) {
        switch (rec.type) {
            case RecordType::order:
                current_sample = rec.field(map.order_sample_id).text();
                after_result = false;
                break;
            case RecordType::result: {
                if (!current_sample)
                    return Result<std::vector<RawResult>>::failure("orphan_result",
                                                                   "R record with no enclosing O record");
                RawResult raw;
                raw.device_id = device_id;
                raw.sample_id = *current_sample;
                raw.machine_test_code =
                    rec.field(map.result_test_code).component(map.result_test_code_component);
                if (raw.machine_test_code.empty()) raw.machine_test_code = rec.field(map.result_test_code).text();
                raw.value = rec.field(map.result_value).text();
                if (const auto& u = rec.field(map.result_unit).text(); !u.empty()) raw.unit = u;
                if (auto rr = rec.field(map.result_ref_range).joined(msg.delimiters.component);
                    !rr.empty())
                    raw.ref_range_raw = rr;
                if (const auto& f = rec.field(map.result_flag).text(); !f.empty()) raw.abnormal_flag = f;
                if (const auto& st = rec.field(map.result_status).text(); !st.empty()) raw.result_status = st;
                if (const auto& op = rec.field(map.result_operator).text(); !op.empty()) raw.operator_id = op;
                if (const auto& ts = rec.field(map.result_completed_at).text(); !ts.empty())
                    raw.observed_at = parse_instrument_timestamp(ts);
                raw.source = ResultSource::stream;
                results.push_back(std::move(raw));
                after_result = true;
                break;
            }
            case RecordType::comment:
                if (after_result && !results.empty())
                    results.back().notes.push_back(rec.field(map.comment_text).text());
                break;
            default:
                after_result = false;
                break;
        }
    }
    return results;
}

std::vector<std::string> extract_query_sample_ids(const AstmMessage& msg, const AstmFieldMap& map) {
    std::vector<std::string> ids;
    for (const auto& rec : msg.records) {
        if (rec.type != RecordType::query) continue;
        std::string id = rec.field(map.query_sample_id).component(map.query_sample_component);
        if (id.empty()) id = rec.field(map.query_sample_id).text();
        if (!id.empty()) ids.push_back(id);
    }
    return ids;
}

AstmMessage build_order_message(const WorklistOrder& order, const Delimiters& d, const AstmFieldMap& map) {
    AstmMessage msg;
    msg.delimiters = d;
    msg.records.push_back(make_header(d, "GMEI", map));

    msg.records.push_back(make_record(RecordType::patient, {{2, AstmField::from_text("1")}}));

    AstmField tests;
    for (const auto& test : order.tests) {
        std::vector<std::string> components(static_cast<std::size_t>(map.result_test_code_component), "");
        components[map.result_test_code_component - 1] = test;
        tests.repeats.push_back(std::move(components));
    }
    AstmRecord order_rec = make_record(
        RecordType::order, {{2, AstmField::from_text("1")},
                            {map.order_sample_id, AstmField::from_text(order.sample_id)},
                            {map.order_priority, AstmField::from_text(order.priority == OrderPriority::stat ? "S" : "R")}});
    order_rec.set_field(map.order_tests, std::move(tests));
    msg.records.push_back(std::move(order_rec));

    msg.records.push_back(make_terminator());
    return msg;
}

AstmMessage build_no_order_message(const Delimiters& d) {
    AstmMessage msg;
    msg.delimiters = d;
    msg.records.push_back(make_header(d, "GMEI", AstmFieldMap{}));
    msg.records.push_back(make_terminator());
    return msg;
}

AstmMessage build_result_message(const std::string& sender, const std::string& sample_id,
                                 const std::vector<ResultSpec>& results, const Delimiters& d,
                                 const AstmFieldMap& map) {
    AstmMessage msg;
    msg.delimiters = d;
    msg.records.push_back(make_header(d, sender, map));
    msg.records.push_back(make_record(RecordType::patient, {{2, AstmField::from_text("1")}}));
    msg.records.push_back(make_record(RecordType::order,
                                      {{2, AstmField::from_text("1")},
                                       {map.order_sample_id, AstmField::from_text(sample_id)},
                                       {map.order_priority, AstmField::from_text("R")}}));
    int seq = 0;
    for (const auto& spec : results) {
        std::vector<std::string> code_components(static_cast<std::size_t>(map.result_test_code_component), "");
        code_components[map.result_test_code_component - 1] = spec.test_code;
        AstmField code;
        code.repeats.push_back(std::move(code_components));

        AstmRecord rec = make_record(RecordType::result, {{2, AstmField::from_text(std::to_string(++seq))}});
        rec.set_field(map.result_test_code, std::move(code));
        rec.set_field(map.result_value, AstmField::from_text(spec.value));
        if (!spec.unit.empty()) rec.set_field(map.result_unit, AstmField::from_text(spec.unit));
        if (!spec.ref_range.empty()) {
            // "70^110" goes on the wire component-structured, as instruments send it.
            AstmField range;
            std::vector<std::string> components(1);
            for (char c : spec.ref_range) {
                if (c == '^') components.emplace_back();
                else components.back() += c;
            }
            range.repeats.push_back(std::move(components));
            rec.set_field(map.result_ref_range, std::move(range));
        }
        if (!spec.flag.empty()) rec.set_field(map.result_flag, AstmField::from_text(spec.flag));
        if (!spec.status.empty()) rec.set_field(map.result_status, AstmField::from_text(spec.status));
        if (!spec.operator_id.empty()) rec.set_field(map.result_operator, AstmField::from_text(spec.operator_id));
        if (!spec.completed_at.empty())
            rec.set_field(map.result_completed_at, AstmField::from_text(spec.completed_at));
        msg.records.push_back(std::move(rec));
    }
    msg.records.push_back(make_terminator());
    return msg;
}

AstmMessage build_query_message(const std::string& sample_id, const Delimiters& d, const AstmFieldMap& map) {
    AstmMessage msg;
    msg.delimiters = d;
    msg.records.push_back(make_header(d, "ANALYZER", map));
    std::vector<std::string> components(static_cast<std::size_t>(map.query_sample_component), "");
    components[map.query_sample_component - 1] = sample_id;
    AstmField sample;
    sample.repeats.push_back(std::move(components));
    AstmRecord q = make_record(RecordType::query, {{2, AstmField::from_text("1")}});
    q.set_field(map.query_sample_id, std::move(sample));
    q.set_field(map.query_scope, AstmField::from_text("ALL"));
    msg.records.push_back(std::move(q));
    msg.records.push_back(make_terminator());
    return msg;
}

}  // namespace gmei::astm
