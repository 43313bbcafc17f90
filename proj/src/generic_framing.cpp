#include "gmei/generic_framing.hpp"

#include <algorithm>

namespace gmei::gen {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(' ');
    if (a == std::string::npos) return {};
    std::size_t b = s.find_last_not_of(' ');
    return s.substr(a, b - a + 1);
}

Status check_field_order(const std::vector<FieldRole>& order) {
    auto has = [&](FieldRole r) { return std::find(order.begin(), order.end(), r) != order.end(); };
    if (!has(FieldRole::sample_id)) return fail("invalid_descriptor", "field_order lacks sample_id");
    if (!has(FieldRole::test_code)) return fail("invalid_descriptor", "field_order lacks test_code");
    if (!has(FieldRole::value)) return fail("invalid_descriptor", "field_order lacks value");
    return ok_status();
}

// Cuts a payload into positional fields, by separator or fixed widths.
std::vector<std::string> cut_fields(const std::string& payload, char separator,
                                    const std::vector<int>& widths) {
    std::vector<std::string> fields;
    if (widths.empty()) {
        fields.emplace_back();
        for (char c : payload) {
            if (c == separator) fields.emplace_back();
            else fields.back() += c;
        }
        return fields;
    }
    std::size_t offset = 0;
    for (int w : widths) {
        if (offset >= payload.size()) break;
        fields.push_back(trim(payload.substr(offset, static_cast<std::size_t>(w))));
        offset += static_cast<std::size_t>(w);
    }
    return fields;
}

// Binds positional fields to a RawResult per the role list. Returns the
// missing required role name on failure.
Result<RawResult> bind_fields(const std::vector<std::string>& fields, const std::vector<FieldRole>& order,
                              const std::string& device_id) {
    RawResult raw;
    raw.device_id = device_id;
    for (std::size_t i = 0; i < order.size() && i < fields.size(); ++i) {
        const std::string& v = fields[i];
        switch (order[i]) {
            case FieldRole::sample_id: raw.sample_id = v; break;
            case FieldRole::test_code: raw.machine_test_code = v; break;
            case FieldRole::value: raw.value = v; break;
            case FieldRole::unit: if (!v.empty()) raw.unit = v; break;
            case FieldRole::ref_range: if (!v.empty()) raw.ref_range_raw = v; break;
            case FieldRole::flag: if (!v.empty()) raw.abnormal_flag = v; break;
            case FieldRole::status: if (!v.empty()) raw.result_status = v; break;
            case FieldRole::timestamp:
                if (!v.empty()) raw.observed_at = parse_instrument_timestamp(v);
                break;
            case FieldRole::ignore: break;
        }
    }
    if (raw.sample_id.empty())
        return Result<RawResult>::failure("missing_required_field", "sample_id");
    if (raw.machine_test_code.empty())
        return Result<RawResult>::failure("missing_required_field", "test_code");
    if (raw.value.empty())
        return Result<RawResult>::failure("missing_required_field", "value");
    return raw;
}

}  // namespace

std::string to_string(FieldRole role) {
    switch (role) {
        case FieldRole::sample_id: return "sample_id";
        case FieldRole::test_code: return "test_code";
        case FieldRole::value: return "value";
        case FieldRole::unit: return "unit";
        case FieldRole::ref_range: return "ref_range";
        case FieldRole::flag: return "flag";
        case FieldRole::status: return "status";
        case FieldRole::timestamp: return "timestamp";
        case FieldRole::ignore: return "ignore";
    }
    return "ignore";
}

std::optional<FieldRole> field_role_from_string(const std::string& s) {
    if (s == "sample_id") return FieldRole::sample_id;
    if (s == "test_code") return FieldRole::test_code;
    if (s == "value") return FieldRole::value;
    if (s == "unit") return FieldRole::unit;
    if (s == "ref_range") return FieldRole::ref_range;
    if (s == "flag") return FieldRole::flag;
    if (s == "status") return FieldRole::status;
    if (s == "timestamp") return FieldRole::timestamp;
    if (s == "ignore") return FieldRole::ignore;
    return std::nullopt;
}

std::string to_string(BccKind kind) {
    return kind == BccKind::xor_ ? "xor" : "sum_mod_256";
}

std::optional<BccKind> bcc_kind_from_string(const std::string& s) {
    if (s == "xor") return BccKind::xor_;
    if (s == "sum_mod_256") return BccKind::sum_mod_256;
    return std::nullopt;
}

Status FrameDescriptor::validate() const {
    if (start_byte == end_byte) return fail("invalid_descriptor", "start_byte equals end_byte");
    return check_field_order(field_order);
}

Status FileDescriptor::validate() const {
    if (header_lines_to_skip < 0) return fail("invalid_descriptor", "negative header_lines_to_skip");
    return check_field_order(field_order);
}

unsigned char bcc(const std::string& payload, BccKind kind) {
    unsigned acc = 0;
    for (unsigned char c : payload) {
        if (kind == BccKind::xor_) acc ^= c;
        else acc = (acc + c) & 0xFF;
    }
    return static_cast<unsigned char>(acc);
}

Result<std::vector<RawResult>> decode_generic(const std::string& bytes, const FrameDescriptor& desc,
                                              const std::string& device_id) {
    using R = Result<std::vector<RawResult>>;
    std::vector<RawResult> results;
    std::size_t i = 0;
    bool saw_frame = false;
    while (i < bytes.size()) {
        char c = bytes[i];
        if (c == '\r' || c == '\n' || c == ' ') {
            ++i;
            continue;
        }
        if (c != desc.start_byte)
            return R::failure("bad_envelope", "unexpected byte outside frame at offset " + std::to_string(i));
        std::size_t end = bytes.find(desc.end_byte, i + 1);
        if (end == std::string::npos) return R::failure("bad_envelope", "unterminated frame");
        std::string payload = bytes.substr(i + 1, end - i - 1);
        i = end + 1;
        if (desc.has_bcc) {
            if (i >= bytes.size()) return R::failure("bad_envelope", "missing BCC byte");
            unsigned char expected = bcc(payload, desc.bcc_kind);
            unsigned char got = static_cast<unsigned char>(bytes[i]);
            ++i;
            if (expected != got) return R::failure("bcc_mismatch", "BCC check failed");
        }
        auto bound = bind_fields(cut_fields(payload, desc.field_separator, desc.field_widths),
                                 desc.field_order, device_id);
        if (!bound.ok()) return R::failure(bound.error().code, bound.error().detail);
        bound.value().source = ResultSource::stream;
        results.push_back(std::move(bound.value()));
        saw_frame = true;
    }
    if (!saw_frame) return R::failure("bad_envelope", "no frame found");
    return results;
}

std::string encode_generic(const std::map<FieldRole, std::string>& values, const FrameDescriptor& desc) {
    std::string payload;
    for (std::size_t i = 0; i < desc.field_order.size(); ++i) {
        std::string v;
        if (auto it = values.find(desc.field_order[i]); it != values.end()) v = it->second;
        if (desc.field_widths.empty()) {
            if (i > 0) payload += desc.field_separator;
            payload += v;
        } else {
            std::size_t w = i < desc.field_widths.size() ? static_cast<std::size_t>(desc.field_widths[i]) : v.size();
            if (v.size() < w) v.append(w - v.size(), ' ');
            payload += v.substr(0, w);
        }
    }
    std::string out;
    out += desc.start_byte;
    out += payload;
    out += desc.end_byte;
    if (desc.has_bcc) out += static_cast<char>(bcc(payload, desc.bcc_kind));
    return out;
}

Result<IngestOutcome> ingest_file(const std::string& content, const FileDescriptor& desc,
                                  const std::string& device_id, const std::string& operator_id) {
    if (content.empty()) return Result<IngestOutcome>::failure("empty_file", "file has no content");

    std::vector<std::string> lines;
    std::string current;
    for (char c : content) {
        if (c == desc.line_separator) {
            lines.push_back(current);
            current.clear();
        } else {
            current += c;
        }
    }
    if (!current.empty()) lines.push_back(current);

    IngestOutcome outcome;
    for (std::size_t idx = 0; idx < lines.size(); ++idx) {
        if (static_cast<int>(idx) < desc.header_lines_to_skip) continue;
        std::string line = lines[idx];
        if (!line.empty() && line.back() == '\r') line.pop_back();  // CRLF files
        if (line.empty()) continue;
        auto bound = bind_fields(cut_fields(line, desc.column_separator, desc.column_widths),
                                 desc.field_order, device_id);
        if (!bound.ok()) {
            outcome.rejected.push_back({static_cast<int>(idx) + 1, bound.error().to_string()});
            continue;
        }
        bound.value().source = ResultSource::file;
        bound.value().operator_id = operator_id;
        outcome.results.push_back(std::move(bound.value()));
    }
    return outcome;
}

}  // namespace gmei::gen
