#include "gmei/hl7.hpp"

#include <algorithm>

namespace gmei::hl7 {

namespace {

const std::string kEmpty;

struct Separators {
    char field = '|';
    char component = '^';
    char repeat = '~';
    char escape = '\\';
};

Separators separators_of(char field_sep, const std::string& encoding) {
    Separators s;
    s.field = field_sep;
    if (encoding.size() >= 1) s.component = encoding[0];
    if (encoding.size() >= 2) s.repeat = encoding[1];
    if (encoding.size() >= 3) s.escape = encoding[2];
    return s;
}

bool known_escape_token(const std::string& token) {
    return token == "F" || token == "S" || token == "R" || token == "E";
}

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

std::string unescape(const std::string& text, const Separators& s) {
    std::string out;
    out.reserve(text.size());
    for (std::size_t i = 0; i < text.size();) {
        char c = text[i];
        if (c != s.escape) {
            out += c;
            ++i;
            continue;
        }
        std::size_t close = text.find(s.escape, i + 1);
        if (close == std::string::npos) {
            out.append(text, i, std::string::npos);
            break;
        }
        std::string token = text.substr(i + 1, close - i - 1);
        if (token == "F") out += s.field;
        else if (token == "S") out += s.component;
        else if (token == "R") out += s.repeat;
        else if (token == "E") out += s.escape;
        else out.append(text, i, close - i + 1);  // unknown escapes pass through verbatim
        i = close + 1;
    }
    return out;
}

std::string escape(const std::string& text, const Separators& s) {
    std::string out;
    out.reserve(text.size());
    auto emit = [&](char token) {
        out += s.escape;
        out += token;
        out += s.escape;
    };
    for (std::size_t i = 0; i < text.size();) {
        char c = text[i];
        if (c == s.escape) {
            std::size_t close = text.find(s.escape, i + 1);
            if (close != std::string::npos) {
                std::string token = text.substr(i + 1, close - i - 1);
                if (!known_escape_token(token) && token.find(s.field) == std::string::npos &&
                    token.find(s.component) == std::string::npos && token.find(s.repeat) == std::string::npos) {
                    out.append(text, i, close - i + 1);
                    i = close + 1;
                    continue;
                }
            }
            emit('E');
        } else if (c == s.field) {
            emit('F');
        } else if (c == s.component) {
            emit('S');
        } else if (c == s.repeat) {
            emit('R');
        } else {
            out += c;
        }
        ++i;
    }
    return out;
}

Hl7Field parse_field(const std::string& raw, const Separators& s) {
    Hl7Field field;
    for (const auto& rep : split_escaped(raw, s.repeat, s.escape)) {
        std::vector<std::string> components;
        for (const auto& comp : split_escaped(rep, s.component, s.escape))
            components.push_back(unescape(comp, s));
        field.repeats.push_back(std::move(components));
    }
    return field;
}

std::string serialize_field(const Hl7Field& field, const Separators& s) {
    std::string out;
    for (std::size_t r = 0; r < field.repeats.size(); ++r) {
        if (r > 0) out += s.repeat;
        const auto& comps = field.repeats[r];
        for (std::size_t c = 0; c < comps.size(); ++c) {
            if (c > 0) out += s.component;
            out += escape(comps[c], s);
        }
    }
    return out;
}

}  // namespace

Hl7Field Hl7Field::from_text(std::string text) {
    Hl7Field f;
    f.repeats.push_back({std::move(text)});
    return f;
}

const std::string& Hl7Field::text() const {
    if (repeats.empty() || repeats.front().empty()) return kEmpty;
    return repeats.front().front();
}

const std::string& Hl7Field::component(std::size_t index) const {
    if (repeats.empty() || index == 0 || index > repeats.front().size()) return kEmpty;
    return repeats.front()[index - 1];
}

const Hl7Field& Hl7Segment::field(std::size_t number) const {
    static const Hl7Field empty_field{{{""}}};
    if (number == 0) return empty_field;
    std::size_t index;
    if (id == "MSH") {
        if (number < 2) return empty_field;  // MSH-1 is the separator itself
        index = number - 2;
    } else {
        index = number - 1;
    }
    if (index >= fields.size()) return empty_field;
    return fields[index];
}

void Hl7Segment::set_field(std::size_t number, Hl7Field value) {
    if (number == 0) return;
    std::size_t index;
    if (id == "MSH") {
        if (number < 2) return;
        index = number - 2;
    } else {
        index = number - 1;
    }
    if (fields.size() <= index) fields.resize(index + 1, Hl7Field{{{""}}});
    fields[index] = std::move(value);
}

const Hl7Segment* Hl7Message::segment(const std::string& id, std::size_t occurrence) const {
    std::size_t seen = 0;
    for (const auto& seg : segments)
        if (seg.id == id && ++seen == occurrence) return &seg;
    return nullptr;
}

std::string Hl7Message::message_type() const {
    if (segments.empty()) return {};
    const Hl7Field& f = segments.front().field(9);
    std::string type = f.component(1);
    if (!f.component(2).empty()) type += "^" + f.component(2);
    return type;
}

std::string Hl7Message::control_id() const {
    if (segments.empty()) return {};
    return segments.front().field(10).text();
}

Result<std::string> mllp_encode(const std::string& text) {
    if (text.find(kMllpEnd) != std::string::npos)
        return Result<std::string>::failure("illegal_byte", "text contains the MLLP end byte 0x1C");
    std::string out;
    out.reserve(text.size() + 3);
    out += kMllpStart;
    out += text;
    out += kMllpEnd;
    out += kMllpTrailer;
    return out;
}

MllpDecoder::Output MllpDecoder::feed(const std::string& bytes) {
    Output out;
    buffer_ += bytes;
    for (;;) {
        std::size_t start = buffer_.find(kMllpStart);
        if (start == std::string::npos) {
            if (!buffer_.empty()) {
                out.noise.push_back(buffer_);
                buffer_.clear();
            }
            return out;
        }
        if (start > 0) {
            out.noise.push_back(buffer_.substr(0, start));
            buffer_.erase(0, start);
        }
        std::size_t end = buffer_.find(kMllpEnd, 1);
        if (end == std::string::npos) return out;            // partial envelope, wait
        if (end + 1 >= buffer_.size()) return out;           // trailer byte not here yet
        if (buffer_[end + 1] == kMllpTrailer) {
            out.messages.push_back(buffer_.substr(1, end - 1));
        } else {
            out.noise.push_back(buffer_.substr(0, end + 2));
        }
        buffer_.erase(0, end + 2);
    }
}

Result<Hl7Message> parse_hl7(const std::string& text) {
    if (text.size() < 8 || text.compare(0, 3, "MSH") != 0)
        return Result<Hl7Message>::failure("missing_msh", "message does not begin with MSH");

    Hl7Message msg;
    msg.field_separator = text[3];
    std::size_t enc_end = text.find(msg.field_separator, 4);
    std::size_t line_end = text.find('\r', 4);
    if (enc_end == std::string::npos || (line_end != std::string::npos && enc_end > line_end))
        enc_end = line_end == std::string::npos ? text.size() : line_end;
    msg.encoding = text.substr(4, enc_end - 4);
    if (msg.encoding.size() != 4)
        return Result<Hl7Message>::failure("bad_encoding_chars",
                                           "MSH-2 is '" + msg.encoding + "', expected 4 characters");
    {
        std::string all = msg.encoding + msg.field_separator;
        std::sort(all.begin(), all.end());
        if (std::adjacent_find(all.begin(), all.end()) != all.end())
            return Result<Hl7Message>::failure("bad_encoding_chars", "separator characters not distinct");
    }

    const Separators seps = separators_of(msg.field_separator, msg.encoding);

    std::vector<std::string> lines;
    std::string current;
    for (char c : text) {
        if (c == '\r') {
            lines.push_back(current);
            current.clear();
        } else if (c != '\n') {  // tolerate CRLF segment endings
            current += c;
        }
    }
    if (!current.empty()) lines.push_back(current);

    for (const auto& line : lines) {
        if (line.empty()) continue;
        Hl7Segment seg;
        if (line.compare(0, 3, "MSH") == 0) {
            seg.id = "MSH";
            seg.fields.push_back(Hl7Field::from_text(msg.encoding));  // raw MSH-2
            std::size_t rest = 4 + msg.encoding.size();
            if (rest < line.size() && line[rest] == msg.field_separator) ++rest;
            if (rest <= line.size()) {
                for (const auto& part :
                     split_escaped(line.substr(rest), msg.field_separator, seps.escape))
                    seg.fields.push_back(parse_field(part, seps));
            }
        } else {
            auto parts = split_escaped(line, msg.field_separator, seps.escape);
            seg.id = parts[0];
            for (std::size_t i = 1; i < parts.size(); ++i) seg.fields.push_back(parse_field(parts[i], seps));
        }
        msg.segments.push_back(std::move(seg));
    }
    return msg;
}

std::string serialize_hl7(const Hl7Message& msg) {
    const Separators seps = separators_of(msg.field_separator, msg.encoding);
    std::string out;
    for (const auto& seg : msg.segments) {
        if (!out.empty()) out += '\r';
        out += seg.id;
        std::size_t first = 0;
        if (seg.id == "MSH") {
            out += msg.field_separator;
            out += msg.encoding;
            first = 1;
        }
        for (std::size_t i = first; i < seg.fields.size(); ++i) {
            out += msg.field_separator;
            out += serialize_field(seg.fields[i], seps);
        }
    }
    out += '\r';
    return out;
}

Result<std::vector<RawResult>> extract_results_hl7(const Hl7Message& msg, const std::string& device_id) {
    if (msg.message_type() != "ORU^R01")
        return Result<std::vector<RawResult>>::failure("wrong_message_type",
                                                       "expected ORU^R01, got " + msg.message_type());
    std::vector<RawResult> results;
    std::optional<std::string> current_sample;
    for (const auto& seg : msg.segments) {
        if (seg.id == "OBR") {
            std::string sample = seg.field(3).text();  // filler order number
            if (sample.empty()) sample = seg.field(2).text();
            current_sample = sample;
        } else if (seg.id == "OBX") {
            if (!current_sample)
                return Result<std::vector<RawResult>>::failure("obx_without_obr",
                                                               "OBX segment before any OBR");
            RawResult raw;
            raw.device_id = device_id;
            raw.sample_id = *current_sample;
            raw.machine_test_code = seg.field(3).component(1);
            raw.value = seg.field(5).text();
            if (const auto& u = seg.field(6).text(); !u.empty()) raw.unit = u;
            if (const auto& rr = seg.field(7).text(); !rr.empty()) raw.ref_range_raw = rr;
            if (const auto& f = seg.field(8).text(); !f.empty()) raw.abnormal_flag = f;
            if (const auto& st = seg.field(11).text(); !st.empty()) raw.result_status = st;
            if (const auto& ts = seg.field(14).text(); !ts.empty())
                raw.observed_at = parse_instrument_timestamp(ts);
            raw.source = ResultSource::stream;
            results.push_back(std::move(raw));
        }
    }
    return results;
}

Result<Hl7Message> build_ack(const Hl7Message& original, AckCode code) {
    if (original.segments.empty() || original.segments.front().id != "MSH")
        return Result<Hl7Message>::failure("missing_msh", "original message has no MSH segment");
    const Hl7Segment& in = original.segments.front();

    Hl7Message ack;
    ack.field_separator = original.field_separator;
    ack.encoding = original.encoding;

    Hl7Segment msh;
    msh.id = "MSH";
    msh.fields.push_back(Hl7Field::from_text(ack.encoding));
    msh.set_field(3, in.field(5));  // sender/receiver swapped
    msh.set_field(4, in.field(6));
    msh.set_field(5, in.field(3));
    msh.set_field(6, in.field(4));
    msh.set_field(7, in.field(7));
    msh.set_field(9, Hl7Field::from_text("ACK"));
    msh.set_field(10, Hl7Field::from_text("ACK-" + in.field(10).text()));
    msh.set_field(11, in.field(11));
    msh.set_field(12, in.field(12));
    ack.segments.push_back(std::move(msh));

    Hl7Segment msa;
    msa.id = "MSA";
    const char* code_text = code == AckCode::AA ? "AA" : code == AckCode::AE ? "AE" : "AR";
    msa.set_field(1, Hl7Field::from_text(code_text));
    msa.set_field(2, in.field(10));
    ack.segments.push_back(std::move(msa));
    return ack;
}

Hl7Message build_oru(const std::string& sending_app, const std::string& control_id,
                     const std::string& sample_id, const std::vector<OruObservation>& observations) {
    Hl7Message msg;

    Hl7Segment msh;
    msh.id = "MSH";
    msh.fields.push_back(Hl7Field::from_text(msg.encoding));
    msh.set_field(3, Hl7Field::from_text(sending_app));
    msh.set_field(4, Hl7Field::from_text("LAB"));
    msh.set_field(5, Hl7Field::from_text("GMEI"));
    msh.set_field(6, Hl7Field::from_text("HOSP"));
    msh.set_field(7, Hl7Field::from_text("20240101000000"));
    Hl7Field type;
    type.repeats.push_back({"ORU", "R01"});
    msh.set_field(9, std::move(type));
    msh.set_field(10, Hl7Field::from_text(control_id));
    msh.set_field(11, Hl7Field::from_text("P"));
    msh.set_field(12, Hl7Field::from_text("2.3"));
    msg.segments.push_back(std::move(msh));

    Hl7Segment pid;
    pid.id = "PID";
    pid.set_field(1, Hl7Field::from_text("1"));
    msg.segments.push_back(std::move(pid));

    Hl7Segment obr;
    obr.id = "OBR";
    obr.set_field(1, Hl7Field::from_text("1"));
    obr.set_field(2, Hl7Field::from_text(sample_id));
    obr.set_field(3, Hl7Field::from_text(sample_id));
    msg.segments.push_back(std::move(obr));

    int seq = 0;
    for (const auto& obs : observations) {
        Hl7Segment obx;
        obx.id = "OBX";
        obx.set_field(1, Hl7Field::from_text(std::to_string(++seq)));
        obx.set_field(2, Hl7Field::from_text("NM"));
        Hl7Field code;
        code.repeats.push_back({obs.test_code, obs.test_code});
        obx.set_field(3, std::move(code));
        obx.set_field(5, Hl7Field::from_text(obs.value));
        if (!obs.unit.empty()) obx.set_field(6, Hl7Field::from_text(obs.unit));
        if (!obs.ref_range.empty()) obx.set_field(7, Hl7Field::from_text(obs.ref_range));
        if (!obs.flag.empty()) obx.set_field(8, Hl7Field::from_text(obs.flag));
        if (!obs.status.empty()) obx.set_field(11, Hl7Field::from_text(obs.status));
        if (!obs.observed_at.empty()) obx.set_field(14, Hl7Field::from_text(obs.observed_at));
        msg.segments.push_back(std::move(obx));
    }
    return msg;
}

}  // namespace gmei::hl7
