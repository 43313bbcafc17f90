#include <cctype>
#include <cstdio>
#include <sstream>

#include "gmei/astm_transport.hpp"
#include "gmei/simkit.hpp"
#include "gmei/util.hpp"

namespace gmei::sim {

using nlohmann::json;

void Transcript::sent(const std::string& bytes) {
    entries.push_back({util::now_ms(), '>', bytes, {}});
}

void Transcript::received(const std::string& bytes) {
    entries.push_back({util::now_ms(), '<', bytes, {}});
}

void Transcript::note(const std::string& text) {
    entries.push_back({util::now_ms(), '#', {}, text});
}

std::string Transcript::render() const {
    std::ostringstream out;
    const std::int64_t t0 = entries.empty() ? 0 : entries.front().t_ms;
    for (const auto& e : entries) {
        char head[32];
        std::snprintf(head, sizeof(head), "%8lld %c ", static_cast<long long>(e.t_ms - t0), e.dir);
        out << head;
        if (e.dir == '#') {
            out << e.note;
        } else {
            out << util::hex_dump(e.bytes) << "  |";
            for (unsigned char c : e.bytes) out << (std::isprint(c) ? static_cast<char>(c) : '.');
            out << "|";
        }
        out << "\n";
    }
    return out.str();
}

std::string check_ack_discipline(const Transcript& transcript) {
    // Flatten to a byte-event sequence and verify: frame sent -> next
    // gateway byte is ACK or NAK, and ACKed frames are not answered twice.
    struct Ev {
        char dir;
        std::string bytes;
    };
    std::vector<Ev> evs;
    for (const auto& e : transcript.entries)
        if (e.dir != '#') evs.push_back({e.dir, e.bytes});

    int open_frames = 0;
    for (const auto& e : evs) {
        if (e.dir == '>') {
            std::size_t pos = 0;
            while ((pos = e.bytes.find(astm::kStx, pos)) != std::string::npos) {
                ++open_frames;
                if (open_frames > 1) return "frame sent before the previous frame was acknowledged";
                std::size_t lf = e.bytes.find(astm::kLf, pos);
                if (lf == std::string::npos) break;
                pos = lf + 1;
            }
        } else {
            for (char c : e.bytes) {
                if (c == astm::kAck || c == astm::kNak) {
                    if (open_frames > 0) --open_frames;
                    // ACKs outside a frame exchange answer ENQ; fine.
                }
            }
        }
    }
    return {};
}

ScriptStep ScriptStep::send_control_step(char byte) {
    ScriptStep s;
    s.kind = Kind::send_control;
    s.control = byte;
    return s;
}

ScriptStep ScriptStep::send_frame_step(int number, std::string text, bool final_frame) {
    ScriptStep s;
    s.kind = Kind::send_frame;
    s.frame_number = number;
    s.text = std::move(text);
    s.final_frame = final_frame;
    return s;
}

ScriptStep ScriptStep::send_raw_step(std::string bytes) {
    ScriptStep s;
    s.kind = Kind::send_raw;
    s.raw = std::move(bytes);
    return s;
}

ScriptStep ScriptStep::expect_control_step(char byte, int timeout_ms) {
    ScriptStep s;
    s.kind = Kind::expect_control;
    s.expected = byte;
    s.timeout_ms = timeout_ms;
    return s;
}

ScriptStep ScriptStep::expect_order_step(std::string sample_id, std::vector<std::string> tests,
                                         int timeout_ms) {
    ScriptStep s;
    s.kind = Kind::expect_order;
    s.sample_id = std::move(sample_id);
    s.tests = std::move(tests);
    s.timeout_ms = timeout_ms;
    return s;
}

ScriptStep ScriptStep::pause_step(int ms) {
    ScriptStep s;
    s.kind = Kind::pause;
    s.pause_ms = ms;
    return s;
}

ScriptStep ScriptStep::fault_step(Fault fault, int delay_ms) {
    ScriptStep s;
    s.kind = Kind::fault;
    s.fault = fault;
    s.delay_ms = delay_ms;
    return s;
}

namespace {

const char* kind_name(ScriptStep::Kind k) {
    switch (k) {
        case ScriptStep::Kind::send_control: return "send_control";
        case ScriptStep::Kind::send_frame: return "send_frame";
        case ScriptStep::Kind::send_raw: return "send_raw";
        case ScriptStep::Kind::expect_control: return "expect_control";
        case ScriptStep::Kind::expect_order: return "expect_order";
        case ScriptStep::Kind::pause: return "pause";
        case ScriptStep::Kind::fault: return "fault";
    }
    return "pause";
}

const char* fault_name(ScriptStep::Fault f) {
    switch (f) {
        case ScriptStep::Fault::drop_connection: return "drop_connection";
        case ScriptStep::Fault::corrupt_next_frame: return "corrupt_next_frame";
        case ScriptStep::Fault::delay: return "delay";
        case ScriptStep::Fault::duplicate_next_send: return "duplicate_next_send";
    }
    return "delay";
}

}  // namespace

std::string SimScript::to_jsonl() const {
    std::ostringstream out;
    for (const auto& s : steps) {
        json j{{"op", kind_name(s.kind)}};
        switch (s.kind) {
            case ScriptStep::Kind::send_control:
                j["byte"] = static_cast<int>(static_cast<unsigned char>(s.control));
                break;
            case ScriptStep::Kind::send_frame:
                j["frame_number"] = s.frame_number;
                j["text_b64"] = util::base64_encode(s.text);
                j["final"] = s.final_frame;
                break;
            case ScriptStep::Kind::send_raw:
                j["raw_b64"] = util::base64_encode(s.raw);
                break;
            case ScriptStep::Kind::expect_control:
                j["byte"] = static_cast<int>(static_cast<unsigned char>(s.expected));
                j["timeout_ms"] = s.timeout_ms;
                break;
            case ScriptStep::Kind::expect_order:
                j["sample_id"] = s.sample_id;
                j["tests"] = s.tests;
                j["timeout_ms"] = s.timeout_ms;
                break;
            case ScriptStep::Kind::pause:
                j["ms"] = s.pause_ms;
                break;
            case ScriptStep::Kind::fault:
                j["fault"] = fault_name(s.fault);
                if (s.fault == ScriptStep::Fault::delay) j["ms"] = s.delay_ms;
                break;
        }
        out << j.dump() << "\n";
    }
    return out.str();
}

Result<SimScript> SimScript::from_jsonl(const std::string& text) {
    SimScript script;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded())
            return Result<SimScript>::failure("bad_script", "line " + std::to_string(line_no));
        const std::string op = j.value("op", "");
        ScriptStep s;
        if (op == "send_control") {
            s = ScriptStep::send_control_step(static_cast<char>(j.value("byte", 0)));
        } else if (op == "send_frame") {
            s = ScriptStep::send_frame_step(j.value("frame_number", 1),
                                            util::base64_decode(j.value("text_b64", "")),
                                            j.value("final", true));
        } else if (op == "send_raw") {
            s = ScriptStep::send_raw_step(util::base64_decode(j.value("raw_b64", "")));
        } else if (op == "expect_control") {
            s = ScriptStep::expect_control_step(static_cast<char>(j.value("byte", 0)),
                                                j.value("timeout_ms", 3000));
        } else if (op == "expect_order") {
            s = ScriptStep::expect_order_step(j.value("sample_id", ""),
                                              j.value("tests", std::vector<std::string>{}),
                                              j.value("timeout_ms", 5000));
        } else if (op == "pause") {
            s = ScriptStep::pause_step(j.value("ms", 0));
        } else if (op == "fault") {
            const std::string f = j.value("fault", "delay");
            ScriptStep::Fault fault = ScriptStep::Fault::delay;
            if (f == "drop_connection") fault = ScriptStep::Fault::drop_connection;
            else if (f == "corrupt_next_frame") fault = ScriptStep::Fault::corrupt_next_frame;
            else if (f == "duplicate_next_send") fault = ScriptStep::Fault::duplicate_next_send;
            s = ScriptStep::fault_step(fault, j.value("ms", 0));
        } else {
            return Result<SimScript>::failure("bad_script",
                                              "unknown op '" + op + "' at line " + std::to_string(line_no));
        }
        script.steps.push_back(std::move(s));
    }
    return script;
}

SimScript astm_upload_script(const std::vector<std::string>& messages) {
    SimScript script;
    for (const auto& message : messages) {
        script.steps.push_back(ScriptStep::send_control_step(astm::kEnq));
        script.steps.push_back(ScriptStep::expect_control_step(astm::kAck));
        for (const auto& frame : astm::split_message(message, 1)) {
            script.steps.push_back(ScriptStep::send_frame_step(
                frame.number, frame.text, frame.terminator == astm::FrameTerminator::final_));
            script.steps.push_back(ScriptStep::expect_control_step(astm::kAck));
        }
        script.steps.push_back(ScriptStep::send_control_step(astm::kEot));
    }
    // Link-check session: its establishment ACK confirms the gateway
    // processed every earlier EOT on this connection.
    script.steps.push_back(ScriptStep::send_control_step(astm::kEnq));
    script.steps.push_back(ScriptStep::expect_control_step(astm::kAck));
    script.steps.push_back(ScriptStep::send_control_step(astm::kEot));
    return script;
}

SimScript hl7_upload_script(const std::vector<std::string>& messages) {
    SimScript script;
    for (const auto& message : messages) script.steps.push_back(ScriptStep::send_raw_step(message));
    return script;
}

SimScript generic_upload_script(const std::vector<std::string>& frames) {
    SimScript script;
    for (const auto& frame : frames) script.steps.push_back(ScriptStep::send_raw_step(frame));
    return script;
}

}  // namespace gmei::sim
