#include <chrono>
#include <random>
#include <set>
#include <thread>

#include "gmei/astm_records.hpp"
#include "gmei/astm_transport.hpp"
#include "gmei/hl7.hpp"
#include "gmei/net.hpp"
#include "gmei/simkit.hpp"
#include "gmei/util.hpp"

namespace gmei::sim {

namespace {

std::string byte_name(char c) {
    switch (c) {
        case astm::kEnq: return "ENQ";
        case astm::kAck: return "ACK";
        case astm::kNak: return "NAK";
        case astm::kEot: return "EOT";
        default: break;
    }
    return "0x" + util::to_hex(static_cast<unsigned char>(c), 2);
}

struct Runner {
    AnalyzerKind kind;
    std::string host;
    int port;
    const SimScript& script;
    AnalyzerOptions opts;
    AnalyzerOutcome out;

    net::TcpStream conn;
    std::string rxbuf;
    std::mt19937_64 rng;

    // ASTM resilience bookkeeping.
    std::vector<std::size_t> session_starts;  // indices of send_control(ENQ) steps
    std::vector<bool> session_has_frames;
    std::size_t confirmed_session = 0;  // first session whose processing is unconfirmed
    std::size_t current_session = 0;
    std::string last_frame_clean;
    int resend_count = 0;
    bool corrupt_next = false;
    bool duplicate_next = false;
    bool swallow_extra = false;  // one surplus response after a duplicated send
    std::set<std::size_t> fired_faults;  // scripted faults fire once, not per replay

    Runner(AnalyzerKind k, std::string h, int p, const SimScript& s, AnalyzerOptions o)
        : kind(k), host(std::move(h)), port(p), script(s), opts(o), rng(o.seed) {}

    bool chance(double rate) {
        if (rate <= 0) return false;
        return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < rate;
    }

    bool deadline_passed() const { return opts.deadline_ms > 0 && util::now_ms() >= opts.deadline_ms; }

    bool connect_once() {
        auto c = net::TcpStream::connect(host, port, opts.connect_timeout_ms);
        if (!c.ok()) return false;
        conn = std::move(c.value());
        rxbuf.clear();
        out.transcript.note("connected to " + host + ":" + std::to_string(port));
        return true;
    }

    bool connect() {
        for (;;) {
            if (connect_once()) return true;
            if (!opts.resilient || deadline_passed()) {
                out.error = "connect_failed: " + host + ":" + std::to_string(port);
                return false;
            }
            std::this_thread::sleep_for(std::chrono::milliseconds(opts.reconnect_backoff_ms));
        }
    }

    bool write_bytes(const std::string& bytes) {
        if (conn.write_all(bytes)) return false;
        out.transcript.sent(bytes);
        return true;
    }

    // One byte from the gateway, via the local buffer.
    Result<char> read_control(int timeout_ms) {
        const std::int64_t deadline = util::now_ms() + timeout_ms;
        while (rxbuf.empty()) {
            const std::int64_t remaining = deadline - util::now_ms();
            if (remaining <= 0) return Result<char>::failure("timeout", "no byte from gateway");
            auto data = conn.read_some(static_cast<int>(std::min<std::int64_t>(remaining, 200)));
            if (!data.ok()) return Result<char>::failure("closed", data.error().detail);
            if (!data.value().empty()) {
                out.transcript.received(data.value());
                rxbuf += data.value();
            }
        }
        char c = rxbuf.front();
        rxbuf.erase(0, 1);
        return c;
    }

    // ----- ASTM ------------------------------------------------------------

    void index_sessions() {
        for (std::size_t i = 0; i < script.steps.size(); ++i) {
            const auto& st = script.steps[i];
            if (st.kind == ScriptStep::Kind::send_control && st.control == astm::kEnq) {
                session_starts.push_back(i);
                session_has_frames.push_back(false);
            } else if (st.kind == ScriptStep::Kind::send_frame && !session_starts.empty()) {
                session_has_frames.back() = true;
            }
        }
    }

    bool run_astm() {
        index_sessions();
        if (!connect()) return false;
        std::size_t i = 0;
        while (i < script.steps.size()) {
            if (deadline_passed()) {
                out.error = "deadline exceeded at step " + std::to_string(i);
                return false;
            }
            const ScriptStep& st = script.steps[i];
            bool step_ok = true;
            bool hard_fail = false;

            switch (st.kind) {
                case ScriptStep::Kind::send_control: {
                    if (st.control == astm::kEnq) {
                        for (std::size_t k = 0; k < session_starts.size(); ++k)
                            if (session_starts[k] == i) current_session = k;
                        if (opts.inter_send_pause_ms > 0)
                            std::this_thread::sleep_for(
                                std::chrono::milliseconds(opts.inter_send_pause_ms));
                    }
                    std::string bytes(1, st.control);
                    if (duplicate_next) {
                        duplicate_next = false;
                        bytes += bytes;
                        out.transcript.note("duplicated " + byte_name(st.control));
                    }
                    step_ok = write_bytes(bytes);
                    break;
                }
                case ScriptStep::Kind::send_frame: {
                    astm::Frame frame{st.frame_number, st.text,
                                      st.final_frame ? astm::FrameTerminator::final_
                                                     : astm::FrameTerminator::intermediate};
                    auto encoded = astm::encode_frame(frame);
                    if (!encoded.ok()) {
                        out.error = "script frame invalid: " + encoded.error().to_string();
                        return false;
                    }
                    last_frame_clean = encoded.value();
                    resend_count = 0;
                    if (chance(opts.drop_rate)) {
                        out.transcript.note("injected connection drop");
                        conn.close();
                        step_ok = false;
                        break;
                    }
                    std::string wire = last_frame_clean;
                    if (corrupt_next || chance(opts.corrupt_rate)) {
                        corrupt_next = false;
                        std::size_t pos = 2 + rng() % (wire.size() - 7 ? wire.size() - 7 : 1);
                        wire[pos] = static_cast<char>(wire[pos] ^ 0x20);
                        out.transcript.note("injected frame corruption");
                    }
                    if (duplicate_next) {
                        duplicate_next = false;
                        wire += last_frame_clean;
                        swallow_extra = true;
                        out.transcript.note("duplicated frame send");
                    }
                    step_ok = write_bytes(wire);
                    break;
                }
                case ScriptStep::Kind::expect_control: {
                    const bool after_frame =
                        i > 0 && script.steps[i - 1].kind == ScriptStep::Kind::send_frame;
                    const bool after_enq = i > 0 &&
                                           script.steps[i - 1].kind == ScriptStep::Kind::send_control &&
                                           script.steps[i - 1].control == astm::kEnq;
                    for (;;) {
                        auto c = read_control(st.timeout_ms);
                        if (!c.ok()) {
                            step_ok = false;
                            if (!opts.resilient) {
                                out.error = "expectation_failed: expected " + byte_name(st.expected) +
                                            ", got " + c.error().code + " at step " + std::to_string(i);
                                hard_fail = true;
                            }
                            break;
                        }
                        const char got = c.value();
                        if (swallow_extra && got == astm::kNak) {
                            // The gateway rejected our duplicated frame; expected.
                            swallow_extra = false;
                            out.naks_seen++;
                            out.transcript.note("duplicate frame NAKed by gateway (discarded)");
                            continue;
                        }
                        if (got == st.expected) {
                            if (after_enq && st.expected == astm::kAck) {
                                // Establishment ACK: every earlier EOT on this
                                // connection has been fully processed.
                                confirmed_session = current_session;
                            }
                            break;
                        }
                        if (after_frame && st.expected == astm::kAck && got == astm::kNak) {
                            out.naks_seen++;
                            if (++resend_count > astm::kMaxRetries) {
                                step_ok = false;
                                out.error = "gateway NAKed frame " +
                                            std::to_string(astm::kMaxRetries + 1) + " times";
                                hard_fail = true;
                                break;
                            }
                            out.transcript.note("NAK received: resending frame");
                            if (!write_bytes(last_frame_clean)) {
                                step_ok = false;
                                break;
                            }
                            continue;
                        }
                        step_ok = false;
                        out.error = "expectation_failed: expected " + byte_name(st.expected) + " got " +
                                    byte_name(got) + " at step " + std::to_string(i);
                        if (!opts.resilient) hard_fail = true;
                        break;
                    }
                    break;
                }
                case ScriptStep::Kind::expect_order: {
                    std::string reason;
                    if (!run_expect_order(st, reason)) {
                        step_ok = false;
                        if (reason != "closed" && reason != "timeout") hard_fail = true;
                        if (!opts.resilient) hard_fail = true;
                    }
                    break;
                }
                case ScriptStep::Kind::send_raw:
                    step_ok = write_bytes(st.raw);
                    break;
                case ScriptStep::Kind::pause:
                    std::this_thread::sleep_for(std::chrono::milliseconds(st.pause_ms));
                    break;
                case ScriptStep::Kind::fault:
                    if (fired_faults.count(i)) break;
                    fired_faults.insert(i);
                    switch (st.fault) {
                        case ScriptStep::Fault::drop_connection:
                            out.transcript.note("fault: dropping connection");
                            conn.close();
                            step_ok = false;
                            break;
                        case ScriptStep::Fault::corrupt_next_frame:
                            corrupt_next = true;
                            break;
                        case ScriptStep::Fault::duplicate_next_send:
                            duplicate_next = true;
                            break;
                        case ScriptStep::Fault::delay:
                            std::this_thread::sleep_for(std::chrono::milliseconds(st.delay_ms));
                            break;
                    }
                    break;
            }

            if (!step_ok) {
                if (hard_fail || !opts.resilient) {
                    if (out.error.empty()) out.error = "failed at step " + std::to_string(i);
                    return false;
                }
                if (deadline_passed()) {
                    out.error = "deadline exceeded during replay";
                    return false;
                }
                // Reconnect and replay everything not yet confirmed durable.
                out.reconnects++;
                conn.close();
                swallow_extra = false;
                std::this_thread::sleep_for(std::chrono::milliseconds(opts.reconnect_backoff_ms));
                if (!connect()) return false;
                current_session = confirmed_session;
                i = session_starts.empty()
                        ? 0
                        : session_starts[std::min(confirmed_session, session_starts.size() - 1)];
                out.transcript.note("replaying from session " + std::to_string(confirmed_session));
                continue;
            }
            ++i;
        }
        for (std::size_t k = 0; k < session_has_frames.size(); ++k)
            if (session_has_frames[k]) out.messages_delivered++;
        out.ok = true;
        return true;
    }

    // Receives one gateway-initiated download (ENQ ... frames ... EOT) and
    // checks the order content against the expectation.
    bool run_expect_order(const ScriptStep& st, std::string& reason) {
        astm::TimerPolicy policy;
        policy.receive_ms = st.timeout_ms;
        astm::TransportState receiver = astm::make_receiver(policy);
        std::string delivered;
        bool got_message = false;
        const std::int64_t deadline = util::now_ms() + st.timeout_ms;

        auto handle_actions = [&](const std::vector<astm::TransportAction>& actions) -> bool {
            for (const auto& a : actions) {
                if (a.kind == astm::TransportAction::Kind::send_control) {
                    if (!write_bytes(std::string(1, a.byte))) return false;
                } else if (a.kind == astm::TransportAction::Kind::deliver_message) {
                    delivered = a.message;
                    got_message = true;
                }
            }
            return true;
        };

        while (!got_message) {
            if (util::now_ms() >= deadline) {
                reason = "timeout";
                out.error = "expect_order: no download within " + std::to_string(st.timeout_ms) + " ms";
                return false;
            }
            if (rxbuf.empty()) {
                auto data = conn.read_some(100);
                if (!data.ok()) {
                    reason = "closed";
                    out.error = "expect_order: connection lost";
                    return false;
                }
                if (!data.value().empty()) {
                    out.transcript.received(data.value());
                    rxbuf += data.value();
                }
                continue;
            }
            const char c = rxbuf.front();
            if (c == astm::kStx) {
                std::size_t lf = rxbuf.find(astm::kLf);
                if (lf == std::string::npos) {
                    auto data = conn.read_some(100);
                    if (!data.ok()) {
                        reason = "closed";
                        return false;
                    }
                    if (!data.value().empty()) {
                        out.transcript.received(data.value());
                        rxbuf += data.value();
                    }
                    continue;
                }
                std::string frame_bytes = rxbuf.substr(0, lf + 1);
                rxbuf.erase(0, lf + 1);
                auto frame = astm::decode_frame(frame_bytes, receiver.expected_frame_number);
                auto step = frame.ok()
                                ? astm::receiver_step(receiver,
                                                      astm::TransportEvent::from_frame(frame.value()))
                                : astm::receiver_step(receiver,
                                                      astm::TransportEvent::malformed(frame.error().code));
                receiver = std::move(step.state);
                if (!handle_actions(step.actions)) {
                    reason = "closed";
                    return false;
                }
            } else {
                rxbuf.erase(0, 1);
                auto step = astm::receiver_step(receiver, astm::TransportEvent::from_byte(c));
                receiver = std::move(step.state);
                if (!handle_actions(step.actions)) {
                    reason = "closed";
                    return false;
                }
            }
        }

        auto parsed = astm::parse_message(delivered);
        if (!parsed.ok()) {
            out.error = "expect_order: download unparseable: " + parsed.error().to_string();
            return false;
        }
        std::vector<const astm::AstmRecord*> orders;
        for (const auto& rec : parsed.value().records)
            if (rec.type == astm::RecordType::order) orders.push_back(&rec);

        if (st.sample_id.empty()) {
            if (!orders.empty()) {
                out.error = "expect_order: expected the no-order reply, got an order";
                return false;
            }
            out.transcript.note("no-order reply received");
            return true;
        }
        if (orders.size() != 1) {
            out.error = "expect_order: expected one order, got " + std::to_string(orders.size());
            return false;
        }
        astm::AstmFieldMap map;
        const std::string sample = orders.front()->field(map.order_sample_id).text();
        if (sample != st.sample_id) {
            out.error = "expect_order: sample '" + sample + "' != '" + st.sample_id + "'";
            return false;
        }
        if (!st.tests.empty()) {
            std::vector<std::string> downloaded;
            for (const auto& repeat : orders.front()->field(map.order_tests).repeats) {
                if (repeat.size() >= static_cast<std::size_t>(map.result_test_code_component))
                    downloaded.push_back(repeat[map.result_test_code_component - 1]);
                else if (!repeat.empty())
                    downloaded.push_back(repeat.front());
            }
            if (downloaded != st.tests) {
                std::string got;
                for (const auto& t : downloaded) got += t + " ";
                out.error = "expect_order: test list mismatch, got [" + got + "]";
                return false;
            }
        }
        out.transcript.note("order for " + st.sample_id + " verified");
        return true;
    }

    // ----- HL7 --------------------------------------------------------------

    Result<std::string> read_mllp(int timeout_ms) {
        hl7::MllpDecoder decoder;
        auto fed = decoder.feed(rxbuf);
        rxbuf = decoder.remainder();
        if (!fed.messages.empty()) return fed.messages.front();
        const std::int64_t deadline = util::now_ms() + timeout_ms;
        for (;;) {
            const std::int64_t remaining = deadline - util::now_ms();
            if (remaining <= 0) return Result<std::string>::failure("timeout", "no MLLP reply");
            auto data = conn.read_some(static_cast<int>(std::min<std::int64_t>(remaining, 200)));
            if (!data.ok()) return Result<std::string>::failure("closed", data.error().detail);
            if (data.value().empty()) continue;
            out.transcript.received(data.value());
            auto output = decoder.feed(data.value());
            if (!output.messages.empty()) {
                rxbuf = decoder.remainder();
                return output.messages.front();
            }
        }
    }

    bool run_hl7() {
        if (!connect()) return false;
        for (std::size_t i = 0; i < script.steps.size(); ++i) {
            const ScriptStep& st = script.steps[i];
            if (st.kind == ScriptStep::Kind::pause) {
                std::this_thread::sleep_for(std::chrono::milliseconds(st.pause_ms));
                continue;
            }
            if (st.kind == ScriptStep::Kind::fault) {
                if (fired_faults.count(i)) continue;
                fired_faults.insert(i);
                if (st.fault == ScriptStep::Fault::drop_connection) conn.close();
                if (st.fault == ScriptStep::Fault::delay)
                    std::this_thread::sleep_for(std::chrono::milliseconds(st.delay_ms));
                continue;
            }
            if (st.kind != ScriptStep::Kind::send_raw) continue;

            std::string control_id;
            if (auto parsed = hl7::parse_hl7(st.raw); parsed.ok())
                control_id = parsed.value().control_id();
            auto framed = hl7::mllp_encode(st.raw);
            if (!framed.ok()) {
                out.error = "script message not MLLP-encodable";
                return false;
            }

            for (;;) {
                if (deadline_passed()) {
                    out.error = "deadline exceeded";
                    return false;
                }
                if (!conn.valid() || chance(opts.drop_rate)) {
                    if (conn.valid()) out.transcript.note("injected connection drop");
                    conn.close();
                    out.reconnects++;
                    if (!connect()) return false;
                }
                if (!write_bytes(framed.value())) {
                    conn.close();
                    continue;
                }
                auto ack_text = read_mllp(opts.response_timeout_ms);
                if (!ack_text.ok()) {
                    if (!opts.resilient) {
                        out.error = "expectation_failed: no ACK (" + ack_text.error().code + ")";
                        return false;
                    }
                    conn.close();
                    continue;  // resend; the gateway deduplicates
                }
                auto ack = hl7::parse_hl7(ack_text.value());
                if (!ack.ok()) {
                    out.error = "unparseable ACK";
                    return false;
                }
                const hl7::Hl7Segment* msa = ack.value().segment("MSA");
                const std::string code = msa ? msa->field(1).text() : "";
                const std::string ref = msa ? msa->field(2).text() : "";
                if (ref != control_id) {
                    out.transcript.note("ACK for '" + ref + "' ignored (awaiting '" + control_id + "')");
                    continue;
                }
                if (code != "AA") {
                    out.error = "gateway acknowledged with " + code;
                    return false;
                }
                out.messages_delivered++;
                if (opts.inter_send_pause_ms > 0)
                    std::this_thread::sleep_for(std::chrono::milliseconds(opts.inter_send_pause_ms));
                break;
            }
        }
        out.ok = true;
        return true;
    }

    // ----- generic ----------------------------------------------------------

    bool run_generic() {
        if (!connect()) return false;
        for (std::size_t i = 0; i < script.steps.size(); ++i) {
            const ScriptStep& st = script.steps[i];
            if (st.kind == ScriptStep::Kind::pause) {
                std::this_thread::sleep_for(std::chrono::milliseconds(st.pause_ms));
                continue;
            }
            if (st.kind == ScriptStep::Kind::fault) {
                if (fired_faults.count(i)) continue;
                fired_faults.insert(i);
                if (st.fault == ScriptStep::Fault::drop_connection) conn.close();
                if (st.fault == ScriptStep::Fault::corrupt_next_frame) corrupt_next = true;
                if (st.fault == ScriptStep::Fault::duplicate_next_send) duplicate_next = true;
                if (st.fault == ScriptStep::Fault::delay)
                    std::this_thread::sleep_for(std::chrono::milliseconds(st.delay_ms));
                continue;
            }
            if (st.kind != ScriptStep::Kind::send_raw) continue;

            int attempts = 0;
            for (;;) {
                if (deadline_passed()) {
                    out.error = "deadline exceeded";
                    return false;
                }
                if (!conn.valid() || chance(opts.drop_rate)) {
                    if (conn.valid()) out.transcript.note("injected connection drop");
                    conn.close();
                    out.reconnects++;
                    if (!connect()) return false;
                }
                std::string wire = st.raw;
                bool corrupted = corrupt_next || chance(opts.corrupt_rate);
                corrupt_next = false;
                if (corrupted && wire.size() > 4) {
                    wire[1 + rng() % (wire.size() - 3)] ^= 0x01;
                    out.transcript.note("injected frame corruption");
                }
                bool duplicated = duplicate_next;
                duplicate_next = false;
                if (duplicated) wire += st.raw;
                if (!write_bytes(wire)) {
                    conn.close();
                    continue;
                }
                if (!opts.ack_byte) {
                    out.messages_delivered++;
                    break;  // fire-and-forget device
                }
                auto c = read_control(opts.response_timeout_ms);
                if (!c.ok()) {
                    if (!opts.resilient) {
                        out.error = "expectation_failed: no reply (" + c.error().code + ")";
                        return false;
                    }
                    conn.close();
                    continue;
                }
                if (duplicated) {
                    // Swallow the second reply for the duplicated copy.
                    auto extra = read_control(opts.response_timeout_ms);
                    if (extra.ok())
                        out.transcript.note("duplicate frame answered with " + byte_name(extra.value()));
                }
                if (c.value() == *opts.ack_byte) {
                    out.messages_delivered++;
                    if (opts.inter_send_pause_ms > 0)
                        std::this_thread::sleep_for(
                            std::chrono::milliseconds(opts.inter_send_pause_ms));
                    break;
                }
                out.naks_seen++;
                if (++attempts > astm::kMaxRetries) {
                    out.error = "frame rejected " + std::to_string(attempts) + " times";
                    return false;
                }
                out.transcript.note("frame rejected: resending clean");
            }
        }
        out.ok = true;
        return true;
    }
};

}  // namespace

AnalyzerOutcome run_analyzer(AnalyzerKind kind, const std::string& host, int port,
                             const SimScript& script, const AnalyzerOptions& opts) {
    AnalyzerOptions bounded = opts;
    // A resilient analyzer with no deadline would replay forever against a
    // wedged peer; cap it so failures surface with a transcript instead.
    if (bounded.deadline_ms == 0) bounded.deadline_ms = util::now_ms() + 120000;
    Runner runner(kind, host, port, script, bounded);
    switch (kind) {
        case AnalyzerKind::astm: runner.run_astm(); break;
        case AnalyzerKind::hl7: runner.run_hl7(); break;
        case AnalyzerKind::generic: runner.run_generic(); break;
    }
    return std::move(runner.out);
}

}  // namespace gmei::sim
