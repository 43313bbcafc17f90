#include "gmei/astm_transport.hpp"

#include <cstdio>

namespace gmei::astm {

namespace {

char terminator_byte(FrameTerminator t) {
    return t == FrameTerminator::final_ ? kEtx : kEtb;
}

std::string hex2(unsigned value) {
    static const char digits[] = "0123456789ABCDEF";
    std::string out(2, '0');
    out[0] = digits[(value >> 4) & 0xF];
    out[1] = digits[value & 0xF];
    return out;
}

TransportAction send_control(char byte) {
    TransportAction a;
    a.kind = TransportAction::Kind::send_control;
    a.byte = byte;
    return a;
}

TransportAction send_frame(Frame f) {
    TransportAction a;
    a.kind = TransportAction::Kind::send_frame;
    a.frame = std::move(f);
    return a;
}

TransportAction deliver(std::string message) {
    TransportAction a;
    a.kind = TransportAction::Kind::deliver_message;
    a.message = std::move(message);
    return a;
}

TransportAction arm_timer(TimerKind kind, int ms) {
    TransportAction a;
    a.kind = TransportAction::Kind::arm_timer;
    a.timer = kind;
    a.duration_ms = ms;
    return a;
}

TransportAction cancel_timer() {
    TransportAction a;
    a.kind = TransportAction::Kind::cancel_timer;
    return a;
}

TransportAction abort(std::string reason) {
    TransportAction a;
    a.kind = TransportAction::Kind::abort;
    a.reason = std::move(reason);
    return a;
}

}  // namespace

std::string checksum(int frame_number, const std::string& text, FrameTerminator terminator) {
    unsigned sum = static_cast<unsigned char>('0' + (frame_number & 7));
    for (unsigned char c : text) sum += c;
    sum += static_cast<unsigned char>(terminator_byte(terminator));
    return hex2(sum & 0xFF);
}

Result<std::string> encode_frame(const Frame& frame) {
    if (frame.text.size() > kMaxFrameText)
        return Result<std::string>::failure("text_too_long",
                                            "frame text is " + std::to_string(frame.text.size()) + " bytes");
    std::string out;
    out.reserve(frame.text.size() + 7);
    out += kStx;
    out += static_cast<char>('0' + (frame.number & 7));
    out += frame.text;
    out += terminator_byte(frame.terminator);
    out += checksum(frame.number, frame.text, frame.terminator);
    out += kCr;
    out += kLf;
    return out;
}

Result<Frame> decode_frame(const std::string& bytes, int expected_number) {
    if (bytes.size() < 7 || bytes.front() != kStx)
        return Result<Frame>::failure("bad_envelope", "missing STX or truncated frame");
    if (bytes[bytes.size() - 1] != kLf || bytes[bytes.size() - 2] != kCr)
        return Result<Frame>::failure("bad_envelope", "missing CR LF trailer");
    const char term = bytes[bytes.size() - 5];
    if (term != kEtx && term != kEtb)
        return Result<Frame>::failure("bad_envelope", "missing ETX/ETB terminator");
    const char number_char = bytes[1];
    if (number_char < '0' || number_char > '7')
        return Result<Frame>::failure("bad_envelope", "frame number not in 0-7");

    Frame frame;
    frame.number = number_char - '0';
    frame.terminator = term == kEtx ? FrameTerminator::final_ : FrameTerminator::intermediate;
    frame.text = bytes.substr(2, bytes.size() - 7);
    if (frame.text.size() > kMaxFrameText)
        return Result<Frame>::failure("text_too_long",
                                      "frame text is " + std::to_string(frame.text.size()) + " bytes");

    const std::string expected_sum = checksum(frame.number, frame.text, frame.terminator);
    const std::string got_sum = bytes.substr(bytes.size() - 4, 2);
    if (expected_sum != got_sum)
        return Result<Frame>::failure("checksum_mismatch", "expected " + expected_sum + " got " + got_sum);
    if (frame.number != (expected_number & 7))
        return Result<Frame>::failure("sequence_mismatch", "expected " + std::to_string(expected_number & 7) +
                                                               " got " + std::to_string(frame.number));
    return frame;
}

std::vector<Frame> split_message(const std::string& message, int first_number) {
    std::vector<Frame> frames;
    std::size_t offset = 0;
    int number = first_number & 7;
    do {
        Frame f;
        f.number = number;
        f.text = message.substr(offset, kMaxFrameText);
        offset += f.text.size();
        f.terminator = offset < message.size() ? FrameTerminator::intermediate : FrameTerminator::final_;
        frames.push_back(std::move(f));
        number = (number + 1) & 7;
    } while (offset < message.size());
    return frames;
}

TransportEvent TransportEvent::from_byte(char b) {
    TransportEvent e;
    e.kind = Kind::byte_received;
    e.byte = b;
    return e;
}

TransportEvent TransportEvent::from_frame(Frame f) {
    TransportEvent e;
    e.kind = Kind::frame_received;
    e.frame = std::move(f);
    return e;
}

TransportEvent TransportEvent::malformed(std::string code, int number_seen) {
    TransportEvent e;
    e.kind = Kind::frame_malformed;
    e.malformed_code = std::move(code);
    e.malformed_number = number_seen;
    return e;
}

TransportEvent TransportEvent::timer_expired(TimerKind kind) {
    TransportEvent e;
    e.kind = Kind::timer_expired;
    e.timer = kind;
    return e;
}

TransportEvent TransportEvent::submit(std::string message) {
    TransportEvent e;
    e.kind = Kind::submit_message;
    e.message = std::move(message);
    return e;
}

TransportState make_receiver(TimerPolicy policy) {
    TransportState s;
    s.role = Role::receiver;
    s.policy = policy;
    return s;
}

TransportState make_sender(TimerPolicy policy) {
    TransportState s;
    s.role = Role::sender;
    s.policy = policy;
    return s;
}

const std::vector<std::string>& receiver_rules() {
    static const std::vector<std::string> rules = {
        "R1.enq-accept",   "R2.idle-ignore",  "R3.frame-accept", "R4.frame-reject", "R5.eot-deliver",
        "R6.eot-empty",    "R7.eot-partial",  "R8.receive-timeout", "R9.receive-noise",
    };
    return rules;
}

const std::vector<std::string>& sender_rules() {
    static const std::vector<std::string> rules = {
        "S1.submit",
        "S2.establish-ack",
        "S3.contention-yield",
        "S4.establish-busy",
        "S5.establish-timeout-retry",
        "S6.establish-timeout-abort",
        "S7.frame-ack-next",
        "S8.frame-ack-done",
        "S9.frame-retry",
        "S10.frame-retry-exhausted",
        "S11.remote-interrupt",
        "S12.backoff-expired",
        "S13.idle-ignore",
    };
    return rules;
}

StepResult receiver_step(const TransportState& state, const TransportEvent& event) {
    StepResult r{state, {}, ""};
    TransportState& s = r.state;

    if (state.phase == Phase::idle) {
        if (event.kind == TransportEvent::Kind::byte_received && event.byte == kEnq) {
            s.phase = Phase::receive;
            s.expected_frame_number = 1;
            s.received_text.clear();
            s.complete_text_len = 0;
            s.armed_timer = TimerKind::receive;
            r.actions = {send_control(kAck), arm_timer(TimerKind::receive, s.policy.receive_ms)};
            r.rule = "R1.enq-accept";
            return r;
        }
        r.rule = "R2.idle-ignore";
        return r;
    }

    // Phase::receive
    switch (event.kind) {
        case TransportEvent::Kind::frame_received: {
            if (event.frame.number != state.expected_frame_number) {
                // The session normally routes this through frame_malformed;
                // guard here so a direct feed behaves identically.
                s.armed_timer = TimerKind::receive;
                r.actions = {send_control(kNak), arm_timer(TimerKind::receive, s.policy.receive_ms)};
                r.rule = "R4.frame-reject";
                return r;
            }
            s.received_text += event.frame.text;
            if (event.frame.terminator == FrameTerminator::final_)
                s.complete_text_len = s.received_text.size();
            s.expected_frame_number = (s.expected_frame_number + 1) & 7;
            s.armed_timer = TimerKind::receive;
            r.actions = {send_control(kAck), arm_timer(TimerKind::receive, s.policy.receive_ms)};
            r.rule = "R3.frame-accept";
            return r;
        }
        case TransportEvent::Kind::frame_malformed: {
            s.armed_timer = TimerKind::receive;
            r.actions = {send_control(kNak), arm_timer(TimerKind::receive, s.policy.receive_ms)};
            r.rule = "R4.frame-reject";
            return r;
        }
        case TransportEvent::Kind::byte_received: {
            if (event.byte == kEot) {
                s.phase = Phase::idle;
                s.armed_timer.reset();
                const bool has_complete = state.complete_text_len > 0;
                const bool has_partial_tail = state.received_text.size() > state.complete_text_len;
                r.actions.push_back(cancel_timer());
                if (has_complete)
                    r.actions.push_back(deliver(state.received_text.substr(0, state.complete_text_len)));
                if (has_partial_tail) {
                    // Deliver what is complete, abandon the unterminated tail.
                    r.actions.push_back(abort("partial_message"));
                    r.rule = "R7.eot-partial";
                } else {
                    r.rule = has_complete ? "R5.eot-deliver" : "R6.eot-empty";
                }
                s.received_text.clear();
                s.complete_text_len = 0;
                s.expected_frame_number = 1;
                return r;
            }
            r.rule = "R9.receive-noise";
            return r;
        }
        case TransportEvent::Kind::timer_expired: {
            s.phase = Phase::idle;
            s.armed_timer.reset();
            s.received_text.clear();
            s.complete_text_len = 0;
            s.expected_frame_number = 1;
            r.actions = {abort("receive_timeout")};
            r.rule = "R8.receive-timeout";
            return r;
        }
        default:
            r.rule = "R9.receive-noise";
            return r;
    }
}

StepResult sender_step(const TransportState& state, const TransportEvent& event) {
    StepResult r{state, {}, ""};
    TransportState& s = r.state;

    auto start_establish = [&]() {
        s.phase = Phase::establish_wait;
        s.armed_timer = TimerKind::establish;
        r.actions.push_back(send_control(kEnq));
        r.actions.push_back(arm_timer(TimerKind::establish, s.policy.establish_ms));
    };
    auto give_up = [&](const std::string& reason, bool send_eot) {
        s.phase = Phase::idle;
        s.armed_timer.reset();
        s.pending_frames.clear();
        s.message_pending = false;
        s.retry_count = 0;
        r.actions.push_back(abort(reason));
        if (send_eot) r.actions.push_back(send_control(kEot));
    };

    switch (state.phase) {
        case Phase::idle: {
            if (event.kind == TransportEvent::Kind::submit_message) {
                auto frames = split_message(event.message, 1);
                s.pending_frames.assign(frames.begin(), frames.end());
                s.message_pending = true;
                s.retry_count = 0;
                start_establish();
                r.rule = "S1.submit";
                return r;
            }
            if (event.kind == TransportEvent::Kind::timer_expired && event.timer == TimerKind::backoff &&
                state.message_pending) {
                s.retry_count = 0;
                start_establish();
                r.rule = "S12.backoff-expired";
                return r;
            }
            r.rule = "S13.idle-ignore";
            return r;
        }
        case Phase::establish_wait: {
            if (event.kind == TransportEvent::Kind::byte_received) {
                if (event.byte == kAck) {
                    s.phase = Phase::transfer;
                    s.retry_count = 0;
                    s.armed_timer = TimerKind::ack;
                    r.actions = {send_frame(s.pending_frames.front()),
                                 arm_timer(TimerKind::ack, s.policy.ack_ms)};
                    r.rule = "S2.establish-ack";
                    return r;
                }
                if (event.byte == kEnq) {
                    // Contention: the analyzer wins; retry after backoff.
                    s.phase = Phase::idle;
                    s.armed_timer = TimerKind::backoff;
                    r.actions = {arm_timer(TimerKind::backoff, s.policy.contention_backoff_ms)};
                    r.rule = "S3.contention-yield";
                    return r;
                }
                if (event.byte == kNak) {
                    s.phase = Phase::idle;
                    s.armed_timer = TimerKind::backoff;
                    r.actions = {arm_timer(TimerKind::backoff, s.policy.busy_backoff_ms)};
                    r.rule = "S4.establish-busy";
                    return r;
                }
            }
            if (event.kind == TransportEvent::Kind::timer_expired && event.timer == TimerKind::establish) {
                if (state.retry_count < kMaxRetries) {
                    s.retry_count = state.retry_count + 1;
                    start_establish();
                    r.rule = "S5.establish-timeout-retry";
                    return r;
                }
                give_up("establish_timeout", false);
                r.rule = "S6.establish-timeout-abort";
                return r;
            }
            r.rule = "S13.idle-ignore";
            return r;
        }
        case Phase::transfer: {
            if (event.kind == TransportEvent::Kind::byte_received) {
                if (event.byte == kAck) {
                    s.pending_frames.pop_front();
                    s.retry_count = 0;
                    if (!s.pending_frames.empty()) {
                        s.armed_timer = TimerKind::ack;
                        r.actions = {send_frame(s.pending_frames.front()),
                                     arm_timer(TimerKind::ack, s.policy.ack_ms)};
                        r.rule = "S7.frame-ack-next";
                        return r;
                    }
                    s.phase = Phase::idle;
                    s.armed_timer.reset();
                    s.message_pending = false;
                    r.actions = {cancel_timer(), send_control(kEot)};
                    r.rule = "S8.frame-ack-done";
                    return r;
                }
                if (event.byte == kNak) {
                    if (state.retry_count < kMaxRetries) {
                        s.retry_count = state.retry_count + 1;
                        s.armed_timer = TimerKind::ack;
                        r.actions = {send_frame(s.pending_frames.front()),
                                     arm_timer(TimerKind::ack, s.policy.ack_ms)};
                        r.rule = "S9.frame-retry";
                        return r;
                    }
                    give_up("max_retries", true);
                    r.rule = "S10.frame-retry-exhausted";
                    return r;
                }
                if (event.byte == kEot) {
                    give_up("remote_interrupt", false);
                    r.rule = "S11.remote-interrupt";
                    return r;
                }
            }
            if (event.kind == TransportEvent::Kind::timer_expired && event.timer == TimerKind::ack) {
                if (state.retry_count < kMaxRetries) {
                    s.retry_count = state.retry_count + 1;
                    s.armed_timer = TimerKind::ack;
                    r.actions = {send_frame(s.pending_frames.front()),
                                 arm_timer(TimerKind::ack, s.policy.ack_ms)};
                    r.rule = "S9.frame-retry";
                    return r;
                }
                give_up("max_retries", true);
                r.rule = "S10.frame-retry-exhausted";
                return r;
            }
            r.rule = "S13.idle-ignore";
            return r;
        }
        default:
            r.rule = "S13.idle-ignore";
            return r;
    }
}

}  // namespace gmei::astm
