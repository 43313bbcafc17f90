#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "gmei/result.hpp"

namespace gmei::astm {

// Control bytes, exactly as they appear on the wire.
inline constexpr char kEnq = 0x05;
inline constexpr char kAck = 0x06;
inline constexpr char kNak = 0x15;
inline constexpr char kEot = 0x04;
inline constexpr char kStx = 0x02;
inline constexpr char kEtx = 0x03;
inline constexpr char kEtb = 0x17;
inline constexpr char kCr = 0x0D;
inline constexpr char kLf = 0x0A;

inline constexpr std::size_t kMaxFrameText = 240;
inline constexpr int kMaxRetries = 6;

enum class FrameTerminator { intermediate, final_ };  // ETB vs ETX

// One low-level transport frame. `text` includes any record-terminating CR;
// it must not contain STX/ETX/ETB bytes.
struct Frame {
    int number = 1;  // 0..7
    std::string text;
    FrameTerminator terminator = FrameTerminator::final_;

    bool operator==(const Frame&) const = default;
};

// (sum of bytes from the ASCII frame-number character through ETX/ETB
// inclusive) mod 256, rendered as two uppercase hex digits.
std::string checksum(int frame_number, const std::string& text, FrameTerminator terminator);

// STX, frame number, text, ETB/ETX, checksum, CR, LF — in that exact order.
Result<std::string> encode_frame(const Frame& frame);

// Verifies envelope, checksum, and sequence number against `expected_number`.
// Error codes: bad_envelope, checksum_mismatch, sequence_mismatch, text_too_long.
Result<Frame> decode_frame(const std::string& bytes, int expected_number);

// Splits a message into <=240-byte frames (ETB intermediates, ETX last),
// numbered from `first_number` mod 8.
std::vector<Frame> split_message(const std::string& message, int first_number = 1);

// ---------------------------------------------------------------------------
// Pure event-driven state machine. No sockets or clocks live here: the
// hosting session feeds events and executes the emitted actions.

enum class Role { receiver, sender };
enum class Phase { idle, establish_wait, transfer, receive };

enum class TimerKind { establish, ack, receive, backoff };

// Durations the machine asks the session to arm. Defaults follow the E1381
// convention; tests and simulations shrink them.
struct TimerPolicy {
    int establish_ms = 15000;
    int ack_ms = 15000;
    int receive_ms = 30000;
    int contention_backoff_ms = 20000;  // gateway yields, analyzer wins
    int busy_backoff_ms = 10000;        // receiver answered ENQ with NAK
};

struct TransportEvent {
    enum class Kind { byte_received, frame_received, frame_malformed, timer_expired, submit_message };
    Kind kind;
    char byte = 0;                       // byte_received
    Frame frame;                         // frame_received
    std::string malformed_code;          // frame_malformed: decode_frame error code
    int malformed_number = -1;           // frame number seen, when decodable
    TimerKind timer = TimerKind::receive;  // timer_expired
    std::string message;                 // submit_message

    static TransportEvent from_byte(char b);
    static TransportEvent from_frame(Frame f);
    static TransportEvent malformed(std::string code, int number_seen = -1);
    static TransportEvent timer_expired(TimerKind kind);
    static TransportEvent submit(std::string message);
};

struct TransportAction {
    enum class Kind { send_control, send_frame, deliver_message, arm_timer, cancel_timer, abort };
    Kind kind;
    char byte = 0;            // send_control
    Frame frame;              // send_frame
    std::string message;      // deliver_message
    TimerKind timer = TimerKind::receive;
    int duration_ms = 0;      // arm_timer
    std::string reason;       // abort
};

struct TransportState {
    Role role = Role::receiver;
    Phase phase = Phase::idle;
    int expected_frame_number = 1;  // receiver: next number; advances 1 mod 8
    int retry_count = 0;            // bounded by kMaxRetries
    std::deque<Frame> pending_frames;
    std::string received_text;      // all accepted frame texts, in order
    std::size_t complete_text_len = 0;  // prefix ending at the last final frame
    bool message_pending = false;   // sender: submit accepted, not yet done
    std::optional<TimerKind> armed_timer;
    TimerPolicy policy;
};

struct StepResult {
    TransportState state;
    std::vector<TransportAction> actions;
    std::string rule;  // fired state-table row, for conformance coverage
};

// Pure transition functions; identical (state, event) yields identical output.
StepResult receiver_step(const TransportState& state, const TransportEvent& event);
StepResult sender_step(const TransportState& state, const TransportEvent& event);

// Every row of the receiver/sender state tables; conformance tests assert
// full coverage against these lists.
const std::vector<std::string>& receiver_rules();
const std::vector<std::string>& sender_rules();

TransportState make_receiver(TimerPolicy policy = {});
TransportState make_sender(TimerPolicy policy = {});

}  // namespace gmei::astm
