#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gmei/domain.hpp"
#include "gmei/result.hpp"

namespace gmei::hl7 {

// MLLP envelope bytes.
inline constexpr char kMllpStart = 0x0B;
inline constexpr char kMllpEnd = 0x1C;
inline constexpr char kMllpTrailer = 0x0D;

// Repeats -> components, each component an unescaped string. The
// subcomponent separator is carried through as plain text.
struct Hl7Field {
    std::vector<std::vector<std::string>> repeats;

    static Hl7Field from_text(std::string text);
    const std::string& text() const;
    const std::string& component(std::size_t index) const;  // 1-based, first repeat
    bool operator==(const Hl7Field&) const = default;
};

struct Hl7Segment {
    std::string id;  // 3 characters
    // For MSH, fields[0] holds the raw encoding characters (MSH-2) and
    // fields[i>=1] hold MSH-(i+2); for other segments fields[i] holds
    // field i+1. Use field() for standard HL7 numbering.
    std::vector<Hl7Field> fields;

    const Hl7Field& field(std::size_t number) const;
    void set_field(std::size_t number, Hl7Field value);
    bool operator==(const Hl7Segment&) const = default;
};

struct Hl7Message {
    char field_separator = '|';
    std::string encoding = "^~\\&";  // component, repeat, escape, subcomponent
    std::vector<Hl7Segment> segments;  // first is always MSH

    const Hl7Segment* segment(const std::string& id, std::size_t occurrence = 1) const;
    std::string message_type() const;  // MSH-9 as "ORU^R01"
    std::string control_id() const;    // MSH-10
    bool operator==(const Hl7Message&) const = default;
};

// 0x0B + text + 0x1C + 0x0D. Error: illegal_byte when text contains 0x1C.
Result<std::string> mllp_encode(const std::string& text);

// Streaming splitter: hands back complete message texts, keeps a partial
// trailing envelope, and reports bytes outside envelopes as framing noise.
class MllpDecoder {
public:
    struct Output {
        std::vector<std::string> messages;
        std::vector<std::string> noise;
    };

    Output feed(const std::string& bytes);
    const std::string& remainder() const { return buffer_; }

private:
    std::string buffer_;
};

// Errors: missing_msh, bad_encoding_chars.
Result<Hl7Message> parse_hl7(const std::string& text);

std::string serialize_hl7(const Hl7Message& msg);

// One RawResult per OBX; sample id from OBR-3 falling back to OBR-2.
// Errors: wrong_message_type, obx_without_obr.
Result<std::vector<RawResult>> extract_results_hl7(const Hl7Message& msg, const std::string& device_id);

enum class AckCode { AA, AE, AR };

// MSH with sender/receiver swapped, MSH-9 = ACK, MSA with the original
// control id. Error: missing_msh.
Result<Hl7Message> build_ack(const Hl7Message& original, AckCode code);

// Simulator/test helper: a minimal ORU^R01 carrying one OBR and its OBX rows.
struct OruObservation {
    std::string test_code;
    std::string value;
    std::string unit;
    std::string ref_range;
    std::string flag;
    std::string status = "F";
    std::string observed_at;  // instrument-format YYYYMMDDHHMMSS
};

Hl7Message build_oru(const std::string& sending_app, const std::string& control_id,
                     const std::string& sample_id, const std::vector<OruObservation>& observations);

}  // namespace gmei::hl7
