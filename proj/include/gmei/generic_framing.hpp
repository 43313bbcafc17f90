#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gmei/domain.hpp"
#include "gmei/result.hpp"

namespace gmei::gen {

enum class BccKind { xor_, sum_mod_256 };

// What each positional field of a proprietary frame or file row means.
enum class FieldRole { sample_id, test_code, value, unit, ref_range, flag, status, timestamp, ignore };

std::string to_string(FieldRole role);
std::optional<FieldRole> field_role_from_string(const std::string& s);
std::string to_string(BccKind kind);
std::optional<BccKind> bcc_kind_from_string(const std::string& s);

// Proprietary serial formats are data, not code: a new instrument is a
// registry entry. Fields are cut either on field_separator or, when
// field_widths is non-empty, on fixed-width columns.
struct FrameDescriptor {
    std::string format_id;
    char start_byte = 0x02;  // STX
    char end_byte = 0x03;    // ETX
    bool has_bcc = false;
    BccKind bcc_kind = BccKind::xor_;
    char field_separator = ';';
    std::vector<int> field_widths;  // fixed-width layout when non-empty
    std::vector<FieldRole> field_order;
    std::optional<char> ack_byte;

    Status validate() const;
};

// Log-file layouts (.upl, .txt) for bulk ingestion.
struct FileDescriptor {
    std::string format_id;
    std::string extension = ".upl";
    char line_separator = '\n';
    char column_separator = '\t';
    std::vector<int> column_widths;  // fixed-width alternative
    std::vector<FieldRole> field_order;
    int header_lines_to_skip = 0;

    Status validate() const;
};

// xor -> XOR of all payload bytes; sum_mod_256 -> byte sum mod 256.
unsigned char bcc(const std::string& payload, BccKind kind);

// Decodes every complete start..end envelope in `bytes` (BCC byte follows
// the end byte when has_bcc). One frame yields one result. CR/LF between
// envelopes is tolerated; anything else is a bad_envelope.
// Errors: bad_envelope, bcc_mismatch, missing_required_field.
Result<std::vector<RawResult>> decode_generic(const std::string& bytes, const FrameDescriptor& desc,
                                              const std::string& device_id);

// Inverse of decode_generic for one frame; the simulator and the
// round-trip tests build wire bytes with it.
std::string encode_generic(const std::map<FieldRole, std::string>& values, const FrameDescriptor& desc);

struct RejectedLine {
    int line_number = 0;  // 1-based over the whole file
    std::string reason;
};

struct IngestOutcome {
    std::vector<RawResult> results;
    std::vector<RejectedLine> rejected;
};

// Per-line parsing with field_order binding; bad lines land in the report
// with their line numbers. Error: empty_file.
Result<IngestOutcome> ingest_file(const std::string& content, const FileDescriptor& desc,
                                  const std::string& device_id, const std::string& operator_id);

}  // namespace gmei::gen
