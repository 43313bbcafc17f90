#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "gmei/generic_framing.hpp"

using namespace gmei;
using namespace gmei::gen;

namespace {

FrameDescriptor semicolon_descriptor() {
    FrameDescriptor d;
    d.format_id = "TEST-SEMI";
    d.field_separator = ';';
    d.field_order = {FieldRole::sample_id, FieldRole::test_code, FieldRole::value, FieldRole::unit};
    return d;
}

FileDescriptor upl_descriptor(int skip = 0) {
    FileDescriptor d;
    d.format_id = "TEST-UPL";
    d.column_separator = '\t';
    d.header_lines_to_skip = skip;
    d.field_order = {FieldRole::sample_id, FieldRole::test_code, FieldRole::value,
                     FieldRole::unit,      FieldRole::ref_range, FieldRole::flag};
    return d;
}

}  // namespace

TEST_CASE("bcc worked examples") {
    CHECK(bcc("AB", BccKind::xor_) == 0x03);         // 0x41 ^ 0x42
    CHECK(bcc("", BccKind::xor_) == 0x00);
    CHECK(bcc("AB", BccKind::sum_mod_256) == 0x83);  // 65 + 66 = 131
}

TEST_CASE("bcc matches naive oracles on 10000 random payloads") {
    std::mt19937_64 rng(13);
    for (int i = 0; i < 10000; ++i) {
        std::string payload;
        const std::size_t len = rng() % 64;
        for (std::size_t k = 0; k < len; ++k) payload += static_cast<char>(rng() % 256);
        unsigned x = 0, s = 0;
        for (unsigned char c : payload) {
            x ^= c;
            s = (s + c) % 256;
        }
        CHECK(bcc(payload, BccKind::xor_) == static_cast<unsigned char>(x));
        CHECK(bcc(payload, BccKind::sum_mod_256) == static_cast<unsigned char>(s));
    }
}

TEST_CASE("descriptor binding decodes a separated frame") {
    FrameDescriptor d = semicolon_descriptor();
    std::string frame = std::string(1, d.start_byte) + "SAMP001;GLU;105;mg/dL" + d.end_byte;
    auto results = decode_generic(frame, d, "DEV-3");
    REQUIRE(results.ok());
    REQUIRE(results.value().size() == 1);
    const RawResult& r = results.value()[0];
    CHECK(r.sample_id == "SAMP001");
    CHECK(r.machine_test_code == "GLU");
    CHECK(r.value == "105");
    CHECK(*r.unit == "mg/dL");
    CHECK(r.device_id == "DEV-3");
}

TEST_CASE("wrong BCC byte is a bcc_mismatch") {
    FrameDescriptor d = semicolon_descriptor();
    d.has_bcc = true;
    d.bcc_kind = BccKind::xor_;
    std::string payload = "SAMP001;GLU;105;mg/dL";
    std::string frame = std::string(1, d.start_byte) + payload + d.end_byte;
    frame += static_cast<char>(bcc(payload, BccKind::xor_) ^ 0xFF);
    auto results = decode_generic(frame, d, "DEV-3");
    REQUIRE_FALSE(results.ok());
    CHECK(results.error().code == "bcc_mismatch");
}

TEST_CASE("a frame missing a required field is rejected") {
    FrameDescriptor d = semicolon_descriptor();
    std::string frame = std::string(1, d.start_byte) + "SAMP001;GLU" + d.end_byte;  // no value
    auto results = decode_generic(frame, d, "DEV-3");
    REQUIRE_FALSE(results.ok());
    CHECK(results.error().code == "missing_required_field");
}

TEST_CASE("garbage around frames is a bad_envelope") {
    FrameDescriptor d = semicolon_descriptor();
    CHECK(decode_generic("junk", d, "D").error().code == "bad_envelope");
    CHECK(decode_generic(std::string(1, d.start_byte) + "unterminated", d, "D").error().code ==
          "bad_envelope");
}

TEST_CASE("repeated frames yield repeated results") {
    FrameDescriptor d = semicolon_descriptor();
    const std::string one = encode_generic({{FieldRole::sample_id, "S1"},
                                            {FieldRole::test_code, "WBC"},
                                            {FieldRole::value, "7.2"}},
                                           d);
    const std::string two = encode_generic({{FieldRole::sample_id, "S2"},
                                            {FieldRole::test_code, "WBC"},
                                            {FieldRole::value, "8.0"}},
                                           d);
    auto results = decode_generic(one + "\r\n" + two, d, "D");
    REQUIRE(results.ok());
    REQUIRE(results.value().size() == 2);
    CHECK(results.value()[0].sample_id == "S1");
    CHECK(results.value()[1].sample_id == "S2");
}

TEST_CASE("encode then decode recovers every expressible field set") {
    std::mt19937_64 rng(17);
    for (int round = 0; round < 500; ++round) {
        FrameDescriptor d = semicolon_descriptor();
        d.has_bcc = rng() % 2;
        d.bcc_kind = rng() % 2 ? BccKind::xor_ : BccKind::sum_mod_256;
        d.field_order.push_back(FieldRole::ref_range);
        d.field_order.push_back(FieldRole::flag);
        d.field_order.push_back(FieldRole::status);

        auto token = [&](std::size_t max_len) {
            std::string out;
            std::size_t len = 1 + rng() % max_len;
            for (std::size_t i = 0; i < len; ++i) {
                char c;
                do {
                    c = static_cast<char>('!' + rng() % 94);
                } while (c == d.field_separator || c == d.start_byte || c == d.end_byte);
                out += c;
            }
            return out;
        };

        std::map<FieldRole, std::string> values{{FieldRole::sample_id, token(12)},
                                                {FieldRole::test_code, token(6)},
                                                {FieldRole::value, token(8)},
                                                {FieldRole::unit, token(5)},
                                                {FieldRole::ref_range, token(8)},
                                                {FieldRole::flag, "N"},
                                                {FieldRole::status, "F"}};
        auto results = decode_generic(encode_generic(values, d), d, "D");
        REQUIRE(results.ok());
        const RawResult& r = results.value()[0];
        CHECK(r.sample_id == values[FieldRole::sample_id]);
        CHECK(r.machine_test_code == values[FieldRole::test_code]);
        CHECK(r.value == values[FieldRole::value]);
        CHECK(*r.unit == values[FieldRole::unit]);
        CHECK(*r.ref_range_raw == values[FieldRole::ref_range]);
        CHECK(*r.abnormal_flag == "N");
        CHECK(*r.result_status == "F");
    }
}

TEST_CASE("fixed-width frames cut on column widths") {
    FrameDescriptor d;
    d.format_id = "TEST-FW";
    d.has_bcc = true;
    d.bcc_kind = BccKind::sum_mod_256;
    d.field_widths = {10, 6, 8};
    d.field_order = {FieldRole::sample_id, FieldRole::test_code, FieldRole::value};
    auto frame = encode_generic(
        {{FieldRole::sample_id, "S77"}, {FieldRole::test_code, "HGB"}, {FieldRole::value, "13.5"}}, d);
    auto results = decode_generic(frame, d, "D");
    REQUIRE(results.ok());
    CHECK(results.value()[0].sample_id == "S77");
    CHECK(results.value()[0].machine_test_code == "HGB");
    CHECK(results.value()[0].value == "13.5");
}

TEST_CASE("file ingestion accepts every valid line") {
    const std::string content =
        "S1\tABO\tA POS\t\t\tN\n"
        "S2\tABO\tO NEG\t\t\tN\n"
        "S3\tABO\tB POS\t\t\tN\n";
    auto outcome = ingest_file(content, upl_descriptor(), "DEV-Q", "tech1");
    REQUIRE(outcome.ok());
    CHECK(outcome.value().results.size() == 3);
    CHECK(outcome.value().rejected.empty());
    for (const auto& r : outcome.value().results) {
        CHECK(r.source == ResultSource::file);
        CHECK(*r.operator_id == "tech1");
    }
}

TEST_CASE("bad lines go to the report with their line numbers") {
    const std::string content =
        "S1\tABO\tA POS\n"
        "S2\tABO\n"  // missing value
        "S3\tABO\tB POS\n";
    auto outcome = ingest_file(content, upl_descriptor(), "DEV-Q", "tech1");
    REQUIRE(outcome.ok());
    CHECK(outcome.value().results.size() == 2);
    REQUIRE(outcome.value().rejected.size() == 1);
    CHECK(outcome.value().rejected[0].line_number == 2);
    CHECK(outcome.value().rejected[0].reason.find("missing_required_field") != std::string::npos);
}

TEST_CASE("header lines are skipped, never parsed") {
    const std::string content =
        "SampleID\tTest\tValue\n"
        "S1\tABO\tA POS\n";
    auto outcome = ingest_file(content, upl_descriptor(1), "DEV-Q", "tech1");
    REQUIRE(outcome.ok());
    CHECK(outcome.value().results.size() == 1);
    CHECK(outcome.value().rejected.empty());
}

TEST_CASE("empty files are an error") {
    auto outcome = ingest_file("", upl_descriptor(), "DEV-Q", "tech1");
    REQUIRE_FALSE(outcome.ok());
    CHECK(outcome.error().code == "empty_file");
}

TEST_CASE("accepted plus rejected equals total non-skipped lines") {
    std::mt19937_64 rng(23);
    for (int round = 0; round < 200; ++round) {
        std::string content = "header line\n";
        int lines = 0;
        for (int i = 0; i < static_cast<int>(rng() % 30); ++i) {
            if (rng() % 4 == 0) {
                content += "bad line without tabs\n";
            } else {
                content += "S" + std::to_string(i) + "\tT\t" + std::to_string(rng() % 100) + "\n";
            }
            ++lines;
        }
        if (lines == 0) continue;
        auto outcome = ingest_file(content, upl_descriptor(1), "D", "op");
        REQUIRE(outcome.ok());
        CHECK(static_cast<int>(outcome.value().results.size() + outcome.value().rejected.size()) ==
              lines);
    }
}
