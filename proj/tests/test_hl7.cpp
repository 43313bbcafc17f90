#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "gmei/hl7.hpp"

using namespace gmei;
using namespace gmei::hl7;

namespace {

const std::string kOru =
    "MSH|^~\\&|AU2700|LAB|GMEI|HOSP|20240101||ORU^R01|MSG001|P|2.3\r"
    "PID|1\r"
    "OBR|1|PLACER01|SAMP001\r"
    "OBX|1|NM|GLU^Glucose||105|mg/dL|70-110|N|||F|||20240102030405\r";

Hl7Message random_message(std::mt19937_64& rng) {
    std::vector<OruObservation> observations;
    const int n = 1 + static_cast<int>(rng() % 4);
    for (int i = 0; i < n; ++i) {
        OruObservation obs;
        obs.test_code = "T" + std::to_string(rng() % 50);
        obs.value = std::to_string(rng() % 1000);
        obs.unit = "u" + std::to_string(rng() % 9);
        obs.ref_range = std::to_string(rng() % 50) + "-" + std::to_string(50 + rng() % 50);
        obs.flag = "N";
        observations.push_back(std::move(obs));
    }
    return build_oru("APP" + std::to_string(rng() % 5), "MSG" + std::to_string(rng() % 100000),
                     "S" + std::to_string(rng() % 10000), observations);
}

}  // namespace

TEST_CASE("mllp wraps text in 0x0B .. 0x1C 0x0D") {
    auto framed = mllp_encode("MSH|stuff");
    REQUIRE(framed.ok());
    CHECK(framed.value().front() == 0x0B);
    CHECK(framed.value()[framed.value().size() - 2] == 0x1C);
    CHECK(framed.value().back() == 0x0D);

    auto empty = mllp_encode("");
    REQUIRE(empty.ok());
    CHECK(empty.value() == std::string({0x0B, 0x1C, 0x0D}));

    auto bad = mllp_encode(std::string("x") + char(0x1C));
    REQUIRE_FALSE(bad.ok());
    CHECK(bad.error().code == "illegal_byte");
}

TEST_CASE("mllp decoder splits envelopes and keeps partial trailers") {
    MllpDecoder decoder;
    std::string two = mllp_encode("one").value() + mllp_encode("two").value();
    auto out = decoder.feed(two);
    REQUIRE(out.messages.size() == 2);
    CHECK(out.messages[0] == "one");
    CHECK(out.messages[1] == "two");
    CHECK(decoder.remainder().empty());

    std::string partial = mllp_encode("whole").value();
    std::string tail = mllp_encode("half").value();
    out = decoder.feed(partial + tail.substr(0, 3));
    REQUIRE(out.messages.size() == 1);
    CHECK(out.messages[0] == "whole");
    CHECK_FALSE(decoder.remainder().empty());
    out = decoder.feed(tail.substr(3));
    REQUIRE(out.messages.size() == 1);
    CHECK(out.messages[0] == "half");
}

TEST_CASE("bytes outside envelopes are reported as framing noise") {
    MllpDecoder decoder;
    auto out = decoder.feed("garbage" + mllp_encode("msg").value());
    REQUIRE(out.noise.size() == 1);
    CHECK(out.noise[0] == "garbage");
    REQUIRE(out.messages.size() == 1);
    CHECK(out.messages[0] == "msg");
}

TEST_CASE("mllp round-trip recovers every legal payload") {
    std::mt19937_64 rng(4);
    for (int i = 0; i < 1000; ++i) {
        std::string text;
        const std::size_t len = rng() % 200;
        for (std::size_t k = 0; k < len; ++k) {
            char c;
            do {
                c = static_cast<char>(rng() % 256);
            } while (c == 0x1C || c == 0x0B);
            text += c;
        }
        MllpDecoder decoder;
        auto out = decoder.feed(mllp_encode(text).value());
        REQUIRE(out.messages.size() == 1);
        CHECK(out.messages[0] == text);
    }
}

TEST_CASE("parse reads MSH routing and type fields") {
    auto msg = parse_hl7(kOru);
    REQUIRE(msg.ok());
    CHECK(msg.value().message_type() == "ORU^R01");
    CHECK(msg.value().control_id() == "MSG001");
    CHECK(msg.value().segments.front().field(3).text() == "AU2700");
    CHECK(msg.value().segments.front().field(12).text() == "2.3");
}

TEST_CASE("text without MSH is rejected") {
    CHECK(parse_hl7("PID|1\r").error().code == "missing_msh");
    CHECK(parse_hl7("MSH|^~&|X\r").error().code == "bad_encoding_chars");  // 3 chars
}

TEST_CASE("serialize then parse is the identity on random messages") {
    std::mt19937_64 rng(9);
    for (int i = 0; i < 1000; ++i) {
        Hl7Message msg = random_message(rng);
        auto text = serialize_hl7(msg);
        auto back = parse_hl7(text);
        REQUIRE(back.ok());
        CHECK(back.value() == msg);
        CHECK(serialize_hl7(back.value()) == text);
    }
}

TEST_CASE("delimiter characters in components escape and round-trip") {
    Hl7Message msg = build_oru("APP", "MSG9", "S|1^2~3\\4", {{"GLU", "10", "", "", "", "F", ""}});
    auto text = serialize_hl7(msg);
    auto back = parse_hl7(text);
    REQUIRE(back.ok());
    CHECK(back.value().segment("OBR")->field(2).text() == "S|1^2~3\\4");
}

TEST_CASE("unknown escape sequences pass through verbatim") {
    const std::string wire = "MSH|^~\\&|APP|L|G|H|1||ORU^R01|M1|P|2.3\rOBR|1|\\T\\x|S1\r";
    auto msg = parse_hl7(wire);
    REQUIRE(msg.ok());
    CHECK(msg.value().segment("OBR")->field(2).text() == "\\T\\x");
    CHECK(serialize_hl7(msg.value()) == wire);
}

TEST_CASE("extract pulls one raw result per OBX with OBR sample inheritance") {
    auto msg = parse_hl7(kOru);
    REQUIRE(msg.ok());
    auto results = extract_results_hl7(msg.value(), "DEV-9");
    REQUIRE(results.ok());
    REQUIRE(results.value().size() == 1);
    const RawResult& r = results.value()[0];
    CHECK(r.device_id == "DEV-9");
    CHECK(r.sample_id == "SAMP001");  // OBR-3 filler wins
    CHECK(r.machine_test_code == "GLU");
    CHECK(r.value == "105");
    CHECK(*r.unit == "mg/dL");
    CHECK(*r.ref_range_raw == "70-110");
    CHECK(*r.abnormal_flag == "N");
    CHECK(*r.result_status == "F");
    CHECK(*r.observed_at == "2024-01-02T03:04:05Z");
}

TEST_CASE("OBR-2 placer is the fallback sample id") {
    const std::string oru =
        "MSH|^~\\&|A|L|G|H|1||ORU^R01|M2|P|2.3\rOBR|1|PLACER77\rOBX|1|NM|X^X||1||||||F\r";
    auto results = extract_results_hl7(parse_hl7(oru).value(), "D");
    REQUIRE(results.ok());
    CHECK(results.value()[0].sample_id == "PLACER77");
}

TEST_CASE("three OBX segments share the OBR sample") {
    Hl7Message msg = build_oru("A", "M3", "SAMP77",
                               {{"GLU", "1", "", "", "", "F", ""},
                                {"UREA", "2", "", "", "", "F", ""},
                                {"NA", "3", "", "", "", "F", ""}});
    auto results = extract_results_hl7(msg, "D");
    REQUIRE(results.ok());
    REQUIRE(results.value().size() == 3);
    for (const auto& r : results.value()) CHECK(r.sample_id == "SAMP77");
}

TEST_CASE("non-ORU messages are refused by the extractor") {
    auto oru = parse_hl7(kOru).value();
    auto ack = build_ack(oru, AckCode::AA).value();
    auto results = extract_results_hl7(ack, "D");
    REQUIRE_FALSE(results.ok());
    CHECK(results.error().code == "wrong_message_type");
}

TEST_CASE("an OBX before any OBR is an error") {
    const std::string oru = "MSH|^~\\&|A|L|G|H|1||ORU^R01|M4|P|2.3\rOBX|1|NM|X^X||1||||||F\r";
    auto results = extract_results_hl7(parse_hl7(oru).value(), "D");
    REQUIRE_FALSE(results.ok());
    CHECK(results.error().code == "obx_without_obr");
}

TEST_CASE("build_ack swaps routing and echoes the control id") {
    auto oru = parse_hl7(kOru).value();
    auto ack = build_ack(oru, AckCode::AA).value();
    const Hl7Segment& msh = ack.segments.front();
    CHECK(msh.field(3).text() == "GMEI");    // swapped sender/receiver
    CHECK(msh.field(4).text() == "HOSP");
    CHECK(msh.field(5).text() == "AU2700");
    CHECK(msh.field(6).text() == "LAB");
    CHECK(ack.message_type() == "ACK");
    const Hl7Segment* msa = ack.segment("MSA");
    REQUIRE(msa);
    CHECK(msa->field(1).text() == "AA");
    CHECK(msa->field(2).text() == "MSG001");
    CHECK(serialize_hl7(ack).find("MSA|AA|MSG001") != std::string::npos);

    auto ae = build_ack(oru, AckCode::AE).value();
    CHECK(serialize_hl7(ae).find("MSA|AE|MSG001") != std::string::npos);
}
