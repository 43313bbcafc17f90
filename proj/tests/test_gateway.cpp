#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <thread>

#include <httplib.h>

#include "gmei/astm_records.hpp"
#include "gmei/gateway.hpp"
#include "gmei/hl7.hpp"
#include "gmei/net.hpp"
#include "gmei/simkit.hpp"
#include "gmei/util.hpp"

using namespace gmei;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("gmei-gw-" + std::to_string(::getpid()) + "-" + std::to_string(counter()++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    static int& counter() {
        static int c = 0;
        return c;
    }
};

sim::AnalyzerOptions test_opts() {
    sim::AnalyzerOptions opts;
    opts.deadline_ms = util::now_ms() + 20000;
    return opts;
}

bool wait_until(const std::function<bool()>& done, int budget_ms) {
    const std::int64_t deadline = util::now_ms() + budget_ms;
    while (util::now_ms() < deadline) {
        if (done()) return true;
        std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
    return done();
}

// One gateway + HIS stub + registry, wired through a temp dir.
struct Rig {
    TempDir dir;
    sim::HisStub stub{"127.0.0.1", 0};
    std::unique_ptr<GatewayService> service;
    GatewayConfig config;
    int astm_port = 0, hl7_port = 0, gen_port = 0;

    explicit Rig(bool fast_timers = true) {
        REQUIRE_FALSE(stub.start());
        astm_port = net::free_port();
        hl7_port = net::free_port();
        gen_port = net::free_port();

        Registry registry((dir.path / "registry").string());
        REQUIRE_FALSE(registry.load());

        DeviceProfile astm;
        astm.device_id = "AU2700-1";
        astm.display_name = "AU2700";
        astm.protocol = Protocol::astm;
        astm.mode = DeviceMode::bidirectional;
        astm.format_id = "FMT-ASTM-01";
        astm.listen_endpoint = "127.0.0.1:" + std::to_string(astm_port);
        astm.file_format_id = "FMT-UPL-01";
        astm.comm_settings.timeout_ms = 3000;
        REQUIRE(registry.register_device(astm).ok());

        DeviceProfile hl7;
        hl7.device_id = "CENTAUR-1";
        hl7.protocol = Protocol::hl7;
        hl7.mode = DeviceMode::unidirectional;
        hl7.format_id = "FMT-HL7-01";
        hl7.listen_endpoint = "127.0.0.1:" + std::to_string(hl7_port);
        REQUIRE(registry.register_device(hl7).ok());

        DeviceProfile gen;
        gen.device_id = "XP100-1";
        gen.protocol = Protocol::generic;
        gen.mode = DeviceMode::unidirectional;
        gen.format_id = "FMT-GEN-CLASSA-01";
        gen.listen_endpoint = "127.0.0.1:" + std::to_string(gen_port);
        REQUIRE(registry.register_device(gen).ok());

        for (const char* dev : {"AU2700-1", "CENTAUR-1", "XP100-1"}) {
            TestParameterMapping glu{dev, "GLU", "T-GLU-SER", std::string("mmol/L"),
                                     *Decimal::parse("0.0555")};
            TestParameterMapping urea{dev, "UREA", "T-UREA-SER", std::nullopt, *Decimal::parse("1")};
            TestParameterMapping abo{dev, "ABO", "T-ABO-GRP", std::nullopt, *Decimal::parse("1")};
            REQUIRE_FALSE(registry.upsert_mapping(glu));
            REQUIRE_FALSE(registry.upsert_mapping(urea));
            REQUIRE_FALSE(registry.upsert_mapping(abo));
        }
        registry.upsert_user({"tech1", "Technician", UserRecord::Role::technician});

        config.gateway_id = "GW-T";
        config.registry_dir = (dir.path / "registry").string();
        config.queue_path = (dir.path / "queue.log").string();
        config.deadletter_path = (dir.path / "deadletters.jsonl").string();
        config.his_base_url = "http://127.0.0.1:" + std::to_string(stub.port());
        config.control_endpoint = "127.0.0.1:" + std::to_string(net::free_port());
        config.flush_idle_ms = 50;
        config.backoff_base_ms = 30;
        config.backoff_cap_ms = 200;
        config.worklist_budget_ms = 2000;
        if (fast_timers) {
            config.astm_timers.establish_ms = 1500;
            config.astm_timers.ack_ms = 1500;
            config.astm_timers.receive_ms = 3000;
            config.astm_timers.contention_backoff_ms = 300;
            config.astm_timers.busy_backoff_ms = 200;
        }
        service = std::make_unique<GatewayService>(config);
        REQUIRE_FALSE(service->start());
    }

    ~Rig() {
        if (service) service->shutdown();
        stub.stop();
    }
};

std::string sample_astm_message(const std::string& sample) {
    std::vector<astm::ResultSpec> specs{
        {"GLU", "105", "mg/dL", "70^110", "N", "F", "op7", "20240102030405"},
        {"UREA", "32", "mg/dL", "15^45", "N", "F", "op7", "20240102030405"},
    };
    return astm::serialize_message(astm::build_result_message("AU2700", sample, specs)).value();
}

}  // namespace

TEST_CASE("ASTM upload end to end: per-frame ACKs, normalization, HIS delivery") {
    Rig rig;
    auto script = sim::astm_upload_script({sample_astm_message("SAMP001")});
    auto outcome = sim::run_analyzer(sim::AnalyzerKind::astm, "127.0.0.1", rig.astm_port, script, test_opts());
    REQUIRE_MESSAGE(outcome.ok, outcome.error);
    CHECK(sim::check_ack_discipline(outcome.transcript).empty());

    REQUIRE(wait_until([&] { return rig.stub.ledger_size() == 2; }, 8000));
    auto entries = rig.stub.ledger_for("AU2700-1");
    REQUIRE(entries.size() == 2);
    const auto& glu = entries[0].observation;
    CHECK(glu["sample_id"] == "SAMP001");
    CHECK(glu["test_id"] == "T-GLU-SER");
    CHECK(glu["machine_test_code"] == "GLU");
    CHECK(glu["value"].dump() == "5.8275");  // 105 * 0.0555, exact
    CHECK(glu["unit"] == "mmol/L");
    CHECK(glu["ref_low"].dump() == "70");
    CHECK(glu["ref_high"].dump() == "110");
    CHECK(glu["abnormal_flag"] == "N");
    CHECK(glu["result_status"] == "final");
    CHECK(glu["observed_at"] == "2024-01-02T03:04:05Z");
    CHECK(glu["operator_id"] == "op7");
    CHECK(glu["sequence"] == 1);
    const auto& urea = entries[1].observation;
    CHECK(urea["test_id"] == "T-UREA-SER");
    CHECK(urea["value"].dump() == "32");  // factor 1 passes through
    CHECK(urea["unit"] == "mg/dL");       // no canonical unit mapped
    CHECK(urea["sequence"] == 2);
}

TEST_CASE("corrupted frames are NAKed and recovered by resend") {
    Rig rig;
    sim::SimScript script;
    const std::string message = sample_astm_message("SAMP002");
    script.steps.push_back(sim::ScriptStep::send_control_step(astm::kEnq));
    script.steps.push_back(sim::ScriptStep::expect_control_step(astm::kAck));
    bool first = true;
    for (const auto& frame : astm::split_message(message, 1)) {
        if (first) {
            script.steps.push_back(
                sim::ScriptStep::fault_step(sim::ScriptStep::Fault::corrupt_next_frame));
            first = false;
        }
        script.steps.push_back(sim::ScriptStep::send_frame_step(
            frame.number, frame.text, frame.terminator == astm::FrameTerminator::final_));
        script.steps.push_back(sim::ScriptStep::expect_control_step(astm::kAck));
    }
    script.steps.push_back(sim::ScriptStep::send_control_step(astm::kEot));
    script.steps.push_back(sim::ScriptStep::send_control_step(astm::kEnq));
    script.steps.push_back(sim::ScriptStep::expect_control_step(astm::kAck));
    script.steps.push_back(sim::ScriptStep::send_control_step(astm::kEot));

    auto outcome = sim::run_analyzer(sim::AnalyzerKind::astm, "127.0.0.1", rig.astm_port, script, test_opts());
    REQUIRE_MESSAGE(outcome.ok, outcome.error);
    CHECK(outcome.naks_seen == 1);  // transcript shows NAK then successful resend
    REQUIRE(wait_until([&] { return rig.stub.ledger_size() == 2; }, 8000));
}

TEST_CASE("duplicated frames are rejected without corrupting the stream") {
    Rig rig;
    sim::SimScript script;
    const std::string message = sample_astm_message("SAMP003");
    script.steps.push_back(sim::ScriptStep::send_control_step(astm::kEnq));
    script.steps.push_back(sim::ScriptStep::expect_control_step(astm::kAck));
    bool first = true;
    for (const auto& frame : astm::split_message(message, 1)) {
        if (first) {
            script.steps.push_back(
                sim::ScriptStep::fault_step(sim::ScriptStep::Fault::duplicate_next_send));
            first = false;
        }
        script.steps.push_back(sim::ScriptStep::send_frame_step(
            frame.number, frame.text, frame.terminator == astm::FrameTerminator::final_));
        script.steps.push_back(sim::ScriptStep::expect_control_step(astm::kAck));
    }
    script.steps.push_back(sim::ScriptStep::send_control_step(astm::kEot));
    script.steps.push_back(sim::ScriptStep::send_control_step(astm::kEnq));
    script.steps.push_back(sim::ScriptStep::expect_control_step(astm::kAck));
    script.steps.push_back(sim::ScriptStep::send_control_step(astm::kEot));

    auto outcome = sim::run_analyzer(sim::AnalyzerKind::astm, "127.0.0.1", rig.astm_port, script, test_opts());
    REQUIRE_MESSAGE(outcome.ok, outcome.error);
    REQUIRE(wait_until([&] { return rig.stub.ledger_size() == 2; }, 8000));
    CHECK(rig.stub.ledger_for("AU2700-1").size() == 2);
}

TEST_CASE("a resent message after a drop is deduplicated, not double-normalized") {
    Rig rig;
    const std::string message = sample_astm_message("SAMP004");
    // First attempt: full message delivered, then the connection drops before
    // the confirmation exchange, so the analyzer resends everything.
    sim::SimScript script;
    script.steps.push_back(sim::ScriptStep::send_control_step(astm::kEnq));
    script.steps.push_back(sim::ScriptStep::expect_control_step(astm::kAck));
    for (const auto& frame : astm::split_message(message, 1)) {
        script.steps.push_back(sim::ScriptStep::send_frame_step(
            frame.number, frame.text, frame.terminator == astm::FrameTerminator::final_));
        script.steps.push_back(sim::ScriptStep::expect_control_step(astm::kAck));
    }
    script.steps.push_back(sim::ScriptStep::send_control_step(astm::kEot));
    script.steps.push_back(sim::ScriptStep::pause_step(150));  // let the gateway process the EOT
    script.steps.push_back(sim::ScriptStep::fault_step(sim::ScriptStep::Fault::drop_connection));
    script.steps.push_back(sim::ScriptStep::send_control_step(astm::kEnq));
    script.steps.push_back(sim::ScriptStep::expect_control_step(astm::kAck));
    script.steps.push_back(sim::ScriptStep::send_control_step(astm::kEot));

    auto outcome = sim::run_analyzer(sim::AnalyzerKind::astm, "127.0.0.1", rig.astm_port, script, test_opts());
    REQUIRE_MESSAGE(outcome.ok, outcome.error);
    CHECK(outcome.reconnects >= 1);
    REQUIRE(wait_until([&] { return rig.stub.ledger_size() >= 2; }, 8000));
    std::this_thread::sleep_for(std::chrono::milliseconds(300));
    CHECK(rig.stub.ledger_size() == 2);  // replay skipped by the delivery hash
    auto status = rig.service->status_json();
    for (const auto& d : status["devices"]) {
        if (d["device_id"] == "AU2700-1")
            CHECK(d["counters"]["duplicates_skipped"].get<std::uint64_t>() >= 1);
    }
}

TEST_CASE("bidirectional brokering: query, order download, no-order reply") {
    Rig rig;
    rig.stub.seed_worklist(
        {"SAMP010", std::nullopt, {"T-GLU-SER", "T-UREA-SER"}, OrderPriority::routine});

    const std::string query =
        astm::serialize_message(astm::build_query_message("SAMP010")).value();
    sim::SimScript script;
    script.steps.push_back(sim::ScriptStep::send_control_step(astm::kEnq));
    script.steps.push_back(sim::ScriptStep::expect_control_step(astm::kAck));
    for (const auto& frame : astm::split_message(query, 1)) {
        script.steps.push_back(sim::ScriptStep::send_frame_step(
            frame.number, frame.text, frame.terminator == astm::FrameTerminator::final_));
        script.steps.push_back(sim::ScriptStep::expect_control_step(astm::kAck));
    }
    script.steps.push_back(sim::ScriptStep::send_control_step(astm::kEot));
    script.steps.push_back(
        sim::ScriptStep::expect_order_step("SAMP010", {"T-GLU-SER", "T-UREA-SER"}, 5000));

    auto outcome = sim::run_analyzer(sim::AnalyzerKind::astm, "127.0.0.1", rig.astm_port, script, test_opts());
    REQUIRE_MESSAGE(outcome.ok, outcome.error);

    // Unseeded sample: explicit no-order reply, never silence.
    const std::string miss =
        astm::serialize_message(astm::build_query_message("NOPE-1")).value();
    sim::SimScript script2;
    script2.steps.push_back(sim::ScriptStep::send_control_step(astm::kEnq));
    script2.steps.push_back(sim::ScriptStep::expect_control_step(astm::kAck));
    for (const auto& frame : astm::split_message(miss, 1)) {
        script2.steps.push_back(sim::ScriptStep::send_frame_step(
            frame.number, frame.text, frame.terminator == astm::FrameTerminator::final_));
        script2.steps.push_back(sim::ScriptStep::expect_control_step(astm::kAck));
    }
    script2.steps.push_back(sim::ScriptStep::send_control_step(astm::kEot));
    script2.steps.push_back(sim::ScriptStep::expect_order_step("", {}, 5000));
    const std::int64_t t0 = util::now_ms();
    auto outcome2 = sim::run_analyzer(sim::AnalyzerKind::astm, "127.0.0.1", rig.astm_port, script2, test_opts());
    REQUIRE_MESSAGE(outcome2.ok, outcome2.error);
    CHECK(util::now_ms() - t0 < 5000);
}

TEST_CASE("HL7 ORU with one unmapped OBX: two observations, one dead letter, ACK AA") {
    Rig rig;
    hl7::Hl7Message oru = hl7::build_oru("CENTAUR", "MSG-77", "SAMP020",
                                         {{"GLU", "90", "mg/dL", "70-110", "N", "F", ""},
                                          {"XYZ", "1", "", "", "", "F", ""},
                                          {"UREA", "30", "mg/dL", "15-45", "N", "F", ""}});
    auto script = sim::hl7_upload_script({hl7::serialize_hl7(oru)});
    auto outcome = sim::run_analyzer(sim::AnalyzerKind::hl7, "127.0.0.1", rig.hl7_port, script, test_opts());
    REQUIRE_MESSAGE(outcome.ok, outcome.error);

    REQUIRE(wait_until([&] { return rig.stub.ledger_for("CENTAUR-1").size() == 2; }, 8000));
    CHECK(rig.service->deadletters().count_for("CENTAUR-1") == 1);
    auto entries = rig.service->deadletters().entries();
    REQUIRE(entries.size() == 1);
    CHECK(entries[0].reason == "unmapped_test_code");
    auto ledger = rig.stub.ledger_for("CENTAUR-1");
    CHECK(ledger[0].observation["ref_low"].dump() == "70");  // "70-110" parsed with '-' hint
    CHECK(ledger[0].observation["ref_high"].dump() == "110");
}

TEST_CASE("generic frames: BCC failure NAKs, good frames ACK and deliver") {
    Rig rig;
    const gen::FrameDescriptor* desc = nullptr;
    for (const auto& fmt : builtin_formats())
        if (fmt.format_id == "FMT-GEN-CLASSA-01") desc = &fmt.frame;
    REQUIRE(desc);
    const std::string frame = gen::encode_generic({{gen::FieldRole::sample_id, "SAMP030"},
                                                   {gen::FieldRole::test_code, "GLU"},
                                                   {gen::FieldRole::value, "100"},
                                                   {gen::FieldRole::unit, "mg/dL"},
                                                   {gen::FieldRole::ref_range, "70^110"},
                                                   {gen::FieldRole::flag, "N"}},
                                                  *desc);
    sim::SimScript script;
    script.steps.push_back(sim::ScriptStep::fault_step(sim::ScriptStep::Fault::corrupt_next_frame));
    script.steps.push_back(sim::ScriptStep::send_raw_step(frame));
    sim::AnalyzerOptions opts = test_opts();
    opts.ack_byte = 0x06;
    auto outcome = sim::run_analyzer(sim::AnalyzerKind::generic, "127.0.0.1", rig.gen_port, script, opts);
    REQUIRE_MESSAGE(outcome.ok, outcome.error);
    CHECK(outcome.naks_seen == 1);

    REQUIRE(wait_until([&] { return rig.stub.ledger_for("XP100-1").size() == 1; }, 8000));
    auto gen_entries = rig.stub.ledger_for("XP100-1");
    const auto& obs = gen_entries[0].observation;
    CHECK(obs["sample_id"] == "SAMP030");
    CHECK(obs["value"].dump() == "5.55");  // 100 * 0.0555
    // The corrupted first attempt is dead-lettered for audit, the clean
    // resend went through.
    CHECK(rig.service->deadletters().count_for("XP100-1") == 1);
}

TEST_CASE("qualitative values pass through unconverted with a note") {
    Rig rig;
    auto outcome = rig.service->on_message(
        "AU2700-1",
        astm::serialize_message(
            astm::build_result_message("AU2700", "SAMP040",
                                       {{"GLU", "POSITIVE", "", "", "", "F", "", ""}}))
            .value());
    CHECK(outcome.emitted == 1);
    REQUIRE(wait_until([&] { return rig.stub.ledger_for("AU2700-1").size() == 1; }, 8000));
    auto au_entries = rig.stub.ledger_for("AU2700-1");
    const auto& obs = au_entries[0].observation;
    CHECK(obs["value"] == "POSITIVE");     // text stays text
    CHECK(obs["unit"].is_null());          // canonical unit not applied to text values
}

TEST_CASE("file ingestion over the control endpoint is transactional and deduplicated") {
    Rig rig;
    auto ep = net::parse_endpoint(rig.config.control_endpoint).value();
    const std::string content =
        "SampleID\tTest\tValue\tUnit\tRange\tFlag\tStatus\n"
        "F1\tGLU\t100\tmg/dL\t70^110\tN\tF\n"
        "F2\tBADCODE\t1\t\t\t\tF\n"
        "F3\tUREA\t30\tmg/dL\t15^45\tN\tF\n";
    REQUIRE_FALSE(sim::ingest_via_control(ep.host, ep.port, "AU2700-1", "tech1", content,
                                          util::now_ms() + 5000));
    REQUIRE(wait_until([&] { return rig.stub.ledger_for("AU2700-1").size() == 2; }, 8000));
    CHECK(rig.service->deadletters().count_for("AU2700-1") == 1);  // BADCODE is unmapped

    // Same file again: duplicate, nothing new lands.
    REQUIRE_FALSE(sim::ingest_via_control(ep.host, ep.port, "AU2700-1", "tech1", content,
                                          util::now_ms() + 5000));
    std::this_thread::sleep_for(std::chrono::milliseconds(200));
    CHECK(rig.stub.ledger_for("AU2700-1").size() == 2);

    // Unknown operator is refused outright.
    auto err = sim::ingest_via_control(ep.host, ep.port, "AU2700-1", "ghost", content,
                                       util::now_ms() + 3000);
    REQUIRE(err);
}

TEST_CASE("generic decoding is independent of stream chunking") {
    Rig rig;
    const gen::FrameDescriptor* desc = nullptr;
    for (const auto& fmt : builtin_formats())
        if (fmt.format_id == "FMT-GEN-CLASSA-01") desc = &fmt.frame;
    const std::string frame = gen::encode_generic({{gen::FieldRole::sample_id, "CHUNKY1"},
                                                   {gen::FieldRole::test_code, "WBC"},
                                                   {gen::FieldRole::value, "7.5"}},
                                                  *desc);
    auto conn = net::TcpStream::connect("127.0.0.1", rig.gen_port, 1000);
    REQUIRE(conn.ok());
    for (char c : frame) {
        REQUIRE_FALSE(conn.value().write_all(std::string(1, c)));
        std::this_thread::sleep_for(std::chrono::milliseconds(3));
    }
    auto reply = conn.value().read_some(3000);
    REQUIRE(reply.ok());
    CHECK(reply.value() == std::string(1, 0x06));
    // WBC is unmapped in this rig, so the byte-at-a-time frame still decoded
    // as exactly one record and went to the dead-letter report whole.
    REQUIRE(wait_until([&] { return rig.service->deadletters().count_for("XP100-1") == 1; }, 5000));
    auto letters = rig.service->deadletters().entries();
    CHECK(letters[0].reason == "unmapped_test_code");
    CHECK(letters[0].payload.find("CHUNKY1") != std::string::npos);
}

TEST_CASE("a second concurrent connection to the same endpoint is refused") {
    Rig rig;
    auto first = net::TcpStream::connect("127.0.0.1", rig.astm_port, 1000);
    REQUIRE(first.ok());
    first.value().write_all(std::string(1, astm::kEnq));
    auto reply = first.value().read_some(1000);
    REQUIRE(reply.ok());
    REQUIRE(reply.value() == std::string(1, astm::kAck));  // session live

    auto second = net::TcpStream::connect("127.0.0.1", rig.astm_port, 1000);
    REQUIRE(second.ok());
    auto refused = second.value().read_some(2000);
    CHECK_FALSE(refused.ok());  // gateway closes the intruder immediately
}

TEST_CASE("status endpoint snapshots live counters and queue depths") {
    Rig rig;
    auto script = sim::astm_upload_script({sample_astm_message("SAMP050")});
    auto outcome = sim::run_analyzer(sim::AnalyzerKind::astm, "127.0.0.1", rig.astm_port, script, test_opts());
    REQUIRE_MESSAGE(outcome.ok, outcome.error);
    REQUIRE(wait_until([&] { return rig.stub.ledger_size() == 2; }, 8000));

    httplib::Client cli("127.0.0.1", rig.service->control_port());
    auto res = cli.Get("/status");
    REQUIRE(res);
    auto status = nlohmann::json::parse(res->body);
    CHECK(status["gateway_id"] == "GW-T");
    bool found = false;
    for (const auto& d : status["devices"]) {
        if (d["device_id"] != "AU2700-1") continue;
        found = true;
        CHECK(d["listener"] == "listening");
        CHECK(d["counters"]["results_emitted"].get<std::uint64_t>() == 2);
        CHECK(d["counters"]["frames_ok"].get<std::uint64_t>() >= 1);
    }
    CHECK(found);
    CHECK(status["totals"]["results_emitted"].get<std::uint64_t>() == 2);
}

TEST_CASE("a bind failure on one endpoint leaves the others listening") {
    TempDir dir;
    const int busy_port = net::free_port();
    auto blocker = net::TcpListener::bind("127.0.0.1", busy_port);
    REQUIRE(blocker.ok());

    Registry registry((dir.path / "registry").string());
    registry.load();
    DeviceProfile a;
    a.device_id = "DEV-A";
    a.protocol = Protocol::astm;
    a.format_id = "FMT-ASTM-01";
    a.listen_endpoint = "127.0.0.1:" + std::to_string(busy_port);
    REQUIRE(registry.register_device(a).ok());
    DeviceProfile b = a;
    b.device_id = "DEV-B";
    b.listen_endpoint = "127.0.0.1:" + std::to_string(net::free_port());
    REQUIRE(registry.register_device(b).ok());

    GatewayConfig config;
    config.gateway_id = "GW-B";
    config.registry_dir = (dir.path / "registry").string();
    config.queue_path = (dir.path / "queue.log").string();
    config.deadletter_path = (dir.path / "dl.jsonl").string();
    config.his_base_url = "http://127.0.0.1:" + std::to_string(net::free_port());
    config.control_endpoint = "127.0.0.1:" + std::to_string(net::free_port());
    GatewayService service(config);
    REQUIRE_FALSE(service.start());  // bind failure is reported, not fatal

    auto status = service.status_json();
    int listening = 0, failed = 0;
    for (const auto& d : status["devices"]) {
        if (d["listener"] == "listening") ++listening;
        if (d["listener"] == "bind_failed") ++failed;
    }
    CHECK(listening == 1);
    CHECK(failed == 1);
    service.shutdown();
}

TEST_CASE("dead letters export drains only after a successful write") {
    Rig rig;
    rig.service->on_message("AU2700-1", "this is not an astm message\r");
    CHECK(rig.service->deadletters().count() == 1);

    httplib::Client cli("127.0.0.1", rig.service->control_port());
    auto res = cli.Get("/deadletters");
    REQUIRE(res);
    auto body = nlohmann::json::parse(res->body);
    REQUIRE(body["entries"].size() == 1);
    const auto id = body["entries"][0]["id"].get<std::uint64_t>();

    auto drain = cli.Post("/deadletters/drain", nlohmann::json{{"up_to_id", id}}.dump(),
                          "application/json");
    REQUIRE(drain);
    CHECK(rig.service->deadletters().count() == 0);
    // Second export is empty: drain semantics.
    auto again = cli.Get("/deadletters");
    CHECK(nlohmann::json::parse(again->body)["entries"].empty());
}

TEST_CASE("normalize applies factor, canonical unit and sequence") {
    RawResult raw;
    raw.device_id = "DEV-7";
    raw.sample_id = "S1";
    raw.machine_test_code = "GLU";
    raw.value = "105";
    raw.unit = "mg/dL";
    raw.ref_range_raw = "70^110";
    raw.abnormal_flag = "N";
    raw.result_status = "F";
    TestMapping mapping{"T-GLU-SER", std::string("mmol/L"), *Decimal::parse("0.0555")};
    auto obs = normalize(raw, mapping, "GW1", 7, "2026-01-01T00:00:00Z", "^");
    CHECK(obs.value.text == "5.8275");
    CHECK(*obs.unit == "mmol/L");
    CHECK(obs.ref_low->to_string() == "70");
    CHECK(obs.ref_high->to_string() == "110");
    CHECK(obs.sequence == 7);
    CHECK(validate_observation(obs).empty());

    TestMapping identity{"T-GLU-SER", std::nullopt, *Decimal::parse("1")};
    auto plain = normalize(raw, identity, "GW1", 8, "2026-01-01T00:00:00Z", "^");
    CHECK(plain.value.text == "105");
    CHECK(*plain.unit == "mg/dL");

    raw.value = "POSITIVE";
    auto text = normalize(raw, mapping, "GW1", 9, "2026-01-01T00:00:00Z", "^");
    CHECK(text.value.text == "POSITIVE");
    REQUIRE_FALSE(text.notes.empty());
    CHECK(text.notes.back().find("conversion factor ignored") != std::string::npos);
}

TEST_CASE("wire round-trip keeps observations valid") {
    RawResult raw;
    raw.device_id = "DEV-7";
    raw.sample_id = "S1";
    raw.machine_test_code = "GLU";
    raw.value = "105";
    raw.ref_range_raw = "70^110";
    TestMapping mapping{"T-GLU-SER", std::nullopt, *Decimal::parse("1")};
    auto obs = normalize(raw, mapping, "GW1", 3, now_utc_iso8601(), "^");
    REQUIRE(validate_observation(obs).empty());
    auto wire = observation_to_wire(obs);
    auto back = observation_from_wire(wire, "GW1");
    REQUIRE(back.ok());
    CHECK(validate_observation(back.value()).empty());
    CHECK(back.value().value.text == "105");
    CHECK(back.value().sequence == 3);
    CHECK(observation_to_wire(back.value()) == wire);
}
