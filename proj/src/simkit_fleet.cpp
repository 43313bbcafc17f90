#include <algorithm>
#include <random>
#include <sstream>
#include <thread>

#include <httplib.h>

#include "gmei/astm_records.hpp"
#include "gmei/generic_framing.hpp"
#include "gmei/hl7.hpp"
#include "gmei/net.hpp"
#include "gmei/simkit.hpp"
#include "gmei/util.hpp"

namespace gmei::sim {

namespace {

struct MenuTest {
    std::string machine_code;
    std::string test_id;
    std::string raw_unit;
    std::optional<std::string> canonical_unit;
    std::string factor;  // decimal text, "1" for identity
    std::string range;   // instrument-formatted, '^' delimiter ("" = none)
    std::string range_low, range_high;
    bool textual = false;  // qualitative values like blood groups
};

struct MenuDef {
    std::vector<MenuTest> tests;
};

// Scales an integer value text by factor "0.0555" with plain integer string
// math, independent of the production decimal arithmetic.
std::string scale_by_0_0555(const std::string& int_text) {
    long long v = std::stoll(int_text);
    long long product = v * 555;  // factor mantissa, scale 4
    int scale = 4;
    while (scale > 0 && product % 10 == 0) {
        product /= 10;
        --scale;
    }
    std::string digits = std::to_string(product);
    if (scale == 0) return digits;
    if (static_cast<int>(digits.size()) <= scale)
        return "0." + std::string(scale - digits.size(), '0') + digits;
    return digits.substr(0, digits.size() - scale) + "." + digits.substr(digits.size() - scale);
}

MenuDef chemistry_menu() {
    return {{
        {"GLU", "T-GLU-SER", "mg/dL", "mmol/L", "0.0555", "70^110", "70", "110"},
        {"UREA", "T-UREA-SER", "mg/dL", std::nullopt, "1", "15^45", "15", "45"},
        {"NA", "T-NA-SER", "mmol/L", std::nullopt, "1", "135^148", "135", "148"},
        {"CRE", "T-CRE-SER", "mg/dL", std::nullopt, "1", "0.6^1.3", "0.6", "1.3"},
    }};
}

MenuDef hematology_menu() {
    return {{
        {"WBC", "T-WBC", "10*3/uL", std::nullopt, "1", "4^11", "4", "11"},
        {"RBC", "T-RBC", "10*6/uL", std::nullopt, "1", "3.8^5.9", "3.8", "5.9"},
        {"HGB", "T-HGB", "g/dL", std::nullopt, "1", "12^17", "12", "17"},
        {"PLT", "T-PLT", "10*3/uL", std::nullopt, "1", "150^400", "150", "400"},
    }};
}

MenuDef immunoassay_menu() {
    return {{
        {"TSH", "T-TSH", "uIU/mL", std::nullopt, "1", "0.4-4.2", "0.4", "4.2"},
        {"FT4", "T-FT4", "ng/dL", std::nullopt, "1", "0.8-1.8", "0.8", "1.8"},
        {"PSA", "T-PSA", "ng/mL", std::nullopt, "1", "0-4", "0", "4"},
    }};
}

MenuDef bloodbank_menu() {
    return {{
        {"ABO", "T-ABO-GRP", "", std::nullopt, "1", "", "", "", true},
        {"AHG", "T-AHG-TITER", "titer", std::nullopt, "1", "", "", ""},
    }};
}

// One generated result and its directly-constructed expected observation.
struct PlannedResult {
    std::string sample_id;
    MenuTest test;
    std::string raw_value;
    std::string expected_value;
};

std::string random_value(std::mt19937_64& rng, const MenuTest& test) {
    if (test.textual) {
        static const char* groups[] = {"A POS", "A NEG", "B POS", "O POS", "O NEG", "AB POS"};
        return groups[rng() % 6];
    }
    if (test.factor != "1") {
        // Integer raw values keep the independent scaling oracle trivial.
        return std::to_string(60 + rng() % 300);
    }
    const std::uint64_t whole = 1 + rng() % 400;
    if (rng() % 2 == 0) return std::to_string(whole);
    const std::uint64_t tenth = 1 + rng() % 9;  // avoid trailing zeros
    return std::to_string(whole) + "." + std::to_string(tenth);
}

std::vector<PlannedResult> plan_results(std::mt19937_64& rng, const MenuDef& menu,
                                        const std::string& sample_prefix, int result_count) {
    std::vector<PlannedResult> out;
    int sample_no = 0;
    while (static_cast<int>(out.size()) < result_count) {
        const std::string sample_id = sample_prefix + std::to_string(++sample_no);
        const int in_sample = std::min<int>(2, result_count - static_cast<int>(out.size()));
        for (int t = 0; t < in_sample; ++t) {
            const MenuTest& test = menu.tests[(sample_no + t) % menu.tests.size()];
            PlannedResult r;
            r.sample_id = sample_id;
            r.test = test;
            r.raw_value = random_value(rng, test);
            r.expected_value = test.factor == "1" ? r.raw_value : scale_by_0_0555(r.raw_value);
            out.push_back(std::move(r));
        }
    }
    return out;
}

ExpectedObservation expected_of(const PlannedResult& r) {
    ExpectedObservation e;
    e.sample_id = r.sample_id;
    e.test_id = r.test.test_id;
    e.machine_test_code = r.test.machine_code;
    e.value_text = r.expected_value;
    if (r.test.textual) {
        if (!r.test.raw_unit.empty()) e.unit = r.test.raw_unit;
    } else {
        e.unit = r.test.canonical_unit ? *r.test.canonical_unit : r.test.raw_unit;
        if (!e.unit->empty()) {
        } else {
            e.unit.reset();
        }
    }
    if (!r.test.range_low.empty()) {
        e.ref_low = r.test.range_low;
        e.ref_high = r.test.range_high;
    }
    e.flag = "N";
    e.status = "final";
    return e;
}

std::vector<TestParameterMapping> mappings_of(const std::string& device_id, const MenuDef& menu) {
    std::vector<TestParameterMapping> out;
    for (const auto& t : menu.tests) {
        TestParameterMapping m;
        m.device_id = device_id;
        m.machine_test_code = t.machine_code;
        m.test_id = t.test_id;
        m.canonical_unit = t.canonical_unit;
        m.conversion_factor = *Decimal::parse(t.factor);
        out.push_back(std::move(m));
    }
    return out;
}

}  // namespace

FleetPlan generate_fleet(const FleetTopology& topology) {
    FleetPlan plan;
    plan.topology = topology;
    std::mt19937_64 rng(topology.seed);

    plan.users.push_back({"tech1", "Bench Technician", UserRecord::Role::technician});
    plan.users.push_back({"admin", "Lab Administrator", UserRecord::Role::admin});

    const int device_total = topology.facilities * topology.devices_per_facility;
    const int base = topology.total_results / device_total;
    int remainder = topology.total_results % device_total;

    static const char* astm_names[] = {"AU2700", "Cobas6000", "HitachiModular"};

    for (int f = 1; f <= topology.facilities; ++f) {
        const std::string facility = "FAC-" + std::to_string(f);
        for (int d = 0; d < topology.devices_per_facility; ++d) {
            int results = base + (remainder > 0 ? 1 : 0);
            if (remainder > 0) --remainder;

            FleetDevice device;
            device.profile.facility_id = facility;
            device.profile.comm_settings.timeout_ms = topology.device_timeout_ms;
            const int kind_slot = d % 4;
            std::string short_id = "F" + std::to_string(f) + "D" + std::to_string(d + 1);

            switch (kind_slot) {
                case 0: {  // ASTM, bidirectional chemistry
                    const char* name = astm_names[(f - 1) % 3];
                    device.kind = AnalyzerKind::astm;
                    device.profile.device_id = short_id + "-" + name;
                    device.profile.display_name = name;
                    device.profile.protocol = Protocol::astm;
                    device.profile.mode = DeviceMode::bidirectional;
                    device.profile.format_id = "FMT-ASTM-01";
                    device.profile.comm_settings.bcc_check = false;
                    MenuDef menu = chemistry_menu();
                    device.mappings = mappings_of(device.profile.device_id, menu);
                    auto planned = plan_results(rng, menu, short_id + "-S", results);
                    std::string current_sample;
                    std::vector<astm::ResultSpec> specs;
                    auto flush_sample = [&]() {
                        if (specs.empty()) return;
                        auto msg = astm::build_result_message(name, current_sample, specs);
                        device.payloads.push_back(astm::serialize_message(msg).value());
                        specs.clear();
                    };
                    for (const auto& r : planned) {
                        if (r.sample_id != current_sample) {
                            flush_sample();
                            current_sample = r.sample_id;
                        }
                        specs.push_back({r.test.machine_code, r.raw_value, r.test.raw_unit,
                                         r.test.range, "N", "F", "", "20240102030405"});
                        device.expected.push_back(expected_of(r));
                    }
                    flush_sample();
                    device.script = astm_upload_script(device.payloads);
                    break;
                }
                case 1: {  // generic hematology, unidirectional
                    device.kind = AnalyzerKind::generic;
                    device.profile.device_id = short_id + "-SysmexXP100";
                    device.profile.display_name = "Sysmex XP-100";
                    device.profile.protocol = Protocol::generic;
                    device.profile.mode = DeviceMode::unidirectional;
                    device.profile.format_id = f % 2 == 1 ? "FMT-GEN-CLASSA-01" : "FMT-GEN-CLASSB-01";
                    device.profile.comm_settings.bcc_check = true;
                    MenuDef menu = hematology_menu();
                    device.mappings = mappings_of(device.profile.device_id, menu);
                    const gen::FrameDescriptor* desc = nullptr;
                    for (const auto& fmt : builtin_formats())
                        if (fmt.format_id == device.profile.format_id) desc = &fmt.frame;
                    auto planned = plan_results(rng, menu, short_id + "-S", results);
                    for (const auto& r : planned) {
                        std::map<gen::FieldRole, std::string> values{
                            {gen::FieldRole::sample_id, r.sample_id},
                            {gen::FieldRole::test_code, r.test.machine_code},
                            {gen::FieldRole::value, r.raw_value},
                            {gen::FieldRole::unit, r.test.raw_unit},
                            {gen::FieldRole::ref_range, r.test.range},
                            {gen::FieldRole::flag, "N"}};
                        device.payloads.push_back(gen::encode_generic(values, *desc));
                        device.expected.push_back(expected_of(r));
                    }
                    device.script = generic_upload_script(device.payloads);
                    break;
                }
                case 2: {  // HL7 immunoassay, unidirectional
                    device.kind = AnalyzerKind::hl7;
                    device.profile.device_id = short_id + "-AdviaCentaur";
                    device.profile.display_name = "Advia Centaur";
                    device.profile.protocol = Protocol::hl7;
                    device.profile.mode = DeviceMode::unidirectional;
                    device.profile.format_id = "FMT-HL7-01";
                    MenuDef menu = immunoassay_menu();
                    device.mappings = mappings_of(device.profile.device_id, menu);
                    auto planned = plan_results(rng, menu, short_id + "-S", results);
                    std::string current_sample;
                    std::vector<hl7::OruObservation> obs;
                    int msg_no = 0;
                    auto flush_sample = [&]() {
                        if (obs.empty()) return;
                        auto msg = hl7::build_oru(device.profile.display_name,
                                                  device.profile.device_id + "-MSG" +
                                                      std::to_string(++msg_no),
                                                  current_sample, obs);
                        device.payloads.push_back(hl7::serialize_hl7(msg));
                        obs.clear();
                    };
                    for (const auto& r : planned) {
                        if (r.sample_id != current_sample) {
                            flush_sample();
                            current_sample = r.sample_id;
                        }
                        obs.push_back({r.test.machine_code, r.raw_value, r.test.raw_unit, r.test.range,
                                       "N", "F", "20240102030405"});
                        device.expected.push_back(expected_of(r));
                    }
                    flush_sample();
                    device.script = hl7_upload_script(device.payloads);
                    break;
                }
                default: {  // Qwalys-style .upl file upload
                    device.kind = AnalyzerKind::generic;
                    device.file_device = true;
                    device.profile.device_id = short_id + "-Qwalys";
                    device.profile.display_name = "Qwalys";
                    device.profile.protocol = Protocol::file_only;
                    device.profile.mode = DeviceMode::unidirectional;
                    device.profile.format_id = "FMT-UPL-01";
                    MenuDef menu = bloodbank_menu();
                    device.mappings = mappings_of(device.profile.device_id, menu);
                    auto planned = plan_results(rng, menu, short_id + "-S", results);
                    std::ostringstream content;
                    content << "SampleID\tTest\tValue\tUnit\tRange\tFlag\tStatus\n";
                    for (const auto& r : planned) {
                        content << r.sample_id << "\t" << r.test.machine_code << "\t" << r.raw_value
                                << "\t" << r.test.raw_unit << "\t" << r.test.range << "\tN\tF\n";
                        auto e = expected_of(r);
                        e.flag = "N";
                        device.expected.push_back(std::move(e));
                    }
                    device.file_content = content.str();
                    break;
                }
            }

            if (device.profile.protocol != Protocol::file_only) {
                const int port = topology.base_port > 0
                                     ? topology.base_port + static_cast<int>(plan.devices.size())
                                     : net::free_port();
                device.profile.listen_endpoint = topology.host + ":" + std::to_string(port);
            }
            plan.total_results += static_cast<int>(device.expected.size());
            plan.devices.push_back(std::move(device));
        }
    }
    return plan;
}

Status write_fleet_registry(const FleetPlan& plan, const std::string& registry_dir) {
    Registry registry(registry_dir);
    if (auto err = registry.load()) return err;
    for (const auto& user : plan.users)
        if (auto err = registry.upsert_user(user)) return err;
    for (const auto& device : plan.devices) {
        auto registered = registry.register_device(device.profile);
        if (!registered.ok()) return fail(registered.error().code, registered.error().detail);
        for (const auto& mapping : device.mappings)
            if (auto err = registry.upsert_mapping(mapping)) return err;
    }
    return ok_status();
}

std::string compare_ledger(const FleetPlan& plan, const HisStub& stub) {
    std::ostringstream problems;
    std::size_t expected_total = 0;
    for (const auto& device : plan.devices) {
        expected_total += device.expected.size();
        auto entries = stub.ledger_for(device.profile.device_id);
        if (entries.size() != device.expected.size()) {
            problems << device.profile.device_id << ": ledger has " << entries.size() << " of "
                     << device.expected.size() << " expected observations\n";
            continue;
        }
        std::uint64_t last_seq = 0;
        for (std::size_t i = 0; i < entries.size(); ++i) {
            const auto& got = entries[i].observation;
            const auto& want = device.expected[i];
            if (entries[i].sequence != i + 1) {
                problems << device.profile.device_id << "[" << i << "]: sequence "
                         << entries[i].sequence << ", expected " << i + 1 << "\n";
                break;
            }
            if (entries[i].sequence <= last_seq) {
                problems << device.profile.device_id << ": arrival order not ascending\n";
                break;
            }
            last_seq = entries[i].sequence;
            auto field_text = [&](const char* key) -> std::string {
                if (!got.contains(key) || got[key].is_null()) return {};
                if (got[key].is_string()) return got[key].get<std::string>();
                return got[key].dump();
            };
            if (field_text("sample_id") != want.sample_id ||
                field_text("test_id") != want.test_id ||
                field_text("machine_test_code") != want.machine_test_code) {
                problems << device.profile.device_id << "[" << i << "]: identity mismatch (got "
                         << field_text("sample_id") << "/" << field_text("test_id") << ", want "
                         << want.sample_id << "/" << want.test_id << ")\n";
                break;
            }
            if (field_text("value") != want.value_text) {
                problems << device.profile.device_id << "[" << i << "]: value "
                         << field_text("value") << " != " << want.value_text << "\n";
                break;
            }
            const std::string unit = field_text("unit");
            if (unit != (want.unit ? *want.unit : "")) {
                problems << device.profile.device_id << "[" << i << "]: unit '" << unit << "' != '"
                         << (want.unit ? *want.unit : "") << "'\n";
                break;
            }
            if (field_text("ref_low") != (want.ref_low ? *want.ref_low : "") ||
                field_text("ref_high") != (want.ref_high ? *want.ref_high : "")) {
                problems << device.profile.device_id << "[" << i << "]: ref range mismatch\n";
                break;
            }
            if (field_text("abnormal_flag") != (want.flag ? *want.flag : "")) {
                problems << device.profile.device_id << "[" << i << "]: flag mismatch\n";
                break;
            }
            if (field_text("result_status") != want.status) {
                problems << device.profile.device_id << "[" << i << "]: status mismatch\n";
                break;
            }
        }
    }
    if (stub.ledger_size() != expected_total)
        problems << "ledger total " << stub.ledger_size() << " != expected " << expected_total << "\n";
    return problems.str();
}

Status ingest_via_control(const std::string& control_host, int control_port,
                          const std::string& device_id, const std::string& operator_id,
                          const std::string& content, std::int64_t deadline_ms) {
    nlohmann::json body{{"device_id", device_id},
                        {"operator_id", operator_id},
                        {"content_b64", util::base64_encode(content)}};
    const std::string payload = body.dump();
    for (;;) {
        if (deadline_ms > 0 && util::now_ms() >= deadline_ms)
            return fail("timeout", "control endpoint unreachable for " + device_id);
        httplib::Client cli(control_host, control_port);
        cli.set_connection_timeout(0, 500 * 1000);
        cli.set_read_timeout(5, 0);
        auto res = cli.Post("/ingest", payload, "application/json");
        if (res && res->status == 200) return ok_status();
        if (res && res->status >= 400 && res->status != 503) {
            // Duplicate ingests respond 200; any 4xx is a real configuration error.
            return fail("ingest_rejected", res->body);
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(150));
    }
}

}  // namespace gmei::sim
