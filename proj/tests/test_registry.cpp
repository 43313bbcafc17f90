#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "gmei/registry.hpp"

using namespace gmei;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("gmei-reg-" + std::to_string(::getpid()) + "-" + std::to_string(counter()++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    static int& counter() {
        static int c = 0;
        return c;
    }
};

DeviceProfile astm_device(const std::string& id, const std::string& endpoint) {
    DeviceProfile p;
    p.device_id = id;
    p.display_name = id;
    p.protocol = Protocol::astm;
    p.mode = DeviceMode::bidirectional;
    p.format_id = "FMT-ASTM-01";
    p.listen_endpoint = endpoint;
    p.facility_id = "FAC-1";
    return p;
}

}  // namespace

TEST_CASE("register then resolve") {
    TempDir dir;
    Registry registry(dir.path.string());
    REQUIRE_FALSE(registry.load());
    auto id = registry.register_device(astm_device("DEV-7", "127.0.0.1:9301"));
    REQUIRE(id.ok());
    auto resolved = registry.snapshot()->resolve_format("DEV-7");
    REQUIRE(resolved.ok());
    CHECK(resolved.value().protocol == Protocol::astm);
    CHECK(resolved.value().format_id == "FMT-ASTM-01");
    CHECK(resolved.value().definition.kind == FormatDefinition::Kind::astm);
}

TEST_CASE("duplicate device ids are refused") {
    TempDir dir;
    Registry registry(dir.path.string());
    registry.load();
    REQUIRE(registry.register_device(astm_device("DEV-7", "127.0.0.1:9302")).ok());
    auto dup = registry.register_device(astm_device("DEV-7", "127.0.0.1:9303"));
    REQUIRE_FALSE(dup.ok());
    CHECK(dup.error().code == "duplicate_device_id");
}

TEST_CASE("endpoint conflicts name both devices") {
    TempDir dir;
    Registry registry(dir.path.string());
    registry.load();
    REQUIRE(registry.register_device(astm_device("DEV-A", "127.0.0.1:9304")).ok());
    auto clash = registry.register_device(astm_device("DEV-B", "127.0.0.1:9304"));
    REQUIRE_FALSE(clash.ok());
    CHECK(clash.error().code == "endpoint_conflict");
    CHECK(clash.error().detail.find("DEV-A") != std::string::npos);
    CHECK(clash.error().detail.find("DEV-B") != std::string::npos);
}

TEST_CASE("bidirectional mode requires the astm protocol") {
    TempDir dir;
    Registry registry(dir.path.string());
    registry.load();
    DeviceProfile p = astm_device("DEV-H", "127.0.0.1:9305");
    p.protocol = Protocol::hl7;
    p.format_id = "FMT-HL7-01";
    auto res = registry.register_device(p);
    REQUIRE_FALSE(res.ok());
    CHECK(res.error().code == "invalid_mode_for_protocol");
}

TEST_CASE("file-only devices need no endpoint") {
    TempDir dir;
    Registry registry(dir.path.string());
    registry.load();
    DeviceProfile p;
    p.device_id = "DEV-Q";
    p.protocol = Protocol::file_only;
    p.format_id = "FMT-UPL-01";
    REQUIRE(registry.register_device(p).ok());
    auto fmt = registry.snapshot()->resolve_file_format("DEV-Q");
    REQUIRE(fmt.ok());
    CHECK(fmt.value().file.extension == ".upl");
}

TEST_CASE("test-code mapping is exact-match only") {
    TempDir dir;
    Registry registry(dir.path.string());
    registry.load();
    TestParameterMapping m;
    m.device_id = "DEV-7";
    m.machine_test_code = "GLU";
    m.test_id = "T-GLU-SER";
    m.canonical_unit = "mg/dL";
    m.conversion_factor = *Decimal::parse("1");
    REQUIRE_FALSE(registry.upsert_mapping(m));

    auto hit = registry.snapshot()->map_test_code("DEV-7", "GLU");
    REQUIRE(hit.ok());
    CHECK(hit.value().test_id == "T-GLU-SER");
    CHECK(*hit.value().canonical_unit == "mg/dL");

    auto miss = registry.snapshot()->map_test_code("DEV-7", "XYZ");
    REQUIRE_FALSE(miss.ok());
    CHECK(miss.error().code == "unmapped_test_code");
    auto near_miss = registry.snapshot()->map_test_code("DEV-7", "glu");
    CHECK_FALSE(near_miss.ok());
}

TEST_CASE("mappings reject non-positive conversion factors") {
    TempDir dir;
    Registry registry(dir.path.string());
    registry.load();
    TestParameterMapping m;
    m.device_id = "D";
    m.machine_test_code = "X";
    m.test_id = "T";
    m.conversion_factor = Decimal(0, 0);
    auto err = registry.upsert_mapping(m);
    REQUIRE(err);
    CHECK(err->code == "invalid_mapping");
}

TEST_CASE("update_format validates the format and its protocol family") {
    TempDir dir;
    Registry registry(dir.path.string());
    registry.load();
    registry.register_device(astm_device("DEV-7", "127.0.0.1:9306"));

    REQUIRE_FALSE(registry.update_format("DEV-7", "FMT-CLASSA-02"));
    CHECK(registry.snapshot()->find_device("DEV-7")->format_id == "FMT-CLASSA-02");

    auto unknown = registry.update_format("DEV-7", "FMT-NOPE");
    REQUIRE(unknown);
    CHECK(unknown->code == "unknown_format");
    auto wrong_family = registry.update_format("DEV-7", "FMT-HL7-01");
    REQUIRE(wrong_family);
    CHECK(wrong_family->code == "unknown_format");
    auto no_device = registry.update_format("DEV-X", "FMT-ASTM-01");
    REQUIRE(no_device);
    CHECK(no_device->code == "unknown_device");
}

TEST_CASE("registry survives restart") {
    TempDir dir;
    {
        Registry registry(dir.path.string());
        registry.load();
        DeviceProfile p = astm_device("DEV-7", "127.0.0.1:9307");
        p.file_format_id = "FMT-UPL-01";
        REQUIRE(registry.register_device(p).ok());
        TestParameterMapping m;
        m.device_id = "DEV-7";
        m.machine_test_code = "GLU";
        m.test_id = "T-GLU-SER";
        m.conversion_factor = *Decimal::parse("0.0555");
        registry.upsert_mapping(m);
        registry.upsert_user({"tech1", "Technician One", UserRecord::Role::technician});
    }
    Registry reloaded(dir.path.string());
    REQUIRE_FALSE(reloaded.load());
    auto snap = reloaded.snapshot();
    const DeviceProfile* device = snap->find_device("DEV-7");
    REQUIRE(device);
    CHECK(device->protocol == Protocol::astm);
    CHECK(device->mode == DeviceMode::bidirectional);
    CHECK(device->format_id == "FMT-ASTM-01");
    CHECK(device->listen_endpoint == "127.0.0.1:9307");
    CHECK(*device->file_format_id == "FMT-UPL-01");
    auto mapping = snap->map_test_code("DEV-7", "GLU");
    REQUIRE(mapping.ok());
    CHECK(mapping.value().conversion_factor.to_string() == "0.0555");
    CHECK(snap->find_user("tech1"));
}

TEST_CASE("a crash that leaves a temp file behind does not corrupt the registry") {
    TempDir dir;
    {
        Registry registry(dir.path.string());
        registry.load();
        REQUIRE(registry.register_device(astm_device("DEV-7", "127.0.0.1:9308")).ok());
    }
    // Simulated crash mid-save: the temp exists, the rename never happened.
    std::ofstream(dir.path / "devices.json.tmp") << "{ torn garbage";
    Registry reloaded(dir.path.string());
    REQUIRE_FALSE(reloaded.load());
    CHECK(reloaded.snapshot()->find_device("DEV-7"));
}

TEST_CASE("custom format definitions persist") {
    TempDir dir;
    {
        Registry registry(dir.path.string());
        registry.load();
        FormatDefinition def;
        def.format_id = "FMT-SITE-77";
        def.kind = FormatDefinition::Kind::generic_frame;
        def.frame.format_id = def.format_id;
        def.frame.field_separator = ',';
        def.frame.field_order = {gen::FieldRole::sample_id, gen::FieldRole::test_code,
                                 gen::FieldRole::value};
        REQUIRE_FALSE(registry.add_format(def));
    }
    Registry reloaded(dir.path.string());
    REQUIRE_FALSE(reloaded.load());
    const FormatDefinition* def = reloaded.snapshot()->find_format("FMT-SITE-77");
    REQUIRE(def);
    CHECK(def->frame.field_separator == ',');
}

TEST_CASE("builtin format fixtures are all resolvable") {
    TempDir dir;
    Registry registry(dir.path.string());
    registry.load();
    for (const char* id : {"FMT-ASTM-01", "FMT-CLASSA-02", "FMT-CLASSB-03", "FMT-GEN-CLASSA-01",
                           "FMT-GEN-CLASSB-01", "FMT-UPL-01", "FMT-HL7-01"})
        CHECK(registry.snapshot()->find_format(id));
}
