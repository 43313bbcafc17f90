#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gmei/astm_records.hpp"
#include "gmei/decimal.hpp"
#include "gmei/generic_framing.hpp"
#include "gmei/result.hpp"

namespace gmei {

enum class Protocol { astm, hl7, generic, file_only };
enum class DeviceMode { unidirectional, bidirectional };

std::string to_string(Protocol p);
std::optional<Protocol> protocol_from_string(const std::string& s);
std::string to_string(DeviceMode m);
std::optional<DeviceMode> mode_from_string(const std::string& s);

// Comport settings from the equipment master. Over a TCP byte stream only
// timeout_ms and bcc_check are enforced; the rest is documentary.
struct CommSettings {
    int baud_rate = 9600;
    int data_bits = 8;
    std::string parity = "N";
    int stop_bits = 1;
    int timeout_ms = 30000;
    bool bcc_check = false;
};

// Medical Equipment Master row.
struct DeviceProfile {
    std::string device_id;
    std::string display_name;
    Protocol protocol = Protocol::astm;
    DeviceMode mode = DeviceMode::unidirectional;
    std::string format_id;
    std::string listen_endpoint;  // host:port; empty for file_only devices
    std::optional<std::string> file_format_id;  // optional log-file layout for stream devices
    CommSettings comm_settings;
    std::string facility_id;
};

// Machine-wise Test Parameter Master row.
struct TestParameterMapping {
    std::string device_id;
    std::string machine_test_code;
    std::string test_id;
    std::optional<std::string> canonical_unit;
    Decimal conversion_factor{1, 0};  // > 0
};

// User Master row.
struct UserRecord {
    std::string operator_id;
    std::string display_name;
    enum class Role { technician, admin } role = Role::technician;
};

// A format id resolves to exactly one of these parsing configurations.
struct FormatDefinition {
    enum class Kind { astm, generic_frame, file, hl7 };
    std::string format_id;
    Kind kind = Kind::astm;
    astm::AstmFieldMap astm_map;   // kind == astm
    gen::FrameDescriptor frame;    // kind == generic_frame
    gen::FileDescriptor file;      // kind == file
};

// Shipped fixtures: FMT-ASTM-01 (standard positions), FMT-CLASSA-02 and
// FMT-CLASSB-03 (ASTM field-position overrides), FMT-GEN-CLASSA-01
// (semicolon frames), FMT-GEN-CLASSB-01 (fixed-width frames), FMT-UPL-01
// (tab-separated .upl), FMT-HL7-01.
const std::vector<FormatDefinition>& builtin_formats();

struct ResolvedFormat {
    Protocol protocol = Protocol::astm;
    std::string format_id;
    FormatDefinition definition;
};

struct TestMapping {
    std::string test_id;
    std::optional<std::string> canonical_unit;
    Decimal conversion_factor{1, 0};
};

// Immutable view; sessions capture one at session start and keep it for the
// session's lifetime.
class RegistrySnapshot {
public:
    const DeviceProfile* find_device(const std::string& device_id) const;
    const std::vector<DeviceProfile>& devices() const { return devices_; }
    const std::vector<TestParameterMapping>& mappings() const { return mappings_; }
    const std::vector<UserRecord>& users() const { return users_; }
    const UserRecord* find_user(const std::string& operator_id) const;

    Result<ResolvedFormat> resolve_format(const std::string& device_id) const;
    // The device's file-ingestion layout: file_format_id, or format_id for
    // file_only devices. Error: no_file_format.
    Result<FormatDefinition> resolve_file_format(const std::string& device_id) const;
    Result<TestMapping> map_test_code(const std::string& device_id, const std::string& machine_code) const;
    const FormatDefinition* find_format(const std::string& format_id) const;

private:
    friend class Registry;
    std::vector<DeviceProfile> devices_;
    std::vector<TestParameterMapping> mappings_;
    std::vector<UserRecord> users_;
    std::map<std::string, FormatDefinition> formats_;
};

// Persistent masters: one human-readable JSON document per master,
// rewritten atomically (write temp, rename). Writers are serialized and
// publish a fresh immutable snapshot.
class Registry {
public:
    explicit Registry(std::string dir);

    // Missing files mean empty masters; malformed files are errors.
    Status load();

    std::shared_ptr<const RegistrySnapshot> snapshot() const;

    // Errors: duplicate_device_id, endpoint_conflict, invalid_mode_for_protocol, unknown_format.
    Result<std::string> register_device(const DeviceProfile& profile);
    // Errors: unknown_device, unknown_format.
    Status update_format(const std::string& device_id, const std::string& new_format_id);
    // (device_id, machine_test_code) unique; conversion_factor > 0.
    Status upsert_mapping(const TestParameterMapping& mapping);
    Status upsert_user(const UserRecord& user);
    Status add_format(const FormatDefinition& def);

    const std::string& dir() const { return dir_; }

private:
    Status persist_locked();
    static Status check_profile(const RegistrySnapshot& snap, const DeviceProfile& profile,
                                bool allow_existing);

    std::string dir_;
    mutable std::mutex mutex_;
    std::shared_ptr<const RegistrySnapshot> snapshot_;
};

// Registry file round-trip helpers (shared with fixtures and tests).
Status write_json_atomic(const std::string& path, const std::string& body);

nlohmann::json device_profile_to_json(const DeviceProfile& profile);
Result<DeviceProfile> device_profile_from_json(const nlohmann::json& j);
nlohmann::json test_mapping_to_json(const TestParameterMapping& mapping);
Result<TestParameterMapping> test_mapping_from_json(const nlohmann::json& j);
nlohmann::json user_to_json(const UserRecord& user);
Result<UserRecord> user_from_json(const nlohmann::json& j);
nlohmann::json format_definition_to_json(const FormatDefinition& def);
Result<FormatDefinition> format_definition_from_json(const nlohmann::json& j);

}  // namespace gmei
