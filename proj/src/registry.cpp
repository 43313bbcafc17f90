#include "gmei/registry.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace gmei {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Protocol p) {
    switch (p) {
        case Protocol::astm: return "astm";
        case Protocol::hl7: return "hl7";
        case Protocol::generic: return "generic";
        case Protocol::file_only: return "file_only";
    }
    return "astm";
}

std::optional<Protocol> protocol_from_string(const std::string& s) {
    if (s == "astm") return Protocol::astm;
    if (s == "hl7") return Protocol::hl7;
    if (s == "generic") return Protocol::generic;
    if (s == "file_only") return Protocol::file_only;
    return std::nullopt;
}

std::string to_string(DeviceMode m) {
    return m == DeviceMode::bidirectional ? "bidirectional" : "unidirectional";
}

std::optional<DeviceMode> mode_from_string(const std::string& s) {
    if (s == "unidirectional") return DeviceMode::unidirectional;
    if (s == "bidirectional") return DeviceMode::bidirectional;
    return std::nullopt;
}

namespace {

FormatDefinition::Kind kind_for_protocol(Protocol p) {
    switch (p) {
        case Protocol::astm: return FormatDefinition::Kind::astm;
        case Protocol::hl7: return FormatDefinition::Kind::hl7;
        case Protocol::generic: return FormatDefinition::Kind::generic_frame;
        case Protocol::file_only: return FormatDefinition::Kind::file;
    }
    return FormatDefinition::Kind::astm;
}

std::string kind_to_string(FormatDefinition::Kind k) {
    switch (k) {
        case FormatDefinition::Kind::astm: return "astm";
        case FormatDefinition::Kind::generic_frame: return "generic_frame";
        case FormatDefinition::Kind::file: return "file";
        case FormatDefinition::Kind::hl7: return "hl7";
    }
    return "astm";
}

std::optional<FormatDefinition::Kind> kind_from_string(const std::string& s) {
    if (s == "astm") return FormatDefinition::Kind::astm;
    if (s == "generic_frame") return FormatDefinition::Kind::generic_frame;
    if (s == "file") return FormatDefinition::Kind::file;
    if (s == "hl7") return FormatDefinition::Kind::hl7;
    return std::nullopt;
}

json astm_map_to_json(const astm::AstmFieldMap& m) {
    return json{{"order_sample_id", m.order_sample_id},
                {"order_tests", m.order_tests},
                {"order_priority", m.order_priority},
                {"result_test_code", m.result_test_code},
                {"result_test_code_component", m.result_test_code_component},
                {"result_value", m.result_value},
                {"result_unit", m.result_unit},
                {"result_ref_range", m.result_ref_range},
                {"result_flag", m.result_flag},
                {"result_status", m.result_status},
                {"result_operator", m.result_operator},
                {"result_completed_at", m.result_completed_at}};
}

astm::AstmFieldMap astm_map_from_json(const json& j) {
    astm::AstmFieldMap m;
    m.order_sample_id = j.value("order_sample_id", m.order_sample_id);
    m.order_tests = j.value("order_tests", m.order_tests);
    m.order_priority = j.value("order_priority", m.order_priority);
    m.result_test_code = j.value("result_test_code", m.result_test_code);
    m.result_test_code_component = j.value("result_test_code_component", m.result_test_code_component);
    m.result_value = j.value("result_value", m.result_value);
    m.result_unit = j.value("result_unit", m.result_unit);
    m.result_ref_range = j.value("result_ref_range", m.result_ref_range);
    m.result_flag = j.value("result_flag", m.result_flag);
    m.result_status = j.value("result_status", m.result_status);
    m.result_operator = j.value("result_operator", m.result_operator);
    m.result_completed_at = j.value("result_completed_at", m.result_completed_at);
    return m;
}

json roles_to_json(const std::vector<gen::FieldRole>& roles) {
    json out = json::array();
    for (auto r : roles) out.push_back(gen::to_string(r));
    return out;
}

std::vector<gen::FieldRole> roles_from_json(const json& j) {
    std::vector<gen::FieldRole> out;
    for (const auto& item : j)
        if (auto r = gen::field_role_from_string(item.get<std::string>())) out.push_back(*r);
    return out;
}

json frame_to_json(const gen::FrameDescriptor& d) {
    json out{{"start_byte", static_cast<int>(static_cast<unsigned char>(d.start_byte))},
             {"end_byte", static_cast<int>(static_cast<unsigned char>(d.end_byte))},
             {"has_bcc", d.has_bcc},
             {"bcc_kind", gen::to_string(d.bcc_kind)},
             {"field_separator", std::string(1, d.field_separator)},
             {"field_order", roles_to_json(d.field_order)}};
    if (!d.field_widths.empty()) out["field_widths"] = d.field_widths;
    if (d.ack_byte) out["ack_byte"] = static_cast<int>(static_cast<unsigned char>(*d.ack_byte));
    return out;
}

gen::FrameDescriptor frame_from_json(const json& j, const std::string& format_id) {
    gen::FrameDescriptor d;
    d.format_id = format_id;
    d.start_byte = static_cast<char>(j.value("start_byte", 2));
    d.end_byte = static_cast<char>(j.value("end_byte", 3));
    d.has_bcc = j.value("has_bcc", false);
    if (auto k = gen::bcc_kind_from_string(j.value("bcc_kind", "xor"))) d.bcc_kind = *k;
    std::string sep = j.value("field_separator", ";");
    if (!sep.empty()) d.field_separator = sep[0];
    if (j.contains("field_widths")) d.field_widths = j["field_widths"].get<std::vector<int>>();
    if (j.contains("field_order")) d.field_order = roles_from_json(j["field_order"]);
    if (j.contains("ack_byte") && !j["ack_byte"].is_null())
        d.ack_byte = static_cast<char>(j["ack_byte"].get<int>());
    return d;
}

json file_to_json(const gen::FileDescriptor& d) {
    json out{{"extension", d.extension},
             {"line_separator", static_cast<int>(static_cast<unsigned char>(d.line_separator))},
             {"column_separator", static_cast<int>(static_cast<unsigned char>(d.column_separator))},
             {"field_order", roles_to_json(d.field_order)},
             {"header_lines_to_skip", d.header_lines_to_skip}};
    if (!d.column_widths.empty()) out["column_widths"] = d.column_widths;
    return out;
}

gen::FileDescriptor file_from_json(const json& j, const std::string& format_id) {
    gen::FileDescriptor d;
    d.format_id = format_id;
    d.extension = j.value("extension", ".upl");
    d.line_separator = static_cast<char>(j.value("line_separator", 10));
    d.column_separator = static_cast<char>(j.value("column_separator", 9));
    if (j.contains("column_widths")) d.column_widths = j["column_widths"].get<std::vector<int>>();
    if (j.contains("field_order")) d.field_order = roles_from_json(j["field_order"]);
    d.header_lines_to_skip = j.value("header_lines_to_skip", 0);
    return d;
}

json format_to_json(const FormatDefinition& def) {
    json out{{"format_id", def.format_id}, {"kind", kind_to_string(def.kind)}};
    switch (def.kind) {
        case FormatDefinition::Kind::astm: out["astm_map"] = astm_map_to_json(def.astm_map); break;
        case FormatDefinition::Kind::generic_frame: out["frame"] = frame_to_json(def.frame); break;
        case FormatDefinition::Kind::file: out["file"] = file_to_json(def.file); break;
        case FormatDefinition::Kind::hl7: break;
    }
    return out;
}

Result<FormatDefinition> format_from_json(const json& j) {
    FormatDefinition def;
    def.format_id = j.value("format_id", "");
    auto kind = kind_from_string(j.value("kind", ""));
    if (def.format_id.empty() || !kind)
        return Result<FormatDefinition>::failure("bad_registry_file", "format entry lacks id or kind");
    def.kind = *kind;
    switch (def.kind) {
        case FormatDefinition::Kind::astm:
            if (j.contains("astm_map")) def.astm_map = astm_map_from_json(j["astm_map"]);
            break;
        case FormatDefinition::Kind::generic_frame:
            def.frame = frame_from_json(j.value("frame", json::object()), def.format_id);
            break;
        case FormatDefinition::Kind::file:
            def.file = file_from_json(j.value("file", json::object()), def.format_id);
            break;
        case FormatDefinition::Kind::hl7: break;
    }
    return def;
}

json device_to_json(const DeviceProfile& p) {
    json out{{"device_id", p.device_id},
             {"display_name", p.display_name},
             {"protocol", to_string(p.protocol)},
             {"mode", to_string(p.mode)},
             {"format_id", p.format_id},
             {"listen_endpoint", p.listen_endpoint},
             {"facility_id", p.facility_id},
             {"comm_settings",
              {{"baud_rate", p.comm_settings.baud_rate},
               {"data_bits", p.comm_settings.data_bits},
               {"parity", p.comm_settings.parity},
               {"stop_bits", p.comm_settings.stop_bits},
               {"timeout_ms", p.comm_settings.timeout_ms},
               {"bcc_check", p.comm_settings.bcc_check}}}};
    if (p.file_format_id) out["file_format_id"] = *p.file_format_id;
    return out;
}

Result<DeviceProfile> device_from_json(const json& j) {
    DeviceProfile p;
    p.device_id = j.value("device_id", "");
    p.display_name = j.value("display_name", "");
    auto proto = protocol_from_string(j.value("protocol", ""));
    auto mode = mode_from_string(j.value("mode", "unidirectional"));
    if (p.device_id.empty() || !proto || !mode)
        return Result<DeviceProfile>::failure("bad_registry_file", "device entry malformed");
    p.protocol = *proto;
    p.mode = *mode;
    p.format_id = j.value("format_id", "");
    p.listen_endpoint = j.value("listen_endpoint", "");
    p.facility_id = j.value("facility_id", "");
    if (j.contains("file_format_id") && !j["file_format_id"].is_null())
        p.file_format_id = j["file_format_id"].get<std::string>();
    if (j.contains("comm_settings")) {
        const json& c = j["comm_settings"];
        p.comm_settings.baud_rate = c.value("baud_rate", 9600);
        p.comm_settings.data_bits = c.value("data_bits", 8);
        p.comm_settings.parity = c.value("parity", "N");
        p.comm_settings.stop_bits = c.value("stop_bits", 1);
        p.comm_settings.timeout_ms = c.value("timeout_ms", 30000);
        p.comm_settings.bcc_check = c.value("bcc_check", false);
    }
    return p;
}

Result<json> read_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return Result<json>::failure("missing_file", path);
    std::stringstream ss;
    ss << in.rdbuf();
    json j = json::parse(ss.str(), nullptr, false);
    if (j.is_discarded()) return Result<json>::failure("bad_registry_file", path + " is not valid JSON");
    return j;
}

}  // namespace

Status write_json_atomic(const std::string& path, const std::string& body) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) return fail("io_error", "cannot write " + tmp);
        out << body;
        out.flush();
        if (!out) return fail("io_error", "write failed for " + tmp);
    }
    int fd = ::open(tmp.c_str(), O_RDONLY);
    if (fd >= 0) {
        ::fsync(fd);
        ::close(fd);
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) return fail("io_error", "rename failed: " + ec.message());
    return ok_status();
}

const std::vector<FormatDefinition>& builtin_formats() {
    static const std::vector<FormatDefinition> formats = [] {
        std::vector<FormatDefinition> out;

        FormatDefinition astm_std;
        astm_std.format_id = "FMT-ASTM-01";
        astm_std.kind = FormatDefinition::Kind::astm;
        out.push_back(astm_std);

        // CLASS-A-style ASTM override: plain test codes, shifted O/R fields.
        FormatDefinition class_a;
        class_a.format_id = "FMT-CLASSA-02";
        class_a.kind = FormatDefinition::Kind::astm;
        class_a.astm_map.order_sample_id = 4;
        class_a.astm_map.order_tests = 6;
        class_a.astm_map.order_priority = 7;
        class_a.astm_map.result_test_code = 3;
        class_a.astm_map.result_test_code_component = 1;
        class_a.astm_map.result_value = 4;
        class_a.astm_map.result_unit = 5;
        class_a.astm_map.result_ref_range = 6;
        class_a.astm_map.result_flag = 7;
        class_a.astm_map.result_status = 8;
        class_a.astm_map.result_operator = 10;
        class_a.astm_map.result_completed_at = 12;
        out.push_back(class_a);

        // CLASS-B-style ASTM override: extra vendor field before the flag.
        FormatDefinition class_b;
        class_b.format_id = "FMT-CLASSB-03";
        class_b.kind = FormatDefinition::Kind::astm;
        class_b.astm_map.result_flag = 8;
        class_b.astm_map.result_status = 10;
        class_b.astm_map.result_operator = 12;
        class_b.astm_map.result_completed_at = 14;
        out.push_back(class_b);

        FormatDefinition gen_a;
        gen_a.format_id = "FMT-GEN-CLASSA-01";
        gen_a.kind = FormatDefinition::Kind::generic_frame;
        gen_a.frame.format_id = gen_a.format_id;
        gen_a.frame.has_bcc = true;
        gen_a.frame.bcc_kind = gen::BccKind::xor_;
        gen_a.frame.field_separator = ';';
        gen_a.frame.field_order = {gen::FieldRole::sample_id, gen::FieldRole::test_code,
                                   gen::FieldRole::value,     gen::FieldRole::unit,
                                   gen::FieldRole::ref_range, gen::FieldRole::flag};
        gen_a.frame.ack_byte = 0x06;
        out.push_back(gen_a);

        FormatDefinition gen_b;
        gen_b.format_id = "FMT-GEN-CLASSB-01";
        gen_b.kind = FormatDefinition::Kind::generic_frame;
        gen_b.frame.format_id = gen_b.format_id;
        gen_b.frame.has_bcc = true;
        gen_b.frame.bcc_kind = gen::BccKind::sum_mod_256;
        gen_b.frame.field_widths = {12, 8, 10, 8, 12, 2};
        gen_b.frame.field_order = {gen::FieldRole::sample_id, gen::FieldRole::test_code,
                                   gen::FieldRole::value,     gen::FieldRole::unit,
                                   gen::FieldRole::ref_range, gen::FieldRole::flag};
        gen_b.frame.ack_byte = 0x06;
        out.push_back(gen_b);

        FormatDefinition upl;
        upl.format_id = "FMT-UPL-01";
        upl.kind = FormatDefinition::Kind::file;
        upl.file.format_id = upl.format_id;
        upl.file.extension = ".upl";
        upl.file.line_separator = '\n';
        upl.file.column_separator = '\t';
        upl.file.header_lines_to_skip = 1;
        upl.file.field_order = {gen::FieldRole::sample_id, gen::FieldRole::test_code,
                                gen::FieldRole::value,     gen::FieldRole::unit,
                                gen::FieldRole::ref_range, gen::FieldRole::flag,
                                gen::FieldRole::status};
        out.push_back(upl);

        FormatDefinition hl7;
        hl7.format_id = "FMT-HL7-01";
        hl7.kind = FormatDefinition::Kind::hl7;
        out.push_back(hl7);

        return out;
    }();
    return formats;
}

const DeviceProfile* RegistrySnapshot::find_device(const std::string& device_id) const {
    for (const auto& d : devices_)
        if (d.device_id == device_id) return &d;
    return nullptr;
}

const UserRecord* RegistrySnapshot::find_user(const std::string& operator_id) const {
    for (const auto& u : users_)
        if (u.operator_id == operator_id) return &u;
    return nullptr;
}

const FormatDefinition* RegistrySnapshot::find_format(const std::string& format_id) const {
    auto it = formats_.find(format_id);
    return it == formats_.end() ? nullptr : &it->second;
}

Result<ResolvedFormat> RegistrySnapshot::resolve_format(const std::string& device_id) const {
    const DeviceProfile* device = find_device(device_id);
    if (!device) return Result<ResolvedFormat>::failure("unknown_device", device_id);
    const FormatDefinition* def = find_format(device->format_id);
    if (!def) return Result<ResolvedFormat>::failure("unknown_format", device->format_id);
    return ResolvedFormat{device->protocol, device->format_id, *def};
}

Result<FormatDefinition> RegistrySnapshot::resolve_file_format(const std::string& device_id) const {
    const DeviceProfile* device = find_device(device_id);
    if (!device) return Result<FormatDefinition>::failure("unknown_device", device_id);
    std::string id;
    if (device->protocol == Protocol::file_only) id = device->format_id;
    else if (device->file_format_id) id = *device->file_format_id;
    if (id.empty())
        return Result<FormatDefinition>::failure("no_file_format",
                                                 device_id + " has no file ingestion layout");
    const FormatDefinition* def = find_format(id);
    if (!def || def->kind != FormatDefinition::Kind::file)
        return Result<FormatDefinition>::failure("unknown_format", id);
    return *def;
}

Result<TestMapping> RegistrySnapshot::map_test_code(const std::string& device_id,
                                                    const std::string& machine_code) const {
    // Exact match only: silent fuzzy mismapping is a patient-safety hazard.
    for (const auto& m : mappings_) {
        if (m.device_id == device_id && m.machine_test_code == machine_code)
            return TestMapping{m.test_id, m.canonical_unit, m.conversion_factor};
    }
    return Result<TestMapping>::failure("unmapped_test_code", device_id + "/" + machine_code);
}

Registry::Registry(std::string dir) : dir_(std::move(dir)) {
    auto snap = std::make_shared<RegistrySnapshot>();
    for (const auto& f : builtin_formats()) snap->formats_[f.format_id] = f;
    snapshot_ = snap;
}

std::shared_ptr<const RegistrySnapshot> Registry::snapshot() const {
    std::lock_guard lock(mutex_);
    return snapshot_;
}

Status Registry::load() {
    std::lock_guard lock(mutex_);
    auto snap = std::make_shared<RegistrySnapshot>();
    for (const auto& f : builtin_formats()) snap->formats_[f.format_id] = f;

    std::error_code ec;
    fs::create_directories(dir_, ec);

    if (fs::exists(dir_ + "/formats.json")) {
        auto j = read_json_file(dir_ + "/formats.json");
        if (!j.ok()) return j.error();
        for (const auto& item : j.value().value("formats", json::array())) {
            auto def = format_from_json(item);
            if (!def.ok()) return def.error();
            snap->formats_[def.value().format_id] = def.value();
        }
    }
    if (fs::exists(dir_ + "/devices.json")) {
        auto j = read_json_file(dir_ + "/devices.json");
        if (!j.ok()) return j.error();
        for (const auto& item : j.value().value("devices", json::array())) {
            auto dev = device_from_json(item);
            if (!dev.ok()) return dev.error();
            if (auto err = check_profile(*snap, dev.value(), false)) return err;
            snap->devices_.push_back(std::move(dev.value()));
        }
    }
    if (fs::exists(dir_ + "/mappings.json")) {
        auto j = read_json_file(dir_ + "/mappings.json");
        if (!j.ok()) return j.error();
        for (const auto& item : j.value().value("mappings", json::array())) {
            TestParameterMapping m;
            m.device_id = item.value("device_id", "");
            m.machine_test_code = item.value("machine_test_code", "");
            m.test_id = item.value("test_id", "");
            if (item.contains("canonical_unit") && !item["canonical_unit"].is_null())
                m.canonical_unit = item["canonical_unit"].get<std::string>();
            auto factor = Decimal::parse(item.value("conversion_factor", "1"));
            if (!factor) return fail("bad_registry_file", "bad conversion factor");
            m.conversion_factor = *factor;
            snap->mappings_.push_back(std::move(m));
        }
    }
    if (fs::exists(dir_ + "/users.json")) {
        auto j = read_json_file(dir_ + "/users.json");
        if (!j.ok()) return j.error();
        for (const auto& item : j.value().value("users", json::array())) {
            UserRecord u;
            u.operator_id = item.value("operator_id", "");
            u.display_name = item.value("display_name", "");
            u.role = item.value("role", "technician") == "admin" ? UserRecord::Role::admin
                                                                 : UserRecord::Role::technician;
            snap->users_.push_back(std::move(u));
        }
    }
    snapshot_ = snap;
    return ok_status();
}

Status Registry::check_profile(const RegistrySnapshot& snap, const DeviceProfile& profile,
                               bool allow_existing) {
    if (profile.device_id.empty()) return fail("invalid_profile", "device_id is empty");
    if (!allow_existing && snap.find_device(profile.device_id))
        return fail("duplicate_device_id", profile.device_id);
    if (profile.mode == DeviceMode::bidirectional && profile.protocol != Protocol::astm)
        return fail("invalid_mode_for_protocol", "bidirectional requires the astm protocol");
    if (profile.protocol != Protocol::file_only) {
        if (profile.listen_endpoint.empty())
            return fail("invalid_profile", "stream device needs a listen_endpoint");
        for (const auto& d : snap.devices_) {
            if (d.device_id == profile.device_id) continue;
            if (!d.listen_endpoint.empty() && d.listen_endpoint == profile.listen_endpoint)
                return fail("endpoint_conflict", profile.device_id + " and " + d.device_id +
                                                     " both use " + profile.listen_endpoint);
        }
    }
    const FormatDefinition* def = snap.find_format(profile.format_id);
    if (!def) return fail("unknown_format", profile.format_id);
    if (def->kind != kind_for_protocol(profile.protocol))
        return fail("unknown_format",
                    profile.format_id + " is not usable with protocol " + to_string(profile.protocol));
    if (profile.file_format_id) {
        const FormatDefinition* fdef = snap.find_format(*profile.file_format_id);
        if (!fdef || fdef->kind != FormatDefinition::Kind::file)
            return fail("unknown_format", *profile.file_format_id);
    }
    return ok_status();
}

Result<std::string> Registry::register_device(const DeviceProfile& profile) {
    std::lock_guard lock(mutex_);
    if (auto err = check_profile(*snapshot_, profile, false))
        return Result<std::string>::failure(err->code, err->detail);
    auto snap = std::make_shared<RegistrySnapshot>(*snapshot_);
    snap->devices_.push_back(profile);
    snapshot_ = snap;
    if (auto err = persist_locked()) return Result<std::string>::failure(err->code, err->detail);
    return profile.device_id;
}

Status Registry::update_format(const std::string& device_id, const std::string& new_format_id) {
    std::lock_guard lock(mutex_);
    const DeviceProfile* device = snapshot_->find_device(device_id);
    if (!device) return fail("unknown_device", device_id);
    const FormatDefinition* def = snapshot_->find_format(new_format_id);
    if (!def) return fail("unknown_format", new_format_id);
    if (def->kind != kind_for_protocol(device->protocol))
        return fail("unknown_format",
                    new_format_id + " is not usable with protocol " + to_string(device->protocol));
    auto snap = std::make_shared<RegistrySnapshot>(*snapshot_);
    for (auto& d : snap->devices_)
        if (d.device_id == device_id) d.format_id = new_format_id;
    snapshot_ = snap;  // takes effect for the device's next session
    return persist_locked();
}

Status Registry::upsert_mapping(const TestParameterMapping& mapping) {
    if (mapping.device_id.empty() || mapping.machine_test_code.empty() || mapping.test_id.empty())
        return fail("invalid_mapping", "device_id, machine_test_code and test_id are required");
    Decimal zero{0, 0};
    if (mapping.conversion_factor <= zero) return fail("invalid_mapping", "conversion_factor must be > 0");
    std::lock_guard lock(mutex_);
    auto snap = std::make_shared<RegistrySnapshot>(*snapshot_);
    bool replaced = false;
    for (auto& m : snap->mappings_) {
        if (m.device_id == mapping.device_id && m.machine_test_code == mapping.machine_test_code) {
            m = mapping;
            replaced = true;
        }
    }
    if (!replaced) snap->mappings_.push_back(mapping);
    snapshot_ = snap;
    return persist_locked();
}

Status Registry::upsert_user(const UserRecord& user) {
    if (user.operator_id.empty()) return fail("invalid_user", "operator_id is empty");
    std::lock_guard lock(mutex_);
    auto snap = std::make_shared<RegistrySnapshot>(*snapshot_);
    bool replaced = false;
    for (auto& u : snap->users_) {
        if (u.operator_id == user.operator_id) {
            u = user;
            replaced = true;
        }
    }
    if (!replaced) snap->users_.push_back(user);
    snapshot_ = snap;
    return persist_locked();
}

Status Registry::add_format(const FormatDefinition& def) {
    if (def.format_id.empty()) return fail("invalid_format", "format_id is empty");
    if (def.kind == FormatDefinition::Kind::generic_frame) {
        if (auto err = def.frame.validate()) return err;
    } else if (def.kind == FormatDefinition::Kind::file) {
        if (auto err = def.file.validate()) return err;
    }
    std::lock_guard lock(mutex_);
    auto snap = std::make_shared<RegistrySnapshot>(*snapshot_);
    snap->formats_[def.format_id] = def;
    snapshot_ = snap;
    return persist_locked();
}

Status Registry::persist_locked() {
    std::error_code ec;
    fs::create_directories(dir_, ec);

    json devices = json::array();
    for (const auto& d : snapshot_->devices_) devices.push_back(device_to_json(d));
    if (auto err = write_json_atomic(dir_ + "/devices.json",
                                     json{{"schema_version", 1}, {"devices", devices}}.dump(2) + "\n"))
        return err;

    json mappings = json::array();
    for (const auto& m : snapshot_->mappings_) {
        json item{{"device_id", m.device_id},
                  {"machine_test_code", m.machine_test_code},
                  {"test_id", m.test_id},
                  {"conversion_factor", m.conversion_factor.to_string()}};
        if (m.canonical_unit) item["canonical_unit"] = *m.canonical_unit;
        mappings.push_back(std::move(item));
    }
    if (auto err = write_json_atomic(dir_ + "/mappings.json",
                                     json{{"schema_version", 1}, {"mappings", mappings}}.dump(2) + "\n"))
        return err;

    json users = json::array();
    for (const auto& u : snapshot_->users_)
        users.push_back(json{{"operator_id", u.operator_id},
                             {"display_name", u.display_name},
                             {"role", u.role == UserRecord::Role::admin ? "admin" : "technician"}});
    if (auto err = write_json_atomic(dir_ + "/users.json",
                                     json{{"schema_version", 1}, {"users", users}}.dump(2) + "\n"))
        return err;

    std::set<std::string> builtin_ids;
    for (const auto& f : builtin_formats()) builtin_ids.insert(f.format_id);
    json formats = json::array();
    for (const auto& [id, def] : snapshot_->formats_)
        if (!builtin_ids.count(id)) formats.push_back(format_to_json(def));
    return write_json_atomic(dir_ + "/formats.json",
                             json{{"schema_version", 1}, {"formats", formats}}.dump(2) + "\n");
}


json device_profile_to_json(const DeviceProfile& profile) { return device_to_json(profile); }

Result<DeviceProfile> device_profile_from_json(const json& j) { return device_from_json(j); }

json test_mapping_to_json(const TestParameterMapping& m) {
    json item{{"device_id", m.device_id},
              {"machine_test_code", m.machine_test_code},
              {"test_id", m.test_id},
              {"conversion_factor", m.conversion_factor.to_string()}};
    if (m.canonical_unit) item["canonical_unit"] = *m.canonical_unit;
    return item;
}

Result<TestParameterMapping> test_mapping_from_json(const json& j) {
    TestParameterMapping m;
    m.device_id = j.value("device_id", "");
    m.machine_test_code = j.value("machine_test_code", "");
    m.test_id = j.value("test_id", "");
    if (j.contains("canonical_unit") && !j["canonical_unit"].is_null())
        m.canonical_unit = j["canonical_unit"].get<std::string>();
    auto factor = Decimal::parse(j.value("conversion_factor", "1"));
    if (!factor) return Result<TestParameterMapping>::failure("invalid_mapping", "bad conversion factor");
    m.conversion_factor = *factor;
    if (m.device_id.empty() || m.machine_test_code.empty() || m.test_id.empty())
        return Result<TestParameterMapping>::failure("invalid_mapping", "missing required fields");
    return m;
}

json user_to_json(const UserRecord& u) {
    return json{{"operator_id", u.operator_id},
                {"display_name", u.display_name},
                {"role", u.role == UserRecord::Role::admin ? "admin" : "technician"}};
}

Result<UserRecord> user_from_json(const json& j) {
    UserRecord u;
    u.operator_id = j.value("operator_id", "");
    u.display_name = j.value("display_name", "");
    u.role = j.value("role", "technician") == "admin" ? UserRecord::Role::admin
                                                      : UserRecord::Role::technician;
    if (u.operator_id.empty()) return Result<UserRecord>::failure("invalid_user", "operator_id is empty");
    return u;
}

json format_definition_to_json(const FormatDefinition& def) { return format_to_json(def); }

Result<FormatDefinition> format_definition_from_json(const json& j) { return format_from_json(j); }

}  // namespace gmei
