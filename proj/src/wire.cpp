#include "gmei/wire.hpp"

namespace gmei {

using nlohmann::json;

namespace {

json decimal_to_json(const Decimal& d) {
    // Emit through the JSON number parser so the wire carries a number token
    // with the decimal's canonical text.
    return json::parse(d.to_string());
}

std::optional<Decimal> decimal_from_json(const json& j) {
    if (j.is_null()) return std::nullopt;
    if (j.is_string()) return Decimal::parse(j.get<std::string>());
    return Decimal::parse(j.dump());
}

json opt_string(const std::optional<std::string>& s) {
    return s ? json(*s) : json(nullptr);
}

std::optional<std::string> opt_string_from(const json& j, const char* key) {
    if (!j.contains(key) || j[key].is_null()) return std::nullopt;
    return j[key].get<std::string>();
}

}  // namespace

std::string UploadEnvelope::make_key(const std::string& gateway_id, const std::string& device_id,
                                     std::uint64_t first, std::uint64_t last) {
    return gateway_id + ":" + device_id + ":" + std::to_string(first) + "-" + std::to_string(last);
}

json observation_to_wire(const ObservationResult& obs) {
    json j;
    j["device_id"] = obs.device_id;
    j["sample_id"] = obs.sample_id;
    j["test_id"] = obs.test_id;
    j["machine_test_code"] = obs.machine_test_code;
    j["value"] = obs.value.is_numeric() ? decimal_to_json(*obs.value.number) : json(obs.value.text);
    j["unit"] = opt_string(obs.unit);
    j["ref_low"] = obs.ref_low ? decimal_to_json(*obs.ref_low) : json(nullptr);
    j["ref_high"] = obs.ref_high ? decimal_to_json(*obs.ref_high) : json(nullptr);
    j["abnormal_flag"] = obs.abnormal_flag ? json(to_string(*obs.abnormal_flag)) : json(nullptr);
    j["result_status"] = to_string(obs.result_status);
    j["observed_at"] = opt_string(obs.observed_at);
    j["received_at"] = obs.received_at;
    j["operator_id"] = opt_string(obs.operator_id);
    j["sequence"] = obs.sequence;
    return j;
}

Result<ObservationResult> observation_from_wire(const json& j, const std::string& gateway_id) {
    using R = Result<ObservationResult>;
    if (!j.is_object()) return R::failure("bad_wire", "observation is not an object");
    ObservationResult obs;
    obs.gateway_id = gateway_id;
    obs.device_id = j.value("device_id", "");
    obs.sample_id = j.value("sample_id", "");
    obs.test_id = j.value("test_id", "");
    obs.machine_test_code = j.value("machine_test_code", "");
    if (!j.contains("value")) return R::failure("bad_wire", "observation lacks value");
    if (j["value"].is_string()) {
        obs.value = ObservationValue::from_raw(j["value"].get<std::string>());
        obs.value.number.reset();  // string on the wire stays text
        obs.value.text = j["value"].get<std::string>();
    } else if (auto d = decimal_from_json(j["value"])) {
        obs.value = ObservationValue::from_decimal(*d);
    } else {
        return R::failure("bad_wire", "value is neither text nor decimal");
    }
    obs.unit = opt_string_from(j, "unit");
    if (j.contains("ref_low")) obs.ref_low = decimal_from_json(j["ref_low"]);
    if (j.contains("ref_high")) obs.ref_high = decimal_from_json(j["ref_high"]);
    if (auto f = opt_string_from(j, "abnormal_flag")) obs.abnormal_flag = abnormal_flag_from_string(*f);
    if (auto s = result_status_from_string(j.value("result_status", "final"))) obs.result_status = *s;
    obs.observed_at = opt_string_from(j, "observed_at");
    obs.received_at = j.value("received_at", "");
    obs.operator_id = opt_string_from(j, "operator_id");
    obs.sequence = j.value("sequence", 0ull);
    return obs;
}

json envelope_to_wire(const UploadEnvelope& envelope) {
    json observations = json::array();
    for (const auto& obs : envelope.observations) observations.push_back(observation_to_wire(obs));
    return json{{"schema_version", envelope.schema_version},
                {"gateway_id", envelope.gateway_id},
                {"idempotency_key", envelope.idempotency_key},
                {"observations", std::move(observations)}};
}

Result<UploadEnvelope> envelope_from_wire(const json& j) {
    using R = Result<UploadEnvelope>;
    if (!j.is_object() || !j.contains("observations") || !j["observations"].is_array() ||
        j["observations"].empty())
        return R::failure("bad_wire", "envelope lacks observations");
    UploadEnvelope env;
    env.schema_version = j.value("schema_version", 0);
    env.gateway_id = j.value("gateway_id", "");
    env.idempotency_key = j.value("idempotency_key", "");
    if (env.schema_version != 1) return R::failure("bad_wire", "unsupported schema_version");
    if (env.gateway_id.empty() || env.idempotency_key.empty())
        return R::failure("bad_wire", "envelope lacks gateway_id or idempotency_key");
    for (const auto& item : j["observations"]) {
        auto obs = observation_from_wire(item, env.gateway_id);
        if (!obs.ok()) return R::failure(obs.error().code, obs.error().detail);
        env.observations.push_back(std::move(obs.value()));
    }
    return env;
}

json worklist_to_wire(const WorklistOrder& order) {
    return json{{"sample_id", order.sample_id},
                {"patient_ref", opt_string(order.patient_ref)},
                {"tests", order.tests},
                {"priority", to_string(order.priority)}};
}

Result<WorklistOrder> worklist_from_wire(const json& j) {
    using R = Result<WorklistOrder>;
    if (!j.is_object()) return R::failure("bad_wire", "worklist is not an object");
    WorklistOrder order;
    order.sample_id = j.value("sample_id", "");
    order.patient_ref = opt_string_from(j, "patient_ref");
    if (j.contains("tests")) order.tests = j["tests"].get<std::vector<std::string>>();
    if (auto p = priority_from_string(j.value("priority", "routine"))) order.priority = *p;
    if (!validate_worklist_order(order).empty())
        return R::failure("bad_wire", "worklist order violates invariants");
    return order;
}

}  // namespace gmei
