#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "gmei/domain.hpp"
#include "gmei/result.hpp"

namespace gmei {

// What goes over POST /api/v1/results.
struct UploadEnvelope {
    int schema_version = 1;
    std::string gateway_id;
    std::string idempotency_key;  // gateway_id:device_id:first-last
    std::vector<ObservationResult> observations;  // single device, contiguous sequences

    const std::string& device_id() const { return observations.front().device_id; }
    std::uint64_t first_sequence() const { return observations.front().sequence; }
    std::uint64_t last_sequence() const { return observations.back().sequence; }

    static std::string make_key(const std::string& gateway_id, const std::string& device_id,
                                std::uint64_t first, std::uint64_t last);
};

// Wire field names are part of the external contract; every key is always
// present, with null for absent optionals.
nlohmann::json observation_to_wire(const ObservationResult& obs);
Result<ObservationResult> observation_from_wire(const nlohmann::json& j, const std::string& gateway_id);

nlohmann::json envelope_to_wire(const UploadEnvelope& envelope);
Result<UploadEnvelope> envelope_from_wire(const nlohmann::json& j);

nlohmann::json worklist_to_wire(const WorklistOrder& order);
Result<WorklistOrder> worklist_from_wire(const nlohmann::json& j);

}  // namespace gmei
