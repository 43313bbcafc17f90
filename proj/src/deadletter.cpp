#include "gmei/deadletter.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "gmei/domain.hpp"
#include "gmei/registry.hpp"
#include "gmei/util.hpp"

namespace gmei {

using nlohmann::json;

DeadLetterStore::DeadLetterStore(std::string path) : path_(std::move(path)) {}

Status DeadLetterStore::open() {
    std::lock_guard lock(mutex_);
    entries_.clear();
    next_id_ = 1;
    std::ifstream in(path_, std::ios::binary);
    if (!in) return ok_status();  // nothing persisted yet
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded()) continue;  // torn tail line
        DeadLetter dl;
        dl.id = j.value("id", 0ull);
        dl.device_id = j.value("device_id", "");
        dl.payload = util::base64_decode(j.value("payload_b64", ""));
        dl.reason = j.value("reason", "");
        dl.occurred_at = j.value("occurred_at", "");
        next_id_ = std::max(next_id_, dl.id + 1);
        entries_.push_back(std::move(dl));
    }
    return ok_status();
}

std::uint64_t DeadLetterStore::add(const std::string& device_id, const std::string& payload,
                                   const std::string& reason) {
    std::lock_guard lock(mutex_);
    DeadLetter dl{next_id_++, device_id, payload, reason, now_utc_iso8601()};
    json j{{"id", dl.id},
           {"device_id", dl.device_id},
           {"payload_b64", util::base64_encode(dl.payload)},
           {"reason", dl.reason},
           {"occurred_at", dl.occurred_at}};
    std::ofstream out(path_, std::ios::binary | std::ios::app);
    if (out) out << j.dump() << "\n";
    entries_.push_back(std::move(dl));
    return entries_.back().id;
}

std::vector<DeadLetter> DeadLetterStore::entries() const {
    std::lock_guard lock(mutex_);
    return entries_;
}

std::size_t DeadLetterStore::count() const {
    std::lock_guard lock(mutex_);
    return entries_.size();
}

std::size_t DeadLetterStore::count_for(const std::string& device_id) const {
    std::lock_guard lock(mutex_);
    std::size_t n = 0;
    for (const auto& e : entries_)
        if (e.device_id == device_id) ++n;
    return n;
}

Status DeadLetterStore::drain_up_to(std::uint64_t up_to_id) {
    std::lock_guard lock(mutex_);
    std::vector<DeadLetter> keep;
    for (auto& e : entries_)
        if (e.id > up_to_id) keep.push_back(std::move(e));
    entries_ = std::move(keep);
    return persist_locked();
}

Status DeadLetterStore::persist_locked() {
    std::ostringstream body;
    for (const auto& e : entries_) {
        json j{{"id", e.id},
               {"device_id", e.device_id},
               {"payload_b64", util::base64_encode(e.payload)},
               {"reason", e.reason},
               {"occurred_at", e.occurred_at}};
        body << j.dump() << "\n";
    }
    return write_json_atomic(path_, body.str());
}

}  // namespace gmei
