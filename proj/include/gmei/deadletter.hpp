#pragma once

#include <cstdint>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "gmei/result.hpp"

namespace gmei {

// Received-but-unnormalizable results, parked for operator action instead of
// being dropped. Persisted until exported; export drains.
struct DeadLetter {
    std::uint64_t id = 0;
    std::string device_id;
    std::string payload;  // raw bytes or serialized raw result
    std::string reason;   // unmapped_test_code | orphan_result | parse error code
    std::string occurred_at;
};

class DeadLetterStore {
public:
    explicit DeadLetterStore(std::string path);

    Status open();
    std::uint64_t add(const std::string& device_id, const std::string& payload, const std::string& reason);
    std::vector<DeadLetter> entries() const;
    std::size_t count() const;
    std::size_t count_for(const std::string& device_id) const;
    // Removes entries with id <= up_to_id after they were written elsewhere.
    Status drain_up_to(std::uint64_t up_to_id);

private:
    Status persist_locked();

    std::string path_;
    mutable std::mutex mutex_;
    std::vector<DeadLetter> entries_;
    std::uint64_t next_id_ = 1;
};

}  // namespace gmei
