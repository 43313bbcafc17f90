#include "gmei/domain.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <set>

namespace gmei {

std::string to_string(AbnormalFlag f) {
    switch (f) {
        case AbnormalFlag::N: return "N";
        case AbnormalFlag::L: return "L";
        case AbnormalFlag::H: return "H";
        case AbnormalFlag::LL: return "LL";
        case AbnormalFlag::HH: return "HH";
        case AbnormalFlag::A: return "A";
    }
    return "N";
}

std::optional<AbnormalFlag> abnormal_flag_from_string(const std::string& s) {
    if (s == "N") return AbnormalFlag::N;
    if (s == "L") return AbnormalFlag::L;
    if (s == "H") return AbnormalFlag::H;
    if (s == "LL") return AbnormalFlag::LL;
    if (s == "HH") return AbnormalFlag::HH;
    if (s == "A") return AbnormalFlag::A;
    return std::nullopt;
}

std::string to_string(ResultStatus s) {
    switch (s) {
        case ResultStatus::final_: return "final";
        case ResultStatus::preliminary: return "preliminary";
        case ResultStatus::corrected: return "corrected";
    }
    return "final";
}

std::optional<ResultStatus> result_status_from_string(const std::string& s) {
    if (s == "final" || s == "F") return ResultStatus::final_;
    if (s == "preliminary" || s == "P") return ResultStatus::preliminary;
    if (s == "corrected" || s == "C") return ResultStatus::corrected;
    return std::nullopt;
}

std::string to_string(OrderPriority p) {
    return p == OrderPriority::stat ? "stat" : "routine";
}

std::optional<OrderPriority> priority_from_string(const std::string& s) {
    if (s == "routine") return OrderPriority::routine;
    if (s == "stat") return OrderPriority::stat;
    return std::nullopt;
}

ObservationValue ObservationValue::from_raw(const std::string& raw) {
    ObservationValue v;
    if (auto d = Decimal::parse(raw)) {
        v.number = *d;
        v.text = d->to_string();
    } else {
        v.text = raw;
    }
    return v;
}

ObservationValue ObservationValue::from_decimal(const Decimal& d) {
    ObservationValue v;
    v.number = d;
    v.text = d.to_string();
    return v;
}

std::vector<Violation> validate_observation(const ObservationResult& obs) {
    std::vector<Violation> out;
    if (obs.test_id.empty()) out.push_back({"test_id_missing", "test_id missing"});
    if (obs.sample_id.empty()) out.push_back({"sample_id_missing", "sample_id missing"});
    if (obs.device_id.empty()) out.push_back({"device_id_missing", "device_id missing"});
    if (obs.gateway_id.empty()) out.push_back({"gateway_id_missing", "gateway_id missing"});
    if (obs.ref_low && obs.ref_high && !(*obs.ref_low <= *obs.ref_high))
        out.push_back({"ref_range_inverted", "ref_low > ref_high"});
    if (obs.received_at.empty()) out.push_back({"received_at_missing", "received_at missing"});
    if (obs.sequence == 0) out.push_back({"sequence_missing", "sequence not assigned"});
    return out;
}

std::vector<Violation> validate_worklist_order(const WorklistOrder& order) {
    std::vector<Violation> out;
    if (order.sample_id.empty()) out.push_back({"sample_id_missing", "sample_id missing"});
    if (order.tests.empty()) out.push_back({"tests_empty", "order has no tests"});
    std::set<std::string> seen;
    for (const auto& t : order.tests) {
        if (!seen.insert(t).second)
            out.push_back({"duplicate_test", "duplicate test " + t});
    }
    return out;
}

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t");
    if (a == std::string::npos) return {};
    std::size_t b = s.find_last_not_of(" \t");
    return s.substr(a, b - a + 1);
}

std::optional<RefRange> try_split(const std::string& raw, const std::string& sep) {
    std::size_t pos;
    if (sep == "-") {
        // For '-' the split point must not be a leading sign.
        pos = raw.find('-', 1);
        if (pos == std::string::npos) return std::nullopt;
        // Reject when the right side also has interior '-' (ambiguous).
        if (raw.find('-', pos + 2) != std::string::npos) return std::nullopt;
    } else {
        pos = raw.find(sep);
        if (pos == std::string::npos) return std::nullopt;
    }
    auto low = Decimal::parse(trim(raw.substr(0, pos)));
    auto high = Decimal::parse(trim(raw.substr(pos + sep.size())));
    if (!low || !high) return std::nullopt;
    if (!(*low <= *high)) return std::nullopt;
    return RefRange{low, high, std::nullopt};
}

}  // namespace

RefRange parse_ref_range(const std::string& raw, const std::string& delimiter_hint) {
    const std::string text = trim(raw);
    if (!text.empty()) {
        if (!delimiter_hint.empty()) {
            if (auto r = try_split(text, delimiter_hint)) return *r;
        }
        for (const char* sep : {" to ", "^", "-"}) {
            if (sep == delimiter_hint) continue;
            if (auto r = try_split(text, sep)) return *r;
        }
    }
    return RefRange{std::nullopt, std::nullopt, "unrecognized reference range: " + raw};
}

std::optional<std::string> parse_instrument_timestamp(const std::string& raw) {
    // YYYYMMDDHHMMSS with optional seconds. Kept verbatim; no zone math.
    if (raw.size() != 14 && raw.size() != 12) return std::nullopt;
    if (!std::all_of(raw.begin(), raw.end(),
                     [](unsigned char c) { return std::isdigit(c); }))
        return std::nullopt;
    int month = std::stoi(raw.substr(4, 2));
    int day = std::stoi(raw.substr(6, 2));
    int hour = std::stoi(raw.substr(8, 2));
    int minute = std::stoi(raw.substr(10, 2));
    int second = raw.size() == 14 ? std::stoi(raw.substr(12, 2)) : 0;
    if (month < 1 || month > 12 || day < 1 || day > 31) return std::nullopt;
    if (hour > 23 || minute > 59 || second > 59) return std::nullopt;
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%s-%s-%sT%02d:%02d:%02dZ", raw.substr(0, 4).c_str(),
                  raw.substr(4, 2).c_str(), raw.substr(6, 2).c_str(), hour, minute, second);
    return std::string(buf);
}

std::string now_utc_iso8601() {
    auto now = std::chrono::system_clock::now();
    std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%04d-%02d-%02dT%02d:%02d:%02dZ", tm.tm_year + 1900,
                  tm.tm_mon + 1, tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec);
    return buf;
}

}  // namespace gmei
