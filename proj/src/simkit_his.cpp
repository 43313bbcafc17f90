#include <atomic>
#include <cctype>
#include <set>
#include <map>
#include <mutex>
#include <random>
#include <thread>
#include <vector>

#include "gmei/net.hpp"
#include "gmei/simkit.hpp"
#include "gmei/util.hpp"
#include "gmei/wire.hpp"

namespace gmei::sim {

using nlohmann::json;

// Hand-rolled HTTP/1.1 server: the stub must be able to apply faults the
// usual server libraries refuse to produce, like closing the socket after
// committing the ledger but before the response bytes (a lost ack).
struct HisStub::Impl {
    std::string host;
    int port;
    FaultProfile faults;
    net::TcpListener listener;
    std::thread accept_thread;
    std::vector<std::thread> workers;
    std::atomic<bool> stop{false};

    mutable std::mutex mutex;
    std::mt19937_64 rng;
    std::map<std::string, WorklistOrder> worklist;
    // Ledger keyed by (gateway, device, sequence); duplicates counted, never stored.
    std::map<std::string, std::vector<LedgerEntry>> ledger_by_device;  // arrival order
    std::map<std::string, std::set<std::uint64_t>> seen_keys;          // gw|dev -> sequences
    std::uint64_t duplicate_count = 0;
    std::uint64_t request_count = 0;
    std::set<std::string> rejected_devices;

    Impl(std::string h, int p, FaultProfile f) : host(std::move(h)), port(p), faults(f), rng(f.seed) {}

    bool chance(double rate) {
        if (rate <= 0) return false;
        std::lock_guard lock(mutex);
        return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < rate;
    }

    // Applies one envelope to the ledger; returns {accepted, duplicates}.
    std::pair<int, int> apply_envelope(const UploadEnvelope& envelope) {
        std::lock_guard lock(mutex);
        int accepted = 0, dups = 0;
        for (const auto& obs : envelope.observations) {
            const std::string device_key = envelope.gateway_id + "|" + obs.device_id;
            auto& seen = seen_keys[device_key];
            if (seen.count(obs.sequence)) {
                ++dups;
                ++duplicate_count;
                continue;
            }
            seen.insert(obs.sequence);
            LedgerEntry entry;
            entry.gateway_id = envelope.gateway_id;
            entry.device_id = obs.device_id;
            entry.sequence = obs.sequence;
            entry.observation = observation_to_wire(obs);
            ledger_by_device[obs.device_id].push_back(std::move(entry));
            ++accepted;
        }
        return {accepted, dups};
    }

    static std::string http_response(int status, const std::string& body) {
        const char* text = status == 200 ? "OK" : status == 404 ? "Not Found" : "Bad Request";
        return "HTTP/1.1 " + std::to_string(status) + " " + text +
               "\r\nContent-Type: application/json\r\nContent-Length: " + std::to_string(body.size()) +
               "\r\nConnection: keep-alive\r\n\r\n" + body;
    }

    void serve_connection(net::TcpStream conn) {
        std::string buffer;
        while (!stop) {
            // Header block.
            std::size_t header_end;
            while ((header_end = buffer.find("\r\n\r\n")) == std::string::npos) {
                auto data = conn.read_some(200);
                if (!data.ok()) return;
                if (stop) return;
                buffer += data.value();
                if (buffer.size() > 1 << 20) return;
            }
            const std::string head = buffer.substr(0, header_end);
            std::size_t line_end = head.find("\r\n");
            const std::string request_line = head.substr(0, line_end);
            std::size_t sp1 = request_line.find(' ');
            std::size_t sp2 = request_line.find(' ', sp1 + 1);
            if (sp1 == std::string::npos || sp2 == std::string::npos) return;
            const std::string method = request_line.substr(0, sp1);
            const std::string path = request_line.substr(sp1 + 1, sp2 - sp1 - 1);

            std::size_t content_length = 0;
            std::size_t pos = line_end + 2;
            while (pos < head.size()) {
                std::size_t next = head.find("\r\n", pos);
                if (next == std::string::npos) next = head.size();
                std::string line = head.substr(pos, next - pos);
                std::size_t colon = line.find(':');
                if (colon != std::string::npos) {
                    std::string key = line.substr(0, colon);
                    for (auto& c : key) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
                    if (key == "content-length") {
                        try {
                            content_length = std::stoull(line.substr(colon + 1));
                        } catch (...) {
                        }
                    }
                }
                pos = next + 2;
            }

            buffer.erase(0, header_end + 4);
            while (buffer.size() < content_length) {
                auto data = conn.read_some(500);
                if (!data.ok()) return;
                buffer += data.value();
            }
            const std::string body = buffer.substr(0, content_length);
            buffer.erase(0, content_length);

            {
                std::lock_guard lock(mutex);
                ++request_count;
            }
            if (faults.delay_ms > 0)
                std::this_thread::sleep_for(std::chrono::milliseconds(faults.delay_ms));

            if (method == "POST" && path == "/api/v1/results") {
                json j = json::parse(body, nullptr, false);
                auto envelope = j.is_discarded() ? Result<UploadEnvelope>::failure("bad_wire", "not JSON")
                                                 : envelope_from_wire(j);
                if (!envelope.ok()) {
                    if (conn.write_all(http_response(
                            400, json{{"error", envelope.error().code}}.dump())))
                        return;
                    continue;
                }
                {
                    std::lock_guard lock(mutex);
                    if (rejected_devices.count(envelope.value().device_id())) {
                        if (conn.write_all(http_response(
                                400, json{{"error", "schema_rejected"}}.dump())))
                            return;
                        continue;
                    }
                }
                auto [accepted, dups] = apply_envelope(envelope.value());
                if (chance(faults.drop_rate)) {
                    // Delivered, then the ack is lost: close without responding.
                    return;
                }
                if (chance(faults.duplicate_ack_rate)) {
                    // The envelope arrives twice at the ledger boundary.
                    apply_envelope(envelope.value());
                }
                const std::string response =
                    json{{"accepted", accepted}, {"duplicates", dups}}.dump();
                if (conn.write_all(http_response(200, response))) return;
            } else if (method == "GET" && path.rfind("/api/v1/worklist/", 0) == 0) {
                const std::string sample_id = path.substr(std::string("/api/v1/worklist/").size());
                json response;
                int status = 404;
                {
                    std::lock_guard lock(mutex);
                    auto it = worklist.find(sample_id);
                    if (it != worklist.end()) {
                        response = worklist_to_wire(it->second);
                        status = 200;
                    } else {
                        response = json{{"error", "not_found"}};
                    }
                }
                if (conn.write_all(http_response(status, response.dump()))) return;
            } else {
                if (conn.write_all(http_response(404, json{{"error", "not_found"}}.dump()))) return;
            }
        }
    }

    void accept_loop() {
        while (!stop) {
            auto conn = listener.accept(100);
            if (!conn.ok()) {
                if (stop) break;
                continue;
            }
            if (!conn.value().valid()) continue;
            auto stream = std::make_shared<net::TcpStream>(std::move(conn.value()));
            workers.emplace_back([this, stream] { serve_connection(std::move(*stream)); });
        }
    }
};

HisStub::HisStub(std::string host, int port) : HisStub(std::move(host), port, FaultProfile{}) {}

HisStub::HisStub(std::string host, int port, FaultProfile faults)
    : impl_(std::make_unique<Impl>(std::move(host), port, faults)) {}

HisStub::~HisStub() { stop(); }

Status HisStub::start() {
    auto listener = net::TcpListener::bind(impl_->host, impl_->port);
    if (!listener.ok()) return fail(listener.error().code, listener.error().detail);
    impl_->listener = std::move(listener.value());
    impl_->stop = false;
    impl_->accept_thread = std::thread([this] { impl_->accept_loop(); });
    return ok_status();
}

void HisStub::stop() {
    if (!impl_) return;
    impl_->stop = true;
    impl_->listener.close();
    if (impl_->accept_thread.joinable()) impl_->accept_thread.join();
    for (auto& w : impl_->workers)
        if (w.joinable()) w.join();
    impl_->workers.clear();
}

int HisStub::port() const { return impl_->listener.port(); }

void HisStub::seed_worklist(const WorklistOrder& order) {
    std::lock_guard lock(impl_->mutex);
    impl_->worklist[order.sample_id] = order;
}

std::size_t HisStub::ledger_size() const {
    std::lock_guard lock(impl_->mutex);
    std::size_t total = 0;
    for (const auto& [device, entries] : impl_->ledger_by_device) total += entries.size();
    return total;
}

std::uint64_t HisStub::duplicates() const {
    std::lock_guard lock(impl_->mutex);
    return impl_->duplicate_count;
}

std::uint64_t HisStub::requests_seen() const {
    std::lock_guard lock(impl_->mutex);
    return impl_->request_count;
}

std::vector<std::string> HisStub::ledger_devices() const {
    std::lock_guard lock(impl_->mutex);
    std::vector<std::string> out;
    for (const auto& [device, entries] : impl_->ledger_by_device) out.push_back(device);
    return out;
}

void HisStub::reject_device(const std::string& device_id) {
    std::lock_guard lock(impl_->mutex);
    impl_->rejected_devices.insert(device_id);
}

std::vector<HisStub::LedgerEntry> HisStub::ledger_for(const std::string& device_id) const {
    std::lock_guard lock(impl_->mutex);
    auto it = impl_->ledger_by_device.find(device_id);
    return it == impl_->ledger_by_device.end() ? std::vector<LedgerEntry>{} : it->second;
}

}  // namespace gmei::sim
