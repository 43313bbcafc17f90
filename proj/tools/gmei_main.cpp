// gmei: generic medical equipment interface gateway and its operator tooling.

#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <httplib.h>
#include <json.hpp>

#include "gmei/gateway.hpp"
#include "gmei/simkit.hpp"
#include "gmei/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

volatile std::sig_atomic_t g_signal = 0;

void on_signal(int sig) { g_signal = sig; }

std::string config_path_or_env(const std::string& flag_value) {
    if (!flag_value.empty()) return flag_value;
    const char* env = std::getenv("GMEI_CONFIG");
    return env ? env : "";
}

gmei::Result<gmei::GatewayConfig> load_config(const std::string& flag_value) {
    const std::string path = config_path_or_env(flag_value);
    if (path.empty())
        return gmei::Result<gmei::GatewayConfig>::failure(
            "bad_config", "no config file: pass --config or set GMEI_CONFIG");
    return gmei::GatewayConfig::load_file(path);
}

// Control-endpoint client. The gateway runs as a service; the CLI talks to
// it over the local control endpoint.
struct Control {
    std::string host;
    int port = 0;

    static gmei::Result<Control> from_config(const gmei::GatewayConfig& config) {
        auto ep = gmei::net::parse_endpoint(config.control_endpoint);
        if (!ep.ok()) return gmei::Result<Control>::failure(ep.error().code, ep.error().detail);
        return Control{ep.value().host, ep.value().port};
    }

    gmei::Result<json> get(const std::string& path) const {
        httplib::Client cli(host, port);
        cli.set_connection_timeout(0, 800 * 1000);
        cli.set_read_timeout(10, 0);
        auto res = cli.Get(path.c_str());
        if (!res)
            return gmei::Result<json>::failure(
                "gateway_not_running",
                "control endpoint unreachable at " + host + ":" + std::to_string(port));
        json j = json::parse(res->body, nullptr, false);
        if (res->status != 200)
            return gmei::Result<json>::failure(j.is_object() ? j.value("error", "error") : "error",
                                               res->body);
        return j;
    }

    gmei::Result<json> post(const std::string& path, const json& body) const {
        httplib::Client cli(host, port);
        cli.set_connection_timeout(0, 800 * 1000);
        cli.set_read_timeout(10, 0);
        auto res = cli.Post(path.c_str(), body.dump(), "application/json");
        if (!res)
            return gmei::Result<json>::failure(
                "gateway_not_running",
                "control endpoint unreachable at " + host + ":" + std::to_string(port));
        json j = json::parse(res->body, nullptr, false);
        if (res->status != 200)
            return gmei::Result<json>::failure(j.is_object() ? j.value("error", "error") : "error",
                                               res->body);
        return j;
    }

    bool alive() const { return get("/status").ok(); }
};

void append_audit(const std::string& registry_dir, const std::string& operator_id,
                  const std::string& action, const std::string& detail) {
    std::ofstream out(registry_dir + "/audit.log", std::ios::app);
    if (out)
        out << gmei::now_utc_iso8601() << " | " << operator_id << " | " << action << " | " << detail
            << "\n";
}

int fail_with(const gmei::Error& err, int code = 4) {
    std::cerr << "error: " << err.to_string() << "\n";
    return code;
}

int cmd_run(const std::string& config_flag) {
    const std::string path = config_path_or_env(config_flag);
    if (path.empty()) {
        std::cerr << "error: no config file: pass --config or set GMEI_CONFIG\n";
        return 2;
    }
    auto config = gmei::GatewayConfig::load_file(path);
    if (!config.ok()) {
        std::cerr << "error: " << config.error().to_string() << "\n";
        return 2;
    }
    if (!fs::exists(config.value().registry_dir)) {
        std::cerr << "error: registry directory " << config.value().registry_dir
                  << " does not exist\n";
        return 2;
    }

    gmei::GatewayService service(config.value());
    if (auto err = service.start()) {
        std::cerr << "error: " << err->to_string() << "\n";
        return 2;
    }
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    std::cout << "gateway " << config.value().gateway_id << " up; control endpoint "
              << config.value().control_endpoint << std::endl;
    for (const auto& dev : service.status_json()["devices"]) {
        std::cout << "  " << dev["device_id"].get<std::string>() << " ["
                  << dev["listener"].get<std::string>() << "] "
                  << dev.value("endpoint", std::string{}) << "\n";
    }
    std::cout.flush();

    while (g_signal == 0 && !service.shutdown_requested())
        std::this_thread::sleep_for(std::chrono::milliseconds(100));
    std::cout << "shutting down" << std::endl;
    service.shutdown();
    return 0;
}

int cmd_status(const std::string& config_flag, bool as_json) {
    auto config = load_config(config_flag);
    if (!config.ok()) return fail_with(config.error(), 2);
    auto control = Control::from_config(config.value());
    if (!control.ok()) return fail_with(control.error(), 2);
    auto status = control.value().get("/status");
    if (!status.ok()) return fail_with(status.error(), 5);
    if (as_json) {
        std::cout << status.value().dump(2) << "\n";
        return 0;
    }
    const json& s = status.value();
    std::cout << "gateway " << s.value("gateway_id", "?") << "  uptime " << s.value("uptime_s", 0)
              << "s\n";
    std::printf("%-28s %-11s %-8s %9s %6s %6s %6s\n", "device", "listener", "session", "emitted",
                "dead", "queue", "naks");
    for (const auto& d : s["devices"]) {
        std::printf("%-28s %-11s %-8s %9llu %6llu %6llu %6llu\n",
                    d["device_id"].get<std::string>().c_str(),
                    d["listener"].get<std::string>().c_str(),
                    d["session_active"].get<bool>() ? "active" : "idle",
                    static_cast<unsigned long long>(
                        d["counters"]["results_emitted"].get<std::uint64_t>()),
                    static_cast<unsigned long long>(
                        d["counters"]["dead_lettered"].get<std::uint64_t>()),
                    static_cast<unsigned long long>(d["queue_depth"].get<std::uint64_t>()),
                    static_cast<unsigned long long>(
                        d["counters"]["frames_nak"].get<std::uint64_t>()));
    }
    const json& t = s["totals"];
    std::cout << "totals: emitted " << t["results_emitted"] << ", dead " << t["dead_lettered"]
              << ", queue " << t["queue_depth"] << ", parked " << t["parked"] << ", deadletters "
              << t["deadletters"] << "\n";
    if (s.contains("uploader"))
        std::cout << "uploader: delivered " << s["uploader"]["observations_delivered"]
                  << " observations in " << s["uploader"]["envelopes_delivered"] << " envelopes, "
                  << s["uploader"]["retries"] << " retries\n";
    return 0;
}

int cmd_deadletters(const std::string& config_flag, const std::string& export_path) {
    auto config = load_config(config_flag);
    if (!config.ok()) return fail_with(config.error(), 2);
    auto control = Control::from_config(config.value());
    if (!control.ok()) return fail_with(control.error(), 2);
    auto letters = control.value().get("/deadletters");
    if (!letters.ok()) return fail_with(letters.error(), 5);
    const json& entries = letters.value()["entries"];
    if (export_path.empty()) {
        for (const auto& e : entries)
            std::cout << e["id"] << " " << e["device_id"].get<std::string>() << " "
                      << e["reason"].get<std::string>() << " at "
                      << e["occurred_at"].get<std::string>() << "\n";
        std::cout << entries.size() << " dead letters\n";
        return 0;
    }
    std::uint64_t max_id = 0;
    {
        std::ofstream out(export_path, std::ios::binary | std::ios::trunc);
        if (!out) {
            std::cerr << "error: cannot write " << export_path << "\n";
            return 4;
        }
        for (const auto& e : entries) {
            out << e.dump() << "\n";
            max_id = std::max(max_id, e["id"].get<std::uint64_t>());
        }
        out.flush();
        if (!out) {
            std::cerr << "error: write failed for " << export_path << "\n";
            return 4;
        }
    }
    // Drain only after the export file is safely written.
    if (max_id > 0) {
        auto drained = control.value().post("/deadletters/drain", json{{"up_to_id", max_id}});
        if (!drained.ok()) return fail_with(drained.error(), 5);
    }
    std::cout << "exported " << entries.size() << " dead letters to " << export_path << "\n";
    return 0;
}

int cmd_ingest(const std::string& config_flag, const std::string& device_id,
               const std::string& file_path, const std::string& operator_id) {
    auto config = load_config(config_flag);
    if (!config.ok()) return fail_with(config.error(), 2);
    std::ifstream in(file_path, std::ios::binary);
    if (!in) {
        std::cerr << "error: cannot read " << file_path << "\n";
        return 4;
    }
    std::stringstream ss;
    ss << in.rdbuf();

    auto control = Control::from_config(config.value());
    if (!control.ok()) return fail_with(control.error(), 2);
    auto report = control.value().post(
        "/ingest", json{{"device_id", device_id},
                        {"operator_id", operator_id},
                        {"content_b64", gmei::util::base64_encode(ss.str())}});
    if (!report.ok()) return fail_with(report.error(), 4);
    const json& r = report.value();
    if (r.value("duplicate", false)) {
        std::cout << "file already ingested for " << device_id << " (no new results)\n";
        return 0;
    }
    const auto& rejected = r["rejected"];
    std::cout << "accepted " << r.value("accepted", 0) << ", rejected " << rejected.size();
    if (r.value("dead_lettered", 0) > 0)
        std::cout << ", dead-lettered " << r.value("dead_lettered", 0);
    std::cout << "\n";
    for (const auto& line : rejected)
        std::cout << "  line " << line["line"] << ": " << line["reason"].get<std::string>() << "\n";
    return rejected.empty() ? 0 : 3;
}

int cmd_device_list(const std::string& config_flag) {
    auto config = load_config(config_flag);
    if (!config.ok()) return fail_with(config.error(), 2);
    auto control = Control::from_config(config.value());
    json devices;
    if (control.ok() && control.value().alive()) {
        auto res = control.value().get("/registry/devices");
        if (!res.ok()) return fail_with(res.error(), 5);
        devices = res.value()["devices"];
    } else {
        gmei::Registry registry(config.value().registry_dir);
        if (auto err = registry.load()) return fail_with(*err, 2);
        devices = json::array();
        for (const auto& d : registry.snapshot()->devices())
            devices.push_back(gmei::device_profile_to_json(d));
    }
    std::printf("%-28s %-10s %-15s %-18s %s\n", "device_id", "protocol", "mode", "format_id",
                "endpoint");
    for (const auto& d : devices)
        std::printf("%-28s %-10s %-15s %-18s %s\n", d["device_id"].get<std::string>().c_str(),
                    d["protocol"].get<std::string>().c_str(), d["mode"].get<std::string>().c_str(),
                    d["format_id"].get<std::string>().c_str(),
                    d.value("listen_endpoint", std::string{}).c_str());
    return 0;
}

int cmd_device_add(const std::string& config_flag, const gmei::DeviceProfile& profile,
                   const std::string& operator_id) {
    auto config = load_config(config_flag);
    if (!config.ok()) return fail_with(config.error(), 2);
    auto control = Control::from_config(config.value());
    if (control.ok() && control.value().alive()) {
        auto res = control.value().post("/registry/devices",
                                        json{{"device", gmei::device_profile_to_json(profile)},
                                             {"operator_id", operator_id}});
        if (!res.ok()) return fail_with(res.error(), 4);
    } else {
        gmei::Registry registry(config.value().registry_dir);
        if (auto err = registry.load()) return fail_with(*err, 2);
        auto res = registry.register_device(profile);
        if (!res.ok()) return fail_with(res.error(), 4);
        append_audit(config.value().registry_dir, operator_id, "device-add", profile.device_id);
    }
    std::cout << "registered " << profile.device_id << "\n";
    return 0;
}

int cmd_device_set_format(const std::string& config_flag, const std::string& device_id,
                          const std::string& format_id, const std::string& operator_id) {
    auto config = load_config(config_flag);
    if (!config.ok()) return fail_with(config.error(), 2);
    auto control = Control::from_config(config.value());
    if (control.ok() && control.value().alive()) {
        auto res = control.value().post("/registry/set-format",
                                        json{{"device_id", device_id},
                                             {"format_id", format_id},
                                             {"operator_id", operator_id}});
        if (!res.ok()) return fail_with(res.error(), 4);
    } else {
        gmei::Registry registry(config.value().registry_dir);
        if (auto err = registry.load()) return fail_with(*err, 2);
        if (auto err = registry.update_format(device_id, format_id)) return fail_with(*err, 4);
        append_audit(config.value().registry_dir, operator_id, "set-format",
                     device_id + " -> " + format_id);
    }
    std::cout << device_id << " now uses " << format_id << " (takes effect next session)\n";
    return 0;
}

int cmd_sim_analyzer(const std::string& kind_name, const std::string& target,
                     const std::string& script_path, std::uint64_t seed, bool print_transcript) {
    gmei::sim::AnalyzerKind kind;
    if (kind_name == "astm") kind = gmei::sim::AnalyzerKind::astm;
    else if (kind_name == "hl7") kind = gmei::sim::AnalyzerKind::hl7;
    else if (kind_name == "generic") kind = gmei::sim::AnalyzerKind::generic;
    else {
        std::cerr << "error: unknown analyzer kind " << kind_name << "\n";
        return 4;
    }
    std::ifstream in(script_path, std::ios::binary);
    if (!in) {
        std::cerr << "error: cannot read " << script_path << "\n";
        return 4;
    }
    std::stringstream ss;
    ss << in.rdbuf();
    auto script = gmei::sim::SimScript::from_jsonl(ss.str());
    if (!script.ok()) return fail_with(script.error(), 4);
    auto ep = gmei::net::parse_endpoint(target);
    if (!ep.ok()) return fail_with(ep.error(), 4);

    gmei::sim::AnalyzerOptions opts;
    opts.seed = seed;
    auto outcome =
        gmei::sim::run_analyzer(kind, ep.value().host, ep.value().port, script.value(), opts);
    if (print_transcript) std::cout << outcome.transcript.render();
    if (!outcome.ok) {
        std::cerr << "error: " << outcome.error << "\n";
        return 4;
    }
    std::cout << "delivered " << outcome.messages_delivered << " messages, " << outcome.naks_seen
              << " NAKs, " << outcome.reconnects << " reconnects\n";
    return 0;
}

int cmd_sim_his(const std::string& bind, const std::string& worklist_path, double drop_rate,
                double duplicate_ack_rate, int delay_ms) {
    auto ep = gmei::net::parse_endpoint(bind);
    if (!ep.ok()) return fail_with(ep.error(), 4);
    gmei::sim::HisStub::FaultProfile faults;
    faults.drop_rate = drop_rate;
    faults.duplicate_ack_rate = duplicate_ack_rate;
    faults.delay_ms = delay_ms;
    gmei::sim::HisStub stub(ep.value().host, ep.value().port, faults);
    if (auto err = stub.start()) return fail_with(*err, 4);
    if (!worklist_path.empty()) {
        std::ifstream in(worklist_path, std::ios::binary);
        if (!in) {
            std::cerr << "error: cannot read " << worklist_path << "\n";
            return 4;
        }
        json j = json::parse(in, nullptr, false);
        if (j.is_discarded()) {
            std::cerr << "error: " << worklist_path << " is not valid JSON\n";
            return 4;
        }
        for (const auto& w : j.value("worklists", json::array())) {
            auto order = gmei::worklist_from_wire(w);
            if (order.ok()) stub.seed_worklist(order.value());
        }
    }
    std::cout << "mock HIS listening on " << bind << " (Ctrl-C to stop)" << std::endl;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    while (g_signal == 0) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    std::cout << "ledger: " << stub.ledger_size() << " observations, " << stub.duplicates()
              << " duplicates rejected\n";
    stub.stop();
    return 0;
}

int cmd_sim_fleet(int facilities, int devices_per_facility, int total_results, std::uint64_t seed,
                  const std::string& workdir, double corrupt_rate, double drop_rate,
                  double his_drop_rate) {
    using namespace gmei;
    using namespace gmei::sim;

    fs::create_directories(workdir);
    FleetTopology topology;
    topology.facilities = facilities;
    topology.devices_per_facility = devices_per_facility;
    topology.total_results = total_results;
    topology.seed = seed;
    FleetPlan plan = generate_fleet(topology);

    const std::string registry_dir = workdir + "/registry";
    if (auto err = write_fleet_registry(plan, registry_dir)) return fail_with(*err, 4);

    HisStub::FaultProfile his_faults;
    his_faults.drop_rate = his_drop_rate;
    his_faults.seed = seed + 1;
    HisStub stub("127.0.0.1", net::free_port(), his_faults);
    if (auto err = stub.start()) return fail_with(*err, 4);

    GatewayConfig config;
    config.gateway_id = "GW-FLEET";
    config.registry_dir = registry_dir;
    config.queue_path = workdir + "/queue.log";
    config.deadletter_path = workdir + "/deadletters.jsonl";
    config.his_base_url = "http://127.0.0.1:" + std::to_string(stub.port());
    config.control_endpoint = "127.0.0.1:" + std::to_string(net::free_port());
    config.backoff_base_ms = 200;
    config.astm_timers.establish_ms = 2000;
    config.astm_timers.ack_ms = 2000;
    GatewayService service(config);
    if (auto err = service.start()) return fail_with(*err, 4);

    auto control = net::parse_endpoint(config.control_endpoint).value();
    const std::int64_t deadline = util::now_ms() + 120000;
    std::atomic<int> failures{0};
    std::vector<std::thread> threads;
    for (const auto& device : plan.devices) {
        threads.emplace_back([&, dev = &device] {
            if (dev->file_device) {
                auto err = ingest_via_control(control.host, control.port, dev->profile.device_id,
                                              "tech1", dev->file_content, deadline);
                if (err) {
                    std::cerr << dev->profile.device_id << ": " << err->to_string() << "\n";
                    failures++;
                }
                return;
            }
            auto ep = net::parse_endpoint(dev->profile.listen_endpoint).value();
            AnalyzerOptions opts;
            opts.seed = topology.seed + std::hash<std::string>{}(dev->profile.device_id);
            opts.corrupt_rate = dev->kind == AnalyzerKind::hl7 ? 0.0 : corrupt_rate;
            opts.drop_rate = drop_rate;
            opts.deadline_ms = deadline;
            if (dev->kind == AnalyzerKind::generic) opts.ack_byte = 0x06;
            auto outcome = run_analyzer(dev->kind, ep.host, ep.port, dev->script, opts);
            if (!outcome.ok) {
                std::cerr << dev->profile.device_id << ": " << outcome.error << "\n";
                failures++;
            }
        });
    }
    for (auto& t : threads) t.join();

    const std::size_t expected = static_cast<std::size_t>(plan.total_results);
    while (stub.ledger_size() < expected && util::now_ms() < deadline)
        std::this_thread::sleep_for(std::chrono::milliseconds(50));

    service.shutdown();
    const std::string verdict = compare_ledger(plan, stub);
    std::cout << "fleet: " << plan.devices.size() << " devices, " << plan.total_results
              << " results planned\n";
    std::cout << "ledger: " << stub.ledger_size() << " observations, " << stub.duplicates()
              << " duplicate deliveries rejected by the HIS\n";
    stub.stop();
    if (failures > 0 || !verdict.empty()) {
        if (!verdict.empty()) std::cerr << verdict;
        std::cerr << "fleet run FAILED\n";
        return 4;
    }
    std::cout << "ledger matches the expected ledger exactly\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Generic medical equipment interface gateway"};
    app.require_subcommand(1);
    app.fallthrough();  // --config is valid before or after the subcommand

    std::string config_flag;
    app.add_option("--config", config_flag, "Gateway config file (or env GMEI_CONFIG)");

    auto* run = app.add_subcommand("run", "Run the gateway service");

    bool status_json = false;
    auto* status = app.add_subcommand("status", "Show live gateway status");
    status->add_flag("--json", status_json, "Machine-readable output");

    std::string export_path;
    auto* deadletters = app.add_subcommand("deadletters", "List or export dead letters");
    deadletters->add_option("--export", export_path, "Write entries to this file and drain them");

    std::string ingest_device, ingest_file, ingest_operator;
    auto* ingest = app.add_subcommand("ingest", "Bulk-insert results from an instrument log file");
    ingest->add_option("--device", ingest_device, "Device id")->required();
    ingest->add_option("--file", ingest_file, "Log file path (.upl, .txt)")->required();
    ingest->add_option("--operator", ingest_operator, "Operator id")->required();

    auto* device = app.add_subcommand("device", "Inspect or mutate the equipment master");
    auto* device_list = device->add_subcommand("list", "List registered devices");
    std::string add_id, add_name, add_protocol = "astm", add_mode = "unidirectional";
    std::string add_format, add_endpoint, add_facility, add_file_format, add_operator = "cli";
    int add_timeout_ms = 30000;
    auto* device_add = device->add_subcommand("add", "Register a device");
    device_add->add_option("--id", add_id)->required();
    device_add->add_option("--name", add_name);
    device_add->add_option("--protocol", add_protocol, "astm|hl7|generic|file_only");
    device_add->add_option("--mode", add_mode, "unidirectional|bidirectional");
    device_add->add_option("--format", add_format, "Format id")->required();
    device_add->add_option("--endpoint", add_endpoint, "host:port listen endpoint");
    device_add->add_option("--facility", add_facility);
    device_add->add_option("--file-format", add_file_format, "Optional log-file format id");
    device_add->add_option("--timeout-ms", add_timeout_ms);
    device_add->add_option("--operator", add_operator);
    std::string sf_device, sf_format, sf_operator = "cli";
    auto* device_set_format =
        device->add_subcommand("set-format", "Point a device at another format id");
    device_set_format->add_option("device_id", sf_device)->required();
    device_set_format->add_option("format_id", sf_format)->required();
    device_set_format->add_option("--operator", sf_operator);

    auto* sim = app.add_subcommand("sim", "Analyzer simulators and the mock HIS");
    std::string sim_kind = "astm", sim_target, sim_script;
    std::uint64_t sim_seed = 1;
    bool sim_transcript = false;
    auto* sim_analyzer = sim->add_subcommand("analyzer", "Run a scripted analyzer against a gateway");
    sim_analyzer->add_option("--kind", sim_kind, "astm|hl7|generic");
    sim_analyzer->add_option("--target", sim_target, "host:port")->required();
    sim_analyzer->add_option("--script", sim_script, "Line-delimited JSON action script")->required();
    sim_analyzer->add_option("--seed", sim_seed);
    sim_analyzer->add_flag("--transcript", sim_transcript, "Print the byte transcript");

    std::string his_bind = "127.0.0.1:8600", his_worklist;
    double his_drop = 0, his_dup = 0;
    int his_delay = 0;
    auto* sim_his = sim->add_subcommand("his", "Run the mock HIS with a verifiable ledger");
    sim_his->add_option("--bind", his_bind);
    sim_his->add_option("--worklist", his_worklist, "JSON file of seeded worklist orders");
    sim_his->add_option("--drop-rate", his_drop, "Probability of dropping an ack after commit");
    sim_his->add_option("--duplicate-ack-rate", his_dup);
    sim_his->add_option("--delay-ms", his_delay);

    int fleet_fac = 3, fleet_dev = 4, fleet_results = 400;
    std::uint64_t fleet_seed = 42;
    std::string fleet_workdir = "fleet-run";
    double fleet_corrupt = 0.05, fleet_drop = 0.01, fleet_his_drop = 0.10;
    auto* sim_fleet =
        sim->add_subcommand("fleet", "Closed-loop fleet run (gateway + analyzers + HIS)");
    sim_fleet->add_option("--facilities", fleet_fac);
    sim_fleet->add_option("--devices-per-facility", fleet_dev);
    sim_fleet->add_option("--results", fleet_results);
    sim_fleet->add_option("--seed", fleet_seed);
    sim_fleet->add_option("--workdir", fleet_workdir);
    sim_fleet->add_option("--corrupt-rate", fleet_corrupt);
    sim_fleet->add_option("--drop-rate", fleet_drop);
    sim_fleet->add_option("--his-drop-rate", fleet_his_drop);

    CLI11_PARSE(app, argc, argv);

    if (run->parsed()) return cmd_run(config_flag);
    if (status->parsed()) return cmd_status(config_flag, status_json);
    if (deadletters->parsed()) return cmd_deadletters(config_flag, export_path);
    if (ingest->parsed())
        return cmd_ingest(config_flag, ingest_device, ingest_file, ingest_operator);
    if (device->parsed()) {
        if (device_list->parsed()) return cmd_device_list(config_flag);
        if (device_add->parsed()) {
            gmei::DeviceProfile profile;
            profile.device_id = add_id;
            profile.display_name = add_name.empty() ? add_id : add_name;
            auto protocol = gmei::protocol_from_string(add_protocol);
            auto mode = gmei::mode_from_string(add_mode);
            if (!protocol || !mode) {
                std::cerr << "error: bad --protocol or --mode\n";
                return 4;
            }
            profile.protocol = *protocol;
            profile.mode = *mode;
            profile.format_id = add_format;
            profile.listen_endpoint = add_endpoint;
            profile.facility_id = add_facility;
            if (!add_file_format.empty()) profile.file_format_id = add_file_format;
            profile.comm_settings.timeout_ms = add_timeout_ms;
            return cmd_device_add(config_flag, profile, add_operator);
        }
        if (device_set_format->parsed())
            return cmd_device_set_format(config_flag, sf_device, sf_format, sf_operator);
        std::cerr << "device: expected list | add | set-format\n";
        return 4;
    }
    if (sim->parsed()) {
        if (sim_analyzer->parsed())
            return cmd_sim_analyzer(sim_kind, sim_target, sim_script, sim_seed, sim_transcript);
        if (sim_his->parsed())
            return cmd_sim_his(his_bind, his_worklist, his_drop, his_dup, his_delay);
        if (sim_fleet->parsed())
            return cmd_sim_fleet(fleet_fac, fleet_dev, fleet_results, fleet_seed, fleet_workdir,
                                 fleet_corrupt, fleet_drop, fleet_his_drop);
        std::cerr << "sim: expected analyzer | his | fleet\n";
        return 4;
    }
    return 0;
}
