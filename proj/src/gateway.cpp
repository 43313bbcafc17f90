#include "gmei/gateway.hpp"

#include <httplib.h>

#include <deque>
#include <filesystem>
#include <fstream>

#include "gmei/astm_records.hpp"
#include "gmei/hl7.hpp"
#include "gmei/util.hpp"

namespace gmei {

using nlohmann::json;

Result<GatewayConfig> GatewayConfig::from_json(const json& j) {
    GatewayConfig c;
    if (!j.is_object()) return Result<GatewayConfig>::failure("bad_config", "config is not a JSON object");
    c.gateway_id = j.value("gateway_id", c.gateway_id);
    c.registry_dir = j.value("registry_dir", c.registry_dir);
    c.queue_path = j.value("queue_path", c.queue_path);
    c.deadletter_path = j.value("deadletter_path", c.deadletter_path);
    c.audit_path = j.value("audit_path", c.audit_path);
    c.his_base_url = j.value("his_base_url", c.his_base_url);
    c.control_endpoint = j.value("control_endpoint", c.control_endpoint);
    c.his_timeout_ms = j.value("his_timeout_ms", c.his_timeout_ms);
    c.worklist_budget_ms = j.value("worklist_budget_ms", c.worklist_budget_ms);
    c.batch_max = j.value("batch_max", c.batch_max);
    c.flush_idle_ms = j.value("flush_idle_ms", c.flush_idle_ms);
    c.backoff_base_ms = j.value("backoff_base_ms", c.backoff_base_ms);
    c.backoff_cap_ms = j.value("backoff_cap_ms", c.backoff_cap_ms);
    if (j.contains("astm_timers")) {
        const json& t = j["astm_timers"];
        c.astm_timers.establish_ms = t.value("establish_ms", c.astm_timers.establish_ms);
        c.astm_timers.ack_ms = t.value("ack_ms", c.astm_timers.ack_ms);
        c.astm_timers.receive_ms = t.value("receive_ms", c.astm_timers.receive_ms);
        c.astm_timers.contention_backoff_ms =
            t.value("contention_backoff_ms", c.astm_timers.contention_backoff_ms);
        c.astm_timers.busy_backoff_ms = t.value("busy_backoff_ms", c.astm_timers.busy_backoff_ms);
    }
    if (c.audit_path.empty()) c.audit_path = c.registry_dir + "/audit.log";
    if (c.gateway_id.empty()) return Result<GatewayConfig>::failure("bad_config", "gateway_id is empty");
    return c;
}

Result<GatewayConfig> GatewayConfig::load_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return Result<GatewayConfig>::failure("bad_config", "cannot open config file " + path);
    std::string body((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    json j;
    try {
        j = json::parse(body);  // exceptions carry line/column positions
    } catch (const json::parse_error& e) {
        return Result<GatewayConfig>::failure("bad_config", path + ": " + e.what());
    }
    return from_json(j);
}

json GatewayConfig::to_json() const {
    return json{{"gateway_id", gateway_id},
                {"registry_dir", registry_dir},
                {"queue_path", queue_path},
                {"deadletter_path", deadletter_path},
                {"audit_path", audit_path},
                {"his_base_url", his_base_url},
                {"control_endpoint", control_endpoint},
                {"his_timeout_ms", his_timeout_ms},
                {"worklist_budget_ms", worklist_budget_ms},
                {"batch_max", batch_max},
                {"flush_idle_ms", flush_idle_ms},
                {"backoff_base_ms", backoff_base_ms},
                {"backoff_cap_ms", backoff_cap_ms},
                {"astm_timers",
                 {{"establish_ms", astm_timers.establish_ms},
                  {"ack_ms", astm_timers.ack_ms},
                  {"receive_ms", astm_timers.receive_ms},
                  {"contention_backoff_ms", astm_timers.contention_backoff_ms},
                  {"busy_backoff_ms", astm_timers.busy_backoff_ms}}}};
}

ObservationResult normalize(const RawResult& raw, const TestMapping& mapping,
                            const std::string& gateway_id, std::uint64_t sequence,
                            const std::string& received_at, const std::string& ref_range_hint) {
    ObservationResult obs;
    obs.gateway_id = gateway_id;
    obs.device_id = raw.device_id;
    obs.sample_id = raw.sample_id;
    obs.test_id = mapping.test_id;
    obs.machine_test_code = raw.machine_test_code;
    obs.notes = raw.notes;

    const Decimal one{1, 0};
    if (auto number = Decimal::parse(raw.value)) {
        if (mapping.conversion_factor == one) {
            obs.value = ObservationValue::from_decimal(*number);
        } else if (auto scaled = number->multiply(mapping.conversion_factor)) {
            obs.value = ObservationValue::from_decimal(*scaled);
        } else {
            obs.value = ObservationValue::from_decimal(*number);
            obs.notes.push_back("conversion factor overflow; raw value kept");
        }
        obs.unit = mapping.canonical_unit ? mapping.canonical_unit : raw.unit;
    } else {
        obs.value = ObservationValue::from_raw(raw.value);  // qualitative result
        if (!(mapping.conversion_factor == one))
            obs.notes.push_back("non-numeric value; conversion factor ignored");
        obs.unit = raw.unit;
    }

    if (raw.ref_range_raw) {
        RefRange range = parse_ref_range(*raw.ref_range_raw, ref_range_hint);
        obs.ref_low = range.low;
        obs.ref_high = range.high;
        if (range.note) obs.notes.push_back(*range.note);
    }
    if (raw.abnormal_flag) obs.abnormal_flag = abnormal_flag_from_string(*raw.abnormal_flag);
    if (raw.result_status) {
        if (auto status = result_status_from_string(*raw.result_status)) obs.result_status = *status;
    }
    obs.observed_at = raw.observed_at;
    obs.received_at = received_at;
    obs.operator_id = raw.operator_id;
    obs.sequence = sequence;
    return obs;
}

namespace {

json raw_result_to_json(const RawResult& raw) {
    json j{{"sample_id", raw.sample_id},
           {"machine_test_code", raw.machine_test_code},
           {"value", raw.value}};
    if (raw.unit) j["unit"] = *raw.unit;
    if (raw.ref_range_raw) j["ref_range"] = *raw.ref_range_raw;
    return j;
}

std::string content_hash(const std::string& prefix, const std::string& device_id,
                         const std::string& payload) {
    return prefix + ":" + util::to_hex(util::fnv1a64(device_id + "\n" + payload));
}

}  // namespace

struct GatewayService::ControlServer {
    httplib::Server server;
    std::thread thread;
    std::atomic<bool> shutdown_requested{false};
};

GatewayService::GatewayService(GatewayConfig config)
    : config_(std::move(config)),
      registry_(config_.registry_dir),
      queue_(ObservationQueue::Config{config_.queue_path, config_.gateway_id, config_.batch_max,
                                      config_.flush_idle_ms}),
      deadletters_(config_.deadletter_path) {}

GatewayService::~GatewayService() { shutdown(); }

bool GatewayService::shutdown_requested() const {
    return control_ && control_->shutdown_requested;
}

Status GatewayService::start() {
    if (running_) return ok_status();
    stop_ = false;
    if (auto err = registry_.load()) return err;
    if (auto err = deadletters_.open()) return err;
    // Crash recovery completes before any listener accepts a connection.
    if (auto err = queue_.open()) return err;

    Uploader::Config up;
    up.his = HisClient::Config{config_.his_base_url, config_.his_timeout_ms};
    up.backoff_base_ms = config_.backoff_base_ms;
    up.backoff_cap_ms = config_.backoff_cap_ms;
    uploader_ = std::make_unique<Uploader>(queue_, up);

    auto snap = registry_.snapshot();
    for (const auto& profile : snap->devices()) {
        auto rt = std::make_unique<DeviceRuntime>();
        rt->profile = profile;
        if (profile.protocol == Protocol::file_only) {
            rt->listener_state = "file_only";
        } else {
            auto ep = net::parse_endpoint(profile.listen_endpoint);
            if (!ep.ok()) {
                rt->listener_state = "bind_failed";
                rt->listener_detail = ep.error().to_string();
            } else {
                auto listener = net::TcpListener::bind(ep.value().host, ep.value().port);
                if (!listener.ok()) {
                    // Reported per endpoint; the other listeners continue.
                    rt->listener_state = "bind_failed";
                    rt->listener_detail = listener.error().to_string();
                } else {
                    rt->listener = std::move(listener.value());
                    rt->listener_state = "listening";
                }
            }
        }
        runtimes_.push_back(std::move(rt));
    }
    for (auto& rt : runtimes_) {
        if (rt->listener_state == "listening") {
            DeviceRuntime* raw = rt.get();
            rt->thread = std::thread([this, raw] { listener_loop(*raw); });
        }
    }

    start_control_endpoint();
    uploader_->start();
    started_ms_ = util::now_ms();
    running_ = true;
    return ok_status();
}

void GatewayService::shutdown() {
    if (!running_) return;
    stop_ = true;
    for (auto& rt : runtimes_) rt->listener.close();
    for (auto& rt : runtimes_) {
        if (rt->thread.joinable()) rt->thread.join();
    }
    runtimes_.clear();
    if (control_) {
        control_->server.stop();
        if (control_->thread.joinable()) control_->thread.join();
        control_.reset();
    }
    if (uploader_) {
        uploader_->stop(true);  // flush the upload queue
        uploader_.reset();
    }
    running_ = false;
}

void GatewayService::listener_loop(DeviceRuntime& rt) {
    std::thread session_thread;
    while (!stop_) {
        auto accepted = rt.listener.accept(100);
        if (!accepted.ok()) {
            if (stop_) break;
            std::this_thread::sleep_for(std::chrono::milliseconds(50));
            continue;
        }
        if (session_thread.joinable() && !rt.session_active) session_thread.join();
        if (!accepted.value().valid()) continue;  // poll timeout
        if (rt.session_active) continue;  // one connection per endpoint; extra ones are refused
        if (session_thread.joinable()) session_thread.join();  // reap the finished session
        rt.session_active = true;
        auto stream = std::make_shared<net::TcpStream>(std::move(accepted.value()));
        session_thread = std::thread([this, &rt, stream] {
            run_session(rt, std::move(*stream));
            rt.session_active = false;
        });
    }
    if (session_thread.joinable()) session_thread.join();
}

void GatewayService::run_session(DeviceRuntime& rt, net::TcpStream conn) {
    switch (rt.profile.protocol) {
        case Protocol::astm: astm_session(rt, conn); break;
        case Protocol::hl7: hl7_session(rt, conn); break;
        case Protocol::generic: generic_session(rt, conn); break;
        case Protocol::file_only: break;
    }
}

// ---------------------------------------------------------------------------
// ASTM session: drives the pure transport machines over the socket.

void GatewayService::astm_session(DeviceRuntime& rt, net::TcpStream& conn) {
    auto snap = registry_.snapshot();  // captured for the whole session
    const DeviceProfile* fresh = snap->find_device(rt.profile.device_id);
    const DeviceProfile profile = fresh ? *fresh : rt.profile;

    astm::TimerPolicy policy = config_.astm_timers;
    if (profile.comm_settings.timeout_ms > 0) policy.receive_ms = profile.comm_settings.timeout_ms;

    astm::TransportState receiver = astm::make_receiver(policy);
    astm::TransportState sender = astm::make_sender(policy);
    std::deque<std::string> order_queue;
    std::string rxbuf;
    std::int64_t receiver_deadline = -1, sender_deadline = -1;
    astm::TimerKind receiver_timer = astm::TimerKind::receive;
    astm::TimerKind sender_timer = astm::TimerKind::establish;
    bool io_failed = false;

    auto run_actions = [&](const std::vector<astm::TransportAction>& actions, bool from_sender) {
        for (const auto& action : actions) {
            switch (action.kind) {
                case astm::TransportAction::Kind::send_control: {
                    if (conn.write_all(std::string(1, action.byte))) io_failed = true;
                    break;
                }
                case astm::TransportAction::Kind::send_frame: {
                    auto bytes = astm::encode_frame(action.frame);
                    if (bytes.ok() && conn.write_all(bytes.value())) io_failed = true;
                    break;
                }
                case astm::TransportAction::Kind::deliver_message: {
                    auto outcome = process_astm_text(profile, *snap, rt.counters, action.message);
                    for (auto& reply : outcome.order_downloads) order_queue.push_back(std::move(reply));
                    break;
                }
                case astm::TransportAction::Kind::arm_timer: {
                    auto& deadline = from_sender ? sender_deadline : receiver_deadline;
                    auto& kind = from_sender ? sender_timer : receiver_timer;
                    deadline = util::now_ms() + action.duration_ms;
                    kind = action.timer;
                    break;
                }
                case astm::TransportAction::Kind::cancel_timer: {
                    (from_sender ? sender_deadline : receiver_deadline) = -1;
                    break;
                }
                case astm::TransportAction::Kind::abort:
                    break;  // aborted order downloads are dropped; the analyzer re-queries
            }
        }
    };

    auto feed_receiver = [&](const astm::TransportEvent& event) {
        auto step = astm::receiver_step(receiver, event);
        receiver = std::move(step.state);
        run_actions(step.actions, false);
    };
    auto feed_sender = [&](const astm::TransportEvent& event) {
        auto step = astm::sender_step(sender, event);
        sender = std::move(step.state);
        run_actions(step.actions, true);
        if (step.rule == "S8.frame-ack-done" || step.rule == "S10.frame-retry-exhausted" ||
            step.rule == "S6.establish-timeout-abort" || step.rule == "S11.remote-interrupt") {
            if (!order_queue.empty()) order_queue.pop_front();
        }
        return step.rule;
    };

    while (!stop_ && !io_failed) {
        if (!order_queue.empty() && receiver.phase == astm::Phase::idle &&
            sender.phase == astm::Phase::idle && !sender.message_pending) {
            feed_sender(astm::TransportEvent::submit(order_queue.front()));
        }

        std::int64_t now = util::now_ms();
        std::int64_t next = now + 200;
        if (receiver_deadline >= 0) next = std::min(next, receiver_deadline);
        if (sender_deadline >= 0) next = std::min(next, sender_deadline);
        auto data = conn.read_some(static_cast<int>(std::max<std::int64_t>(0, next - now)));
        if (!data.ok()) break;  // disconnect: incomplete transfers are never normalized
        rxbuf += data.value();

        now = util::now_ms();
        if (receiver_deadline >= 0 && now >= receiver_deadline) {
            receiver_deadline = -1;
            feed_receiver(astm::TransportEvent::timer_expired(receiver_timer));
        }
        if (sender_deadline >= 0 && now >= sender_deadline) {
            sender_deadline = -1;
            feed_sender(astm::TransportEvent::timer_expired(sender_timer));
        }

        while (!rxbuf.empty() && !io_failed) {
            const char c = rxbuf.front();
            if (c == astm::kStx) {
                std::size_t lf = rxbuf.find(astm::kLf);
                if (lf == std::string::npos) {
                    if (rxbuf.size() > 4096) {
                        rxbuf.clear();
                        rt.counters.frames_nak++;
                        feed_receiver(astm::TransportEvent::malformed("bad_envelope"));
                    }
                    break;  // wait for the rest of the frame
                }
                std::string frame_bytes = rxbuf.substr(0, lf + 1);
                rxbuf.erase(0, lf + 1);
                auto frame = astm::decode_frame(frame_bytes, receiver.expected_frame_number);
                if (frame.ok()) {
                    rt.counters.frames_ok++;
                    feed_receiver(astm::TransportEvent::from_frame(std::move(frame.value())));
                } else {
                    rt.counters.frames_nak++;
                    feed_receiver(astm::TransportEvent::malformed(frame.error().code));
                }
            } else if (c == astm::kEnq || c == astm::kAck || c == astm::kNak || c == astm::kEot) {
                rxbuf.erase(0, 1);
                auto event = astm::TransportEvent::from_byte(c);
                if (sender.phase != astm::Phase::idle) {
                    std::string rule = feed_sender(event);
                    // Contention: the analyzer wins, so its ENQ also opens
                    // our receiver.
                    if (rule == "S3.contention-yield") feed_receiver(event);
                } else {
                    feed_receiver(event);
                }
            } else {
                rxbuf.erase(0, 1);  // line noise between sessions
            }
        }
    }
}

// ---------------------------------------------------------------------------

void GatewayService::hl7_session(DeviceRuntime& rt, net::TcpStream& conn) {
    auto snap = registry_.snapshot();
    const DeviceProfile* fresh = snap->find_device(rt.profile.device_id);
    const DeviceProfile profile = fresh ? *fresh : rt.profile;
    hl7::MllpDecoder decoder;

    while (!stop_) {
        auto data = conn.read_some(200);
        if (!data.ok()) break;
        if (data.value().empty()) continue;
        auto output = decoder.feed(data.value());
        for (const auto& text : output.messages) {
            std::string ack;
            process_hl7_text(profile, *snap, rt.counters, text, &ack);
            if (!ack.empty()) {
                auto framed = hl7::mllp_encode(ack);
                if (framed.ok() && conn.write_all(framed.value())) return;
            }
        }
    }
}

void GatewayService::generic_session(DeviceRuntime& rt, net::TcpStream& conn) {
    auto snap = registry_.snapshot();
    const DeviceProfile* fresh = snap->find_device(rt.profile.device_id);
    const DeviceProfile profile = fresh ? *fresh : rt.profile;
    auto fmt = snap->resolve_format(profile.device_id);
    if (!fmt.ok() || fmt.value().definition.kind != FormatDefinition::Kind::generic_frame) return;
    const gen::FrameDescriptor desc = fmt.value().definition.frame;

    std::string buffer;
    while (!stop_) {
        auto data = conn.read_some(200);
        if (!data.ok()) break;
        buffer += data.value();

        for (;;) {
            std::size_t start = buffer.find(desc.start_byte);
            if (start == std::string::npos) {
                buffer.clear();  // inter-frame noise
                break;
            }
            if (start > 0) buffer.erase(0, start);
            std::size_t end = buffer.find(desc.end_byte, 1);
            if (end == std::string::npos) {
                if (buffer.size() > 65536) buffer.clear();
                break;
            }
            std::size_t frame_len = end + 1 + (desc.has_bcc ? 1 : 0);
            if (buffer.size() < frame_len) break;  // BCC byte still in flight
            std::string frame_bytes = buffer.substr(0, frame_len);
            buffer.erase(0, frame_len);

            bool ok = false;
            process_generic_frame(profile, *snap, rt.counters, frame_bytes, &ok);
            if (desc.ack_byte) {
                char reply = ok ? *desc.ack_byte : astm::kNak;
                if (conn.write_all(std::string(1, reply))) return;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Message processing shared by sessions, file ingestion, and direct tests.

ProcessOutcome GatewayService::process_astm_text(const DeviceProfile& profile,
                                                 const RegistrySnapshot& snap,
                                                 DeviceCounters& counters, const std::string& text) {
    ProcessOutcome out;
    astm::AstmFieldMap map;
    if (auto fmt = snap.resolve_format(profile.device_id);
        fmt.ok() && fmt.value().definition.kind == FormatDefinition::Kind::astm)
        map = fmt.value().definition.astm_map;

    auto parsed = astm::parse_message(text);
    if (!parsed.ok()) {
        deadletters_.add(profile.device_id, text, parsed.error().code);
        counters.dead_lettered++;
        out.dead_lettered++;
        return out;
    }
    const astm::AstmMessage& msg = parsed.value();

    if (msg.is_query()) {
        auto sample_ids = astm::extract_query_sample_ids(msg, map);
        if (profile.mode != DeviceMode::bidirectional || sample_ids.empty()) {
            deadletters_.add(profile.device_id, text, "query_on_unidirectional");
            counters.dead_lettered++;
            out.dead_lettered++;
            return out;
        }
        counters.queries_handled++;
        HisClient worklist_client(HisClient::Config{config_.his_base_url, config_.worklist_budget_ms});
        auto order = worklist_client.fetch_worklist(sample_ids.front());
        astm::AstmMessage reply;
        if (order.ok()) {
            reply = astm::build_order_message(order.value(), msg.delimiters, map);
        } else {
            // Explicit empty-order reply; the analyzer must never be left hanging.
            if (order.error().code != "not_found") counters.his_unreachable++;
            reply = astm::build_no_order_message(msg.delimiters);
        }
        if (auto serialized = astm::serialize_message(reply); serialized.ok())
            out.order_downloads.push_back(std::move(serialized.value()));
        return out;
    }

    const std::string hash = content_hash("astm", profile.device_id, text);
    if (queue_.seen_hash(profile.device_id, hash)) {
        counters.duplicates_skipped++;
        out.duplicate = true;
        return out;
    }
    auto raws = astm::extract_results(msg, profile.device_id, map);
    if (!raws.ok()) {
        deadletters_.add(profile.device_id, text, raws.error().code);
        counters.dead_lettered++;
        out.dead_lettered++;
        // Record the delivery anyway so a transport-level replay is skipped.
        queue_.append_batch(profile.device_id, hash, {});
        return out;
    }
    return commit_raw_results(profile, snap, counters, hash, std::move(raws.value()), "^");
}

ProcessOutcome GatewayService::process_hl7_text(const DeviceProfile& profile,
                                                const RegistrySnapshot& snap, DeviceCounters& counters,
                                                const std::string& text, std::string* ack_out) {
    ProcessOutcome out;
    auto parsed = hl7::parse_hl7(text);
    if (!parsed.ok()) {
        deadletters_.add(profile.device_id, text, parsed.error().code);
        counters.dead_lettered++;
        out.dead_lettered++;
        return out;  // no MSH, nothing to acknowledge
    }
    const hl7::Hl7Message& msg = parsed.value();
    auto reply = [&](hl7::AckCode code) {
        if (!ack_out) return;
        if (auto ack = hl7::build_ack(msg, code); ack.ok()) *ack_out = hl7::serialize_hl7(ack.value());
    };

    if (msg.message_type() != "ORU^R01") {
        deadletters_.add(profile.device_id, text, "wrong_message_type");
        counters.dead_lettered++;
        out.dead_lettered++;
        reply(hl7::AckCode::AR);
        return out;
    }

    const std::string hash = content_hash("hl7", profile.device_id, text);
    if (queue_.seen_hash(profile.device_id, hash)) {
        counters.duplicates_skipped++;
        out.duplicate = true;
        reply(hl7::AckCode::AA);  // delivery already safe; re-acknowledge
        return out;
    }
    auto raws = hl7::extract_results_hl7(msg, profile.device_id);
    if (!raws.ok()) {
        deadletters_.add(profile.device_id, text, raws.error().code);
        counters.dead_lettered++;
        out.dead_lettered++;
        queue_.append_batch(profile.device_id, hash, {});
        reply(hl7::AckCode::AE);
        return out;
    }
    out = commit_raw_results(profile, snap, counters, hash, std::move(raws.value()), "-");
    // Mapping gaps are a site configuration issue, not a delivery failure.
    reply(hl7::AckCode::AA);
    return out;
}

ProcessOutcome GatewayService::process_generic_frame(const DeviceProfile& profile,
                                                     const RegistrySnapshot& snap,
                                                     DeviceCounters& counters,
                                                     const std::string& frame_bytes, bool* ok_out) {
    ProcessOutcome out;
    if (ok_out) *ok_out = false;
    auto fmt = snap.resolve_format(profile.device_id);
    if (!fmt.ok() || fmt.value().definition.kind != FormatDefinition::Kind::generic_frame) {
        deadletters_.add(profile.device_id, frame_bytes, "unknown_format");
        counters.dead_lettered++;
        out.dead_lettered++;
        return out;
    }
    const std::string hash = content_hash("gen", profile.device_id, frame_bytes);
    if (queue_.seen_hash(profile.device_id, hash)) {
        counters.duplicates_skipped++;
        out.duplicate = true;
        if (ok_out) *ok_out = true;
        return out;
    }
    auto raws = gen::decode_generic(frame_bytes, fmt.value().definition.frame, profile.device_id);
    if (!raws.ok()) {
        // BCC or envelope failure: NAK path, the analyzer resends corrected
        // bytes, so the hash is intentionally not recorded.
        deadletters_.add(profile.device_id, frame_bytes, raws.error().code);
        counters.dead_lettered++;
        counters.frames_nak++;
        out.dead_lettered++;
        return out;
    }
    counters.frames_ok++;
    if (ok_out) *ok_out = true;
    out = commit_raw_results(profile, snap, counters, hash, std::move(raws.value()), "^");
    return out;
}

ProcessOutcome GatewayService::commit_raw_results(const DeviceProfile& profile,
                                                  const RegistrySnapshot& snap,
                                                  DeviceCounters& counters,
                                                  const std::string& content_hash,
                                                  std::vector<RawResult> raws,
                                                  const std::string& ref_range_hint) {
    ProcessOutcome out;
    const std::string received_at = now_utc_iso8601();
    std::vector<ObservationResult> observations;
    for (auto& raw : raws) {
        auto mapping = snap.map_test_code(profile.device_id, raw.machine_test_code);
        if (!mapping.ok()) {
            // Unmapped codes park in the dead-letter report, never silently
            // dropped and never fuzzily matched.
            deadletters_.add(profile.device_id, raw_result_to_json(raw).dump(), "unmapped_test_code");
            counters.dead_lettered++;
            out.dead_lettered++;
            continue;
        }
        observations.push_back(
            normalize(raw, mapping.value(), config_.gateway_id, 0, received_at, ref_range_hint));
    }
    auto appended = queue_.append_batch(profile.device_id, content_hash, std::move(observations));
    if (!appended.ok()) {
        deadletters_.add(profile.device_id, content_hash, appended.error().code);
        counters.dead_lettered++;
        out.dead_lettered++;
        return out;
    }
    if (appended.value().duplicate) {
        counters.duplicates_skipped++;
        out.duplicate = true;
        return out;
    }
    if (appended.value().first_sequence > 0) {
        out.emitted = static_cast<int>(appended.value().last_sequence -
                                       appended.value().first_sequence + 1);
        counters.results_emitted += static_cast<std::uint64_t>(out.emitted);
    }
    return out;
}

ProcessOutcome GatewayService::on_message(const std::string& device_id, const std::string& payload) {
    auto snap = registry_.snapshot();
    const DeviceProfile* profile = snap->find_device(device_id);
    DeviceCounters scratch;
    if (!profile) return {};
    DeviceCounters* counters = &scratch;
    for (auto& rt : runtimes_)
        if (rt->profile.device_id == device_id) counters = &rt->counters;
    switch (profile->protocol) {
        case Protocol::astm: return process_astm_text(*profile, *snap, *counters, payload);
        case Protocol::hl7: return process_hl7_text(*profile, *snap, *counters, payload, nullptr);
        case Protocol::generic: {
            bool ok = false;
            return process_generic_frame(*profile, *snap, *counters, payload, &ok);
        }
        case Protocol::file_only: return {};
    }
    return {};
}

Result<json> GatewayService::ingest_content(const std::string& device_id,
                                            const std::string& operator_id,
                                            const std::string& content) {
    using R = Result<json>;
    auto snap = registry_.snapshot();
    const DeviceProfile* profile = snap->find_device(device_id);
    if (!profile) return R::failure("unknown_device", device_id);
    if (!snap->find_user(operator_id)) return R::failure("unknown_operator", operator_id);
    auto fmt = snap->resolve_file_format(device_id);
    if (!fmt.ok()) return R::failure(fmt.error().code, fmt.error().detail);

    const std::string hash = content_hash("file", device_id, content);
    if (queue_.seen_hash(device_id, hash)) {
        return json{{"duplicate", true}, {"accepted", 0}, {"rejected", json::array()},
                    {"dead_lettered", 0}};
    }

    auto outcome = gen::ingest_file(content, fmt.value().file, device_id, operator_id);
    if (!outcome.ok()) return R::failure(outcome.error().code, outcome.error().detail);

    DeviceCounters scratch;
    DeviceCounters* counters = &scratch;
    for (auto& rt : runtimes_)
        if (rt->profile.device_id == device_id) counters = &rt->counters;
    // Transactional per file: one durable batch or nothing.
    ProcessOutcome committed =
        commit_raw_results(*profile, *snap, *counters, hash, std::move(outcome.value().results), "^");

    json rejected = json::array();
    for (const auto& r : outcome.value().rejected)
        rejected.push_back(json{{"line", r.line_number}, {"reason", r.reason}});
    audit(operator_id, "ingest",
          device_id + " accepted=" + std::to_string(committed.emitted) +
              " rejected=" + std::to_string(rejected.size()));
    return json{{"duplicate", false},
                {"accepted", committed.emitted},
                {"rejected", std::move(rejected)},
                {"dead_lettered", committed.dead_lettered}};
}

void GatewayService::audit(const std::string& operator_id, const std::string& action,
                           const std::string& detail) {
    std::lock_guard lock(audit_mutex_);
    std::ofstream out(config_.audit_path, std::ios::app);
    if (out) out << now_utc_iso8601() << " | " << operator_id << " | " << action << " | " << detail << "\n";
}

json GatewayService::status_json() const {
    json devices = json::array();
    std::uint64_t total_emitted = 0, total_dead = 0;
    for (const auto& rt : runtimes_) {
        const auto& c = rt->counters;
        total_emitted += c.results_emitted;
        total_dead += c.dead_lettered;
        json entry{{"device_id", rt->profile.device_id},
                   {"protocol", to_string(rt->profile.protocol)},
                   {"mode", to_string(rt->profile.mode)},
                   {"format_id", rt->profile.format_id},
                   {"endpoint", rt->profile.listen_endpoint},
                   {"listener", rt->listener_state},
                   {"session_active", rt->session_active.load()},
                   {"counters",
                    {{"frames_ok", c.frames_ok.load()},
                     {"frames_nak", c.frames_nak.load()},
                     {"results_emitted", c.results_emitted.load()},
                     {"dead_lettered", c.dead_lettered.load()},
                     {"duplicates_skipped", c.duplicates_skipped.load()},
                     {"queries_handled", c.queries_handled.load()},
                     {"his_unreachable", c.his_unreachable.load()}}},
                   {"queue_depth", queue_.pending_count(rt->profile.device_id)},
                   {"deadletters", deadletters_.count_for(rt->profile.device_id)}};
        if (!rt->listener_detail.empty()) entry["listener_detail"] = rt->listener_detail;
        devices.push_back(std::move(entry));
    }
    json status{{"gateway_id", config_.gateway_id},
                {"running", running_.load()},
                {"uptime_s", running_ ? (util::now_ms() - started_ms_) / 1000 : 0},
                {"devices", std::move(devices)},
                {"totals",
                 {{"results_emitted", total_emitted},
                  {"dead_lettered", total_dead},
                  {"queue_depth", queue_.pending_total()},
                  {"parked", queue_.parked_count()},
                  {"deadletters", deadletters_.count()}}}};
    if (uploader_) {
        auto s = uploader_->stats();
        status["uploader"] = json{{"envelopes_delivered", s.envelopes_delivered},
                                  {"observations_delivered", s.observations_delivered},
                                  {"retries", s.retries},
                                  {"parked_envelopes", s.parked_envelopes},
                                  {"duplicates_reported", s.duplicates_reported},
                                  {"last_delivery_at", s.last_delivery_at}};
    }
    return status;
}

void GatewayService::start_control_endpoint() {
    auto ep = net::parse_endpoint(config_.control_endpoint);
    if (!ep.ok()) return;
    control_ = std::make_unique<ControlServer>();
    auto& svr = control_->server;

    svr.Get("/status", [this](const httplib::Request&, httplib::Response& res) {
        res.set_content(status_json().dump(2), "application/json");
    });
    svr.Get("/deadletters", [this](const httplib::Request&, httplib::Response& res) {
        json entries = json::array();
        for (const auto& e : deadletters_.entries())
            entries.push_back(json{{"id", e.id},
                                   {"device_id", e.device_id},
                                   {"payload_b64", util::base64_encode(e.payload)},
                                   {"reason", e.reason},
                                   {"occurred_at", e.occurred_at}});
        res.set_content(json{{"entries", std::move(entries)}}.dump(2), "application/json");
    });
    svr.Post("/deadletters/drain", [this](const httplib::Request& req, httplib::Response& res) {
        json body = json::parse(req.body, nullptr, false);
        if (body.is_discarded() || !body.contains("up_to_id")) {
            res.status = 400;
            res.set_content(json{{"error", "bad_request"}}.dump(), "application/json");
            return;
        }
        deadletters_.drain_up_to(body["up_to_id"].get<std::uint64_t>());
        res.set_content(json{{"ok", true}}.dump(), "application/json");
    });
    svr.Post("/ingest", [this](const httplib::Request& req, httplib::Response& res) {
        json body = json::parse(req.body, nullptr, false);
        if (body.is_discarded()) {
            res.status = 400;
            res.set_content(json{{"error", "bad_request"}}.dump(), "application/json");
            return;
        }
        auto report = ingest_content(body.value("device_id", ""), body.value("operator_id", ""),
                                     util::base64_decode(body.value("content_b64", "")));
        if (!report.ok()) {
            res.status = report.error().code == "unknown_device" ? 404 : 400;
            res.set_content(json{{"error", report.error().code}, {"detail", report.error().detail}}.dump(),
                            "application/json");
            return;
        }
        res.set_content(report.value().dump(2), "application/json");
    });
    svr.Get("/registry/devices", [this](const httplib::Request&, httplib::Response& res) {
        json devices = json::array();
        for (const auto& d : registry_.snapshot()->devices()) devices.push_back(device_profile_to_json(d));
        res.set_content(json{{"devices", std::move(devices)}}.dump(2), "application/json");
    });
    svr.Post("/registry/devices", [this](const httplib::Request& req, httplib::Response& res) {
        json body = json::parse(req.body, nullptr, false);
        auto profile = body.is_discarded() ? Result<DeviceProfile>::failure("bad_request", "")
                                           : device_profile_from_json(body.value("device", json::object()));
        if (!profile.ok()) {
            res.status = 400;
            res.set_content(json{{"error", profile.error().code}}.dump(), "application/json");
            return;
        }
        auto registered = registry_.register_device(profile.value());
        if (!registered.ok()) {
            res.status = 409;
            res.set_content(json{{"error", registered.error().code},
                                 {"detail", registered.error().detail}}.dump(),
                            "application/json");
            return;
        }
        audit(body.value("operator_id", "cli"), "device-add", profile.value().device_id);
        res.set_content(json{{"ok", true}, {"device_id", registered.value()}}.dump(), "application/json");
    });
    svr.Post("/registry/set-format", [this](const httplib::Request& req, httplib::Response& res) {
        json body = json::parse(req.body, nullptr, false);
        if (body.is_discarded()) {
            res.status = 400;
            res.set_content(json{{"error", "bad_request"}}.dump(), "application/json");
            return;
        }
        auto err = registry_.update_format(body.value("device_id", ""), body.value("format_id", ""));
        if (err) {
            res.status = err->code == "unknown_device" ? 404 : 400;
            res.set_content(json{{"error", err->code}, {"detail", err->detail}}.dump(),
                            "application/json");
            return;
        }
        audit(body.value("operator_id", "cli"), "set-format",
              body.value("device_id", "") + " -> " + body.value("format_id", ""));
        res.set_content(json{{"ok", true}}.dump(), "application/json");
    });
    svr.Post("/shutdown", [this](const httplib::Request&, httplib::Response& res) {
        control_->shutdown_requested = true;
        res.set_content(json{{"ok", true}}.dump(), "application/json");
    });

    if (!svr.bind_to_port(ep.value().host, ep.value().port)) {
        control_.reset();
        return;
    }
    control_port_ = ep.value().port;
    control_->thread = std::thread([this] { control_->server.listen_after_bind(); });
}

}  // namespace gmei
