#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "gmei/queue.hpp"
#include "gmei/util.hpp"

using namespace gmei;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("gmei-q-" + std::to_string(::getpid()) + "-" + std::to_string(counter()++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    static int& counter() {
        static int c = 0;
        return c;
    }
};

ObservationQueue::Config config_for(const TempDir& dir) {
    ObservationQueue::Config c;
    c.path = (dir.path / "queue.log").string();
    c.gateway_id = "GW1";
    c.batch_max = 10;
    c.flush_idle_ms = 0;  // tests want envelopes immediately
    return c;
}

ObservationResult obs(const std::string& device, const std::string& sample, const std::string& value) {
    ObservationResult o;
    o.gateway_id = "GW1";
    o.device_id = device;
    o.sample_id = sample;
    o.test_id = "T-X";
    o.machine_test_code = "X";
    o.value = ObservationValue::from_raw(value);
    o.received_at = now_utc_iso8601();
    return o;
}

}  // namespace

TEST_CASE("enqueue is durable across restart") {
    TempDir dir;
    auto cfg = config_for(dir);
    {
        ObservationQueue queue(cfg);
        REQUIRE_FALSE(queue.open());
        auto receipt = queue.enqueue(obs("DEV-1", "S1", "42"));
        REQUIRE(receipt.ok());
        CHECK(receipt.value().sequence == 1);
    }
    ObservationQueue reopened(cfg);
    REQUIRE_FALSE(reopened.open());
    CHECK(reopened.pending_count("DEV-1") == 1);
    CHECK(reopened.next_sequence("DEV-1") == 2);
}

TEST_CASE("batch appends assign contiguous sequences and dedupe by content hash") {
    TempDir dir;
    ObservationQueue queue(config_for(dir));
    queue.open();
    auto first = queue.append_batch("DEV-1", "hash-A", {obs("DEV-1", "S1", "1"), obs("DEV-1", "S1", "2")});
    REQUIRE(first.ok());
    CHECK_FALSE(first.value().duplicate);
    CHECK(first.value().first_sequence == 1);
    CHECK(first.value().last_sequence == 2);

    auto replay = queue.append_batch("DEV-1", "hash-A", {obs("DEV-1", "S1", "1")});
    REQUIRE(replay.ok());
    CHECK(replay.value().duplicate);
    CHECK(queue.pending_count("DEV-1") == 2);
    CHECK(queue.seen_hash("DEV-1", "hash-A"));

    auto next = queue.append_batch("DEV-1", "hash-B", {obs("DEV-1", "S2", "3")});
    REQUIRE(next.ok());
    CHECK(next.value().first_sequence == 3);
}

TEST_CASE("an empty batch still records its delivery hash") {
    TempDir dir;
    ObservationQueue queue(config_for(dir));
    queue.open();
    auto outcome = queue.append_batch("DEV-1", "all-dead-lettered", {});
    REQUIRE(outcome.ok());
    CHECK(queue.seen_hash("DEV-1", "all-dead-lettered"));
    CHECK(queue.pending_count("DEV-1") == 0);
}

TEST_CASE("100 enqueues partition into contiguous envelopes with no gaps or overlaps") {
    TempDir dir;
    auto cfg = config_for(dir);
    ObservationQueue queue(cfg);
    queue.open();
    for (int i = 0; i < 100; ++i) REQUIRE(queue.enqueue(obs("DEV-1", "S" + std::to_string(i), "1")).ok());

    std::uint64_t expected_next = 1;
    int envelopes = 0;
    while (auto envelope = queue.next_envelope("DEV-1", util::now_ms(), true)) {
        ++envelopes;
        CHECK(envelope->first_sequence() == expected_next);
        std::uint64_t seq = envelope->first_sequence();
        for (const auto& o : envelope->observations) CHECK(o.sequence == seq++);
        expected_next = envelope->last_sequence() + 1;
        REQUIRE_FALSE(queue.mark_acked(*envelope));
    }
    CHECK(envelopes == 10);  // batch_max 10
    CHECK(expected_next == 101);
    CHECK(queue.pending_count("DEV-1") == 0);
}

TEST_CASE("envelopes respect batching rules") {
    TempDir dir;
    auto cfg = config_for(dir);
    cfg.flush_idle_ms = 60000;  // no idle flush inside this test
    cfg.batch_max = 3;
    ObservationQueue queue(cfg);
    queue.open();
    queue.enqueue(obs("DEV-1", "S1", "1"));
    CHECK_FALSE(queue.next_envelope("DEV-1", util::now_ms(), false));  // not full, not idle
    queue.enqueue(obs("DEV-1", "S2", "2"));
    queue.enqueue(obs("DEV-1", "S3", "3"));
    auto env = queue.next_envelope("DEV-1", util::now_ms(), false);  // batch full
    REQUIRE(env);
    CHECK(env->observations.size() == 3);
    CHECK(env->idempotency_key == "GW1:DEV-1:1-3");
    // Flush overrides the rules.
    queue.enqueue(obs("DEV-1", "S4", "4"));
    queue.mark_acked(*env);
    auto tail = queue.next_envelope("DEV-1", util::now_ms(), true);
    REQUIRE(tail);
    CHECK(tail->first_sequence() == 4);
}

TEST_CASE("a torn tail record truncates cleanly on recovery") {
    TempDir dir;
    auto cfg = config_for(dir);
    {
        ObservationQueue queue(cfg);
        queue.open();
        queue.enqueue(obs("DEV-1", "S1", "1"));
        queue.enqueue(obs("DEV-1", "S2", "2"));
    }
    {
        // Simulate a crash mid-append: half a record at the tail.
        std::ofstream out(cfg.path, std::ios::binary | std::ios::app);
        out << "GQ1 0011aabb 500 {\"t\":\"batch\",\"dev\":\"DEV-1\",\"trunc";
    }
    ObservationQueue reopened(cfg);
    REQUIRE_FALSE(reopened.open());
    CHECK(reopened.pending_count("DEV-1") == 2);
    // And the queue still accepts appends after truncation.
    CHECK(reopened.enqueue(obs("DEV-1", "S3", "3")).ok());
    CHECK(reopened.pending_count("DEV-1") == 3);
}

TEST_CASE("a corrupted middle byte drops only the tail from that point") {
    TempDir dir;
    auto cfg = config_for(dir);
    {
        ObservationQueue queue(cfg);
        queue.open();
        for (int i = 0; i < 5; ++i) queue.enqueue(obs("DEV-1", "S" + std::to_string(i), "1"));
    }
    // Flip one byte inside the last record's JSON body.
    std::string data;
    {
        std::ifstream in(cfg.path, std::ios::binary);
        data.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    data[data.size() - 10] ^= 0x01;
    {
        std::ofstream out(cfg.path, std::ios::binary | std::ios::trunc);
        out << data;
    }
    ObservationQueue reopened(cfg);
    REQUIRE_FALSE(reopened.open());
    CHECK(reopened.pending_count("DEV-1") == 4);  // the corrupt record is gone
}

TEST_CASE("acked prefixes vanish after compaction but sequences continue") {
    TempDir dir;
    auto cfg = config_for(dir);
    {
        ObservationQueue queue(cfg);
        queue.open();
        for (int i = 0; i < 10; ++i) queue.enqueue(obs("DEV-1", "S" + std::to_string(i), "1"));
        auto env = queue.next_envelope("DEV-1", util::now_ms(), true);
        queue.mark_acked(*env);
        REQUIRE_FALSE(queue.compact());
    }
    ObservationQueue reopened(cfg);
    REQUIRE_FALSE(reopened.open());
    CHECK(reopened.pending_count("DEV-1") == 0);
    CHECK(reopened.next_sequence("DEV-1") == 11);  // counter survives compaction
    CHECK(reopened.seen_hash("DEV-1", "nothing") == false);
}

TEST_CASE("dedup hashes survive compaction and restart") {
    TempDir dir;
    auto cfg = config_for(dir);
    {
        ObservationQueue queue(cfg);
        queue.open();
        queue.append_batch("DEV-1", "msg-77", {obs("DEV-1", "S1", "1")});
        auto env = queue.next_envelope("DEV-1", util::now_ms(), true);
        queue.mark_acked(*env);
        queue.compact();
    }
    ObservationQueue reopened(cfg);
    reopened.open();
    auto replay = reopened.append_batch("DEV-1", "msg-77", {obs("DEV-1", "S1", "1")});
    REQUIRE(replay.ok());
    CHECK(replay.value().duplicate);
}

TEST_CASE("parked envelopes leave the pending stream but stay inspectable") {
    TempDir dir;
    auto cfg = config_for(dir);
    ObservationQueue queue(cfg);
    queue.open();
    queue.enqueue(obs("DEV-1", "S1", "1"));
    queue.enqueue(obs("DEV-1", "S2", "2"));
    auto env = queue.next_envelope("DEV-1", util::now_ms(), true);
    REQUIRE(env);
    REQUIRE_FALSE(queue.park(*env, "HIS returned 400"));
    CHECK(queue.pending_count("DEV-1") == 0);
    CHECK(queue.parked_count() == 2);
    auto parked = queue.parked();
    REQUIRE(parked.size() == 1);
    CHECK(parked[0].reason == "HIS returned 400");

    // Parked content survives restart too.
    ObservationQueue reopened(cfg);
    reopened.open();
    CHECK(reopened.parked_count() == 2);
    CHECK(reopened.pending_count("DEV-1") == 0);
}

TEST_CASE("devices progress independently") {
    TempDir dir;
    ObservationQueue queue(config_for(dir));
    queue.open();
    queue.enqueue(obs("DEV-1", "S1", "1"));
    queue.enqueue(obs("DEV-2", "S1", "2"));
    auto one = queue.next_envelope("DEV-1", util::now_ms(), true);
    auto two = queue.next_envelope("DEV-2", util::now_ms(), true);
    REQUIRE(one);
    REQUIRE(two);
    CHECK(one->device_id() == "DEV-1");
    CHECK(two->device_id() == "DEV-2");
    CHECK(one->first_sequence() == 1);
    CHECK(two->first_sequence() == 1);
}
