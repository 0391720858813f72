#include <map>
#include <optional>
#include <random>
#include <vector>

#include "doctest.h"
#include "quicpep/engine.hpp"

using namespace quicpep;

namespace {

struct SentDatagram {
  Bytes bytes;
  Endpoint src;
  Endpoint dst;
};

class MockHost : public EngineHost {
 public:
  void send(std::span<const std::uint8_t> datagram, const Endpoint& src,
            const Endpoint& dst) override {
    sends.push_back({Bytes(datagram.begin(), datagram.end()), src, dst});
  }
  void request_wakeup(TimeUs at) override { wakeup = at; }

  std::vector<SentDatagram> sends;
  std::optional<TimeUs> wakeup;
};

class MockProbeDriver : public ProbeDriver {
 public:
  bool request(const Endpoint& target, std::uint64_t token) override {
    requests.emplace_back(target, token);
    return true;
  }
  std::vector<std::pair<Endpoint, std::uint64_t>> requests;
};

const Endpoint kClient{0x0a000001, 50'000};
const Endpoint kServer{0x0a000002, 443};

Bytes make_long_header(std::uint8_t type_bits, std::size_t size) {
  Bytes b;
  b.push_back(static_cast<std::uint8_t>(0xc0 | (type_bits << 4)));
  b.insert(b.end(), {0x00, 0x00, 0x00, 0x01});
  b.push_back(4);
  b.insert(b.end(), {1, 2, 3, 4});
  b.push_back(4);
  b.insert(b.end(), {5, 6, 7, 8});
  b.resize(size, 0);
  return b;
}

Bytes make_data(std::uint64_t seq, std::size_t size) {
  Bytes b(size, 0);
  b[0] = 0x40;
  for (int i = 0; i < 8; ++i) {
    b[1 + i] = static_cast<std::uint8_t>(seq >> (8 * (7 - i)));
  }
  return b;
}

Bytes make_ack(std::uint64_t seq) {
  Bytes b(40, 0);
  b[0] = 0x41;
  for (int i = 0; i < 8; ++i) {
    b[1 + i] = static_cast<std::uint8_t>(seq >> (8 * (7 - i)));
  }
  return b;
}

// Drives the engine like an event loop would: timers fire in order before
// each datagram.
struct Harness {
  MockHost host;
  MockProbeDriver probes;
  Engine engine;
  TimeUs now = 0;

  explicit Harness(EngineConfig cfg) : engine(host, &probes, cfg) {}

  void advance_to(TimeUs t) {
    while (host.wakeup && *host.wakeup <= t) {
      const TimeUs at = *host.wakeup;
      host.wakeup.reset();
      now = std::max(now, at);
      engine.on_timer(at);
      // answer any probe request immediately with a 10ms sample
      for (auto& [target, token] : probes.requests) {
        (void)target;
        engine.on_probe_result(token, 10'000, now);
      }
      probes.requests.clear();
    }
    now = std::max(now, t);
  }

  void datagram(TimeUs t, const Bytes& bytes, const Endpoint& src,
                const Endpoint& dst) {
    advance_to(t);
    engine.on_datagram(bytes, src, dst, t);
  }
};

EngineConfig test_config() {
  EngineConfig cfg;
  cfg.eliciting_window = 40;  // quick warmup for compact scripts
  return cfg;
}

// client Initial at 0, server handshake at 2ms, client handshake at 12ms:
// server leg 2ms, client leg 10ms.
void run_handshake(Harness& h) {
  h.datagram(0, make_long_header(0, 1'200), kClient, kServer);
  h.datagram(2'000, make_long_header(2, 1'200), kServer, kClient);
  h.datagram(12'000, make_long_header(2, 300), kClient, kServer);
}

}  // namespace

TEST_CASE("non-QUIC datagrams pass through byte-identically with no state") {
  Harness h(test_config());
  std::mt19937_64 rng(41);
  for (int i = 0; i < 2'000; ++i) {
    Bytes b(1 + rng() % 600);
    for (auto& x : b) {
      x = static_cast<std::uint8_t>(rng());
    }
    // never a valid v1 Initial: poison the version field
    if (b.size() >= 5) {
      b[1] = 0xff;
    }
    const Endpoint src{static_cast<std::uint32_t>(rng()),
                       static_cast<std::uint16_t>(rng() | 1)};
    const Endpoint dst{static_cast<std::uint32_t>(rng()),
                       static_cast<std::uint16_t>(rng() | 1)};
    h.engine.on_datagram(b, src, dst, i * 10);
    REQUIRE(h.host.sends.size() == static_cast<std::size_t>(i + 1));
    CHECK(h.host.sends.back().bytes == b);
    CHECK(h.host.sends.back().src == src);
    CHECK(h.host.sends.back().dst == dst);
  }
  CHECK(h.engine.connection_count() == 0);
}

TEST_CASE("handshake tracking seeds both per-side RTT estimates") {
  Harness h(test_config());
  run_handshake(h);
  const auto* conn =
      h.engine.find_connection(FourTuple::canonical(kClient, kServer));
  REQUIRE(conn != nullptr);
  CHECK(conn->handshake.established());
  CHECK(conn->rtt_to_server.srtt() == 2'000);
  CHECK(conn->rtt_to_client.srtt() == 10'000);
  CHECK(h.engine.connection_count() == 1);
}

TEST_CASE("inference pipeline: drop detection, retransmit, once only") {
  Harness h(test_config());
  run_handshake(h);

  std::map<std::uint64_t, Bytes> data_bytes;
  std::vector<ReportEvent> reports;
  h.engine.report_hook = [&](const ReportEvent& ev) { reports.push_back(ev); };

  // 5-packet server bursts every 30ms; the client acknowledges each data
  // packet 10ms after it passes the middlebox. One ACK is withheld in
  // burst 14 (after the estimator has warmed up at 40 sent packets).
  std::uint64_t seq = 0;
  const int kBursts = 20;
  const int kDropBurst = 14;
  std::uint64_t dropped_seq = 0;
  struct Pending {
    TimeUs t;
    std::uint64_t seq;
  };
  std::vector<Pending> acks;
  TimeUs burst_start = 100'000;
  for (int burst = 0; burst < kBursts; ++burst) {
    for (int i = 0; i < 5; ++i) {
      const TimeUs t = burst_start + i * 1'000;
      ++seq;
      Bytes b = make_data(seq, 1'200);
      data_bytes[seq] = b;
      // interleave due ACKs to keep middlebox arrival order by time
      while (!acks.empty() && acks.front().t <= t) {
        h.datagram(acks.front().t, make_ack(acks.front().seq), kClient,
                   kServer);
        acks.erase(acks.begin());
      }
      h.datagram(t, b, kServer, kClient);
      const bool withhold = burst == kDropBurst && i == 2;
      if (withhold) {
        dropped_seq = seq;
      } else {
        acks.push_back({t + 10'000, seq});
      }
    }
    burst_start += 30'000;
  }
  for (const auto& a : acks) {
    h.datagram(a.t, make_ack(a.seq), kClient, kServer);
  }
  h.advance_to(burst_start + 200'000);

  // exactly one loss inferred, for the withheld packet
  std::size_t nonempty = 0;
  for (const auto& ev : reports) {
    if (!ev.report.lost.empty()) {
      ++nonempty;
      REQUIRE(ev.lost_digests.size() == 1);
      CHECK(ev.lost_digests[0] == payload_digest(data_bytes[dropped_seq]));
    }
  }
  CHECK(nonempty == 1);
  CHECK(h.engine.stats().retransmitted == 1);

  // the retransmitted copy is a byte-identical duplicate of the original
  std::size_t copies = 0;
  for (const auto& s : h.host.sends) {
    if (s.bytes == data_bytes[dropped_seq]) {
      ++copies;
      CHECK(s.src == kServer);
      CHECK(s.dst == kClient);
    }
  }
  CHECK(copies == 2);  // the forward plus exactly one retransmission
}

TEST_CASE("amplification stays within the retransmit budget") {
  EngineConfig cfg = test_config();
  cfg.retx_budget_window = kMicrosPerSec;
  Harness h(cfg);
  run_handshake(h);

  // adversarial stream: nothing is ever acknowledged
  std::uint64_t seq = 0;
  TimeUs burst_start = 100'000;
  for (int burst = 0; burst < 120; ++burst) {
    for (int i = 0; i < 5; ++i) {
      h.datagram(burst_start + i * 1'000, make_data(++seq, 1'200), kServer,
                 kClient);
    }
    burst_start += 30'000;
  }
  h.advance_to(burst_start + 500'000);

  const auto* conn =
      h.engine.find_connection(FourTuple::canonical(kClient, kServer));
  REQUIRE(conn != nullptr);
  auto check_window = [](const RetxBudget::Window& w) {
    CHECK(static_cast<double>(w.retransmitted) <=
          0.10 * static_cast<double>(w.forwarded) + 1.0);
  };
  for (const auto& w : conn->budget.history()) {
    check_window(w);
  }
  check_window(conn->budget.current());
  CHECK(h.engine.stats().retransmitted > 0);
  CHECK(h.engine.stats().retx_blocked_budget > 0);
}

TEST_CASE("probe results calibrate and large steps reset") {
  Harness h(test_config());
  run_handshake(h);

  // traffic to get past the dominance epoch
  std::uint64_t seq = 0;
  TimeUs t = 100'000;
  for (int burst = 0; burst < 10; ++burst) {
    for (int i = 0; i < 5; ++i) {
      h.datagram(t + i * 1'000, make_data(++seq, 1'200), kServer, kClient);
      h.datagram(t + i * 1'000 + 10'000, make_ack(seq), kClient, kServer);
    }
    t += 30'000;
  }
  h.advance_to(t + 100'000);
  const auto* conn =
      h.engine.find_connection(FourTuple::canonical(kClient, kServer));
  REQUIRE(conn != nullptr);
  CHECK(conn->dominant == Direction::kServerToClient);
  // harness answered probes with 10ms samples; srtt should still be ~10ms
  CHECK(conn->rtt_to_client.srtt() == doctest::Approx(10'000).epsilon(0.05));
  CHECK(h.engine.stats().calibration_resets == 0);
  CHECK(h.engine.stats().probes_sent > 0);
}

TEST_CASE("idle connections disappear after the timeout") {
  EngineConfig cfg = test_config();
  cfg.idle_timeout = 2 * kMicrosPerSec;
  Harness h(cfg);
  run_handshake(h);
  CHECK(h.engine.connection_count() == 1);
  h.advance_to(5 * kMicrosPerSec);
  h.engine.on_timer(5 * kMicrosPerSec);
  CHECK(h.engine.connection_count() == 0);
}
