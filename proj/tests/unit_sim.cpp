#include <random>

#include "doctest.h"
#include "quicpep/sim.hpp"

using namespace quicpep;
using namespace quicpep::sim;

namespace {

ScenarioConfig clean_rtc_config() {
  ScenarioConfig cfg;
  cfg.link1.one_way_delay = 1'000;
  cfg.link1.bandwidth_bps = 100e6;
  cfg.link2.one_way_delay = 25'000;
  cfg.link2.bandwidth_bps = 10e6;
  cfg.client.eliciting_threshold = 1;
  cfg.server.eliciting_threshold = 1;
  cfg.traffic.app = AppKind::kRtc;
  cfg.traffic.cc = CcKind::kFixedRate;
  cfg.duration = 3 * kMicrosPerSec;
  cfg.engine_on = true;
  return cfg;
}

}  // namespace

TEST_CASE("ge_step edge behavior") {
  std::mt19937_64 rng(1);

  SUBCASE("never leaves the good state at p_gb 0") {
    GeState st;
    LossModel m;
    m.kind = LossKind::kGilbertElliott;
    m.p_good_to_bad = 0.0;
    m.p_bad_to_good = 0.5;
    m.loss_bad = 1.0;
    for (int i = 0; i < 1'000; ++i) {
      CHECK(!ge_step(st, m, rng));
      CHECK(!st.bad);
    }
  }

  SUBCASE("alternates states at unit transition probabilities") {
    GeState st;
    LossModel m;
    m.p_good_to_bad = 1.0;
    m.p_bad_to_good = 1.0;
    m.loss_bad = 1.0;
    for (int i = 0; i < 100; ++i) {
      const bool drop = ge_step(st, m, rng);
      CHECK(drop == (i % 2 == 1));
    }
  }

  SUBCASE("burst statistics match the chain parameters") {
    GeState st;
    LossModel m;
    m.p_good_to_bad = 0.00069;
    m.p_bad_to_good = 0.0693;
    m.loss_bad = 1.0;
    std::uint64_t drops = 0;
    const int kPackets = 3'000'000;
    for (int i = 0; i < kPackets; ++i) {
      if (ge_step(st, m, rng)) {
        ++drops;
      }
    }
    // stationary bad-state share = p_gb / (p_gb + p_bg) ~ 0.986%
    const double share = static_cast<double>(drops) / kPackets;
    const double expected = 0.00069 / (0.00069 + 0.0693);
    CHECK(share == doctest::Approx(expected).epsilon(0.08));
  }
}

TEST_CASE("rtc source geometry") {
  const RtcFrameShape shape = rtc_source(30.0, 3e6);
  CHECK(shape.frame_bytes == 12'500);
  CHECK(shape.packets_per_frame == 11);
  CHECK(shape.interval == 33'333);

  CHECK(rtc_source(1.0, 3e6).interval == kMicrosPerSec);
  CHECK(rtc_source(30.0, 0.0).frame_bytes == 0);
  CHECK(rtc_source(30.0, 0.0).packets_per_frame == 0);
}

TEST_CASE("detector scoring arithmetic") {
  auto digest_of = [](std::uint8_t tag) {
    PayloadDigest d{};
    d[0] = tag;
    return d;
  };
  std::set<PayloadDigest> actual;
  std::set<PayloadDigest> reported;
  for (std::uint8_t i = 0; i < 10; ++i) {
    actual.insert(digest_of(i));
  }
  for (std::uint8_t i = 1; i < 10; ++i) {
    reported.insert(digest_of(i));  // 9 correct
  }
  reported.insert(digest_of(200));  // 1 false report
  DetectorScore s = score_detector(actual, reported);
  CHECK(s.precision == doctest::Approx(0.9));
  CHECK(s.recall == doctest::Approx(0.9));

  CHECK(score_detector({}, {}).precision == 1.0);
  CHECK(score_detector({}, {}).recall == 1.0);

  DetectorScore all = score_detector(actual, actual);
  CHECK(all.precision == 1.0);
  CHECK(all.recall == 1.0);
}

TEST_CASE("config validation rejects bad fields") {
  ScenarioConfig cfg = clean_rtc_config();
  cfg.link1.loss.kind = LossKind::kUniform;
  cfg.link1.loss.probability = 1.5;
  CHECK_THROWS(cfg.validate());

  cfg = clean_rtc_config();
  cfg.link2.bandwidth_bps = 0;
  CHECK_THROWS(cfg.validate());

  cfg = clean_rtc_config();
  cfg.duration = 0;
  CHECK_THROWS(cfg.validate());
}

TEST_CASE("same seed reproduces traces bit for bit") {
  ScenarioConfig cfg = clean_rtc_config();
  cfg.link1.loss.kind = LossKind::kUniform;
  cfg.link1.loss.probability = 0.01;
  ScenarioResult a = run_scenario(cfg, 42);
  ScenarioResult b = run_scenario(cfg, 42);
  CHECK(a.events == b.events);
  CHECK(a.metrics.goodput_bps == b.metrics.goodput_bps);
  CHECK(a.metrics.frames_completed == b.metrics.frames_completed);
  CHECK(a.truth.packets.size() == b.truth.packets.size());
  CHECK(a.mb_trace.size() == b.mb_trace.size());

  ScenarioResult c = run_scenario(cfg, 43);
  CHECK(a.events != c.events);
}

TEST_CASE("per-link conservation and latency floor") {
  ScenarioConfig cfg = clean_rtc_config();
  cfg.link1.loss.kind = LossKind::kUniform;
  cfg.link1.loss.probability = 0.02;
  ScenarioResult r = run_scenario(cfg, 7);

  for (const LinkCounters* c : {&r.truth.link1, &r.truth.link2}) {
    CHECK(c->sent ==
          c->delivered + c->dropped_loss + c->dropped_queue + c->in_flight);
    CHECK(c->sent > 0);
  }
  // min latency >= one-way delay + serialization of the smallest packet
  CHECK(r.truth.link1.min_latency >=
        cfg.link1.one_way_delay + cfg.link1.serialization_us(40));
  CHECK(r.truth.link2.min_latency >=
        cfg.link2.one_way_delay + cfg.link2.serialization_us(40));
}

TEST_CASE("handshake seeds the engine with exact path RTTs") {
  ScenarioConfig cfg = clean_rtc_config();
  ScenarioResult r = run_scenario(cfg, 3);
  REQUIRE(r.metrics.snapshot.present);

  const DurUs expect_server =
      2 * cfg.link2.one_way_delay +
      cfg.link2.serialization_us(kInitialPacketBytes) +
      cfg.link2.serialization_us(kServerHandshakeBytes);
  const DurUs expect_client =
      2 * cfg.link1.one_way_delay +
      cfg.link1.serialization_us(kServerHandshakeBytes) +
      cfg.link1.serialization_us(kClientHandshakeBytes);
  CHECK(std::abs(r.metrics.snapshot.initial_server_rtt - expect_server) <= 1);
  CHECK(std::abs(r.metrics.snapshot.initial_client_rtt - expect_client) <= 1);
}

TEST_CASE("threshold-1 and threshold-2 receivers hit their reply ratios") {
  ScenarioConfig cfg = clean_rtc_config();
  cfg.duration = 10 * kMicrosPerSec;
  cfg.engine_on = false;

  cfg.client.eliciting_threshold = 1;
  ScenarioResult one = run_scenario(cfg, 11);
  REQUIRE(one.metrics.receiver_data_packets > 500);
  const double r1 = static_cast<double>(one.metrics.receiver_acks_sent) /
                    static_cast<double>(one.metrics.receiver_data_packets);
  CHECK(r1 == doctest::Approx(1.0).epsilon(0.03));

  cfg.client.eliciting_threshold = 2;
  ScenarioResult two = run_scenario(cfg, 11);
  const double r2 = static_cast<double>(two.metrics.receiver_acks_sent) /
                    static_cast<double>(two.metrics.receiver_data_packets);
  CHECK(r2 >= 0.47);
  CHECK(r2 <= 0.53);
}

TEST_CASE("clean RTC with injected drops: detector is exact") {
  ScenarioConfig cfg = clean_rtc_config();
  cfg.duration = 8 * kMicrosPerSec;  // ~240 flowlets
  cfg.engine.eliciting_window = 200;
  // one injected drop per 10th flowlet, mid-frame, starting after the
  // estimator has warmed up (200 packets ~ flowlet 19); only the first
  // transmission is dropped, repairs and retransmissions pass
  cfg.link1.loss.kind = LossKind::kTargetedFrameDrop;
  cfg.link1.loss.frame_every_n = 10;
  cfg.link1.loss.frame_offset = 22;  // past estimator warmup
  cfg.link1.loss.chunk_idx = 5;      // mid-frame, 1ms from neighbours

  ScenarioResult r = run_scenario(cfg, 5);
  CHECK(r.metrics.true_losses_protected_link >= 15);
  CHECK(r.metrics.detector_precision == 1.0);
  CHECK(r.metrics.detector_recall == 1.0);
  CHECK(r.metrics.engine.retransmitted >= 15);
}

TEST_CASE("engine repairs cut RTC tail delay under uniform loss") {
  ScenarioConfig cfg = clean_rtc_config();
  cfg.duration = 6 * kMicrosPerSec;
  cfg.link1.loss.kind = LossKind::kUniform;
  cfg.link1.loss.probability = 0.01;

  cfg.engine_on = false;
  ScenarioResult off = run_scenario(cfg, 9);
  cfg.engine_on = true;
  ScenarioResult on = run_scenario(cfg, 9);

  CHECK(on.metrics.frames_completed >= off.metrics.frames_completed);
  CHECK(on.metrics.engine.retransmitted > 0);
}
