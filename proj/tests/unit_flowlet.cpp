#include <random>

#include "doctest.h"
#include "quicpep/flowlet.hpp"

using namespace quicpep;

namespace {

PacketRecord sent_pkt(std::uint64_t id, TimeUs t, bool with_payload = false) {
  PacketRecord p;
  p.id = id;
  p.t = t;
  p.size = 1200;
  p.dir = Direction::kServerToClient;
  if (with_payload) {
    p.payload = std::make_shared<const Bytes>(1200, 0xab);
  }
  return p;
}

PacketRecord reply_pkt(std::uint64_t id, TimeUs t) {
  PacketRecord p;
  p.id = id;
  p.t = t;
  p.size = 40;
  p.dir = Direction::kClientToServer;
  return p;
}

// split-at-gaps->=-timeout reference partition
std::vector<std::size_t> oracle_partition(const std::vector<TimeUs>& ts,
                                          DurUs timeout) {
  std::vector<std::size_t> sizes;
  std::size_t run = 0;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    if (i > 0 && ts[i] - ts[i - 1] >= timeout) {
      sizes.push_back(run);
      run = 0;
    }
    ++run;
  }
  if (run > 0) {
    sizes.push_back(run);
  }
  return sizes;
}

FlowletParams fixed_params(DurUs timeout, std::size_t cap = 100) {
  FlowletParams p;
  p.fixed_timeout = timeout;
  p.max_flowlet_packets = cap;
  p.max_active_flowlets = 100'000;  // partition tests want no forced closes
  return p;
}

}  // namespace

TEST_CASE("flowlet timeout is alpha times the smoothed interval") {
  FlowletParams p;
  p.alpha = 2.0;
  FlowletTracker tracker(p);
  CHECK(!tracker.flowlet_timeout());  // cold start signals not-ready
  tracker.update_s_inv(5'000);
  CHECK(tracker.flowlet_timeout() == 10'000);

  FlowletParams p2;
  p2.alpha = 2.0;
  FlowletTracker t2(p2);
  t2.update_s_inv(50);
  CHECK(t2.flowlet_timeout() == 100);

  FlowletParams p3;
  p3.alpha = 1.0;
  FlowletTracker t3(p3);
  t3.update_s_inv(7'777);
  CHECK(t3.flowlet_timeout() == 7'777);
}

TEST_CASE("s_inv smoothing") {
  FlowletTracker tracker{FlowletParams{}};
  CHECK(tracker.update_s_inv(4'000) == 4'000);  // first sample initializes
  CHECK(tracker.update_s_inv(8'000) == 4'500);  // (1-1/8)*4 + 1/8*8
  FlowletTracker fix{FlowletParams{}};
  fix.update_s_inv(6'400);
  CHECK(fix.update_s_inv(6'400) == 6'400);  // fixed point
}

TEST_CASE("ingest keeps packets within the timeout in one flowlet") {
  FlowletTracker tracker(fixed_params(10'000));
  tracker.ingest_sent(sent_pkt(1, 100'000));
  auto r = tracker.ingest_sent(sent_pkt(2, 105'000));
  CHECK(tracker.active().size() == 1);
  CHECK(r.fid == tracker.active().back().fid);

  auto r2 = tracker.ingest_sent(sent_pkt(3, 117'000));  // gap 12ms >= 10ms
  CHECK(tracker.active().size() == 2);
  CHECK(r2.fid != r.fid);
  CHECK(tracker.active().front().state == FlowletState::kAwaitingReplies);
}

TEST_CASE("the packet beyond the cap abandons the flowlet") {
  FlowletParams p = fixed_params(10'000, 100);
  FlowletTracker tracker(p);
  TimeUs t = 0;
  for (int i = 1; i <= 100; ++i) {
    auto r = tracker.ingest_sent(sent_pkt(i, t, true));
    CHECK(!r.abandoned);
    t += 1'000;
  }
  auto r = tracker.ingest_sent(sent_pkt(101, t, true));
  CHECK(r.abandoned);
  CHECK(tracker.active().back().state == FlowletState::kAbandoned);
  CHECK(tracker.buffered_bytes() == 0);  // payloads dropped with protection
}

TEST_CASE("partition matches the gap oracle") {
  std::mt19937_64 rng(23);
  for (int iter = 0; iter < 500; ++iter) {
    const std::size_t count = 1 + rng() % 60;
    std::vector<TimeUs> ts;
    TimeUs t = 0;
    for (std::size_t i = 0; i < count; ++i) {
      t += static_cast<TimeUs>(rng() % 20'000);
      ts.push_back(t);
    }
    const DurUs timeout = 1 + static_cast<DurUs>(rng() % 15'000);

    FlowletTracker tracker(fixed_params(timeout));
    std::vector<std::size_t> sizes;
    for (std::size_t i = 0; i < ts.size(); ++i) {
      auto r = tracker.ingest_sent(sent_pkt(i + 1, ts[i]));
      (void)r;
    }
    for (const auto& fl : tracker.active()) {
      sizes.push_back(fl.sent.size());
    }
    CHECK(sizes == oracle_partition(ts, timeout));
  }
}

TEST_CASE("reply outside the exclusion window is discarded") {
  // flowlet spans [100,150] ms, RTT 50 ms, margin 5 ms -> window [145,205]
  FlowletParams p = fixed_params(10'000);
  p.beta = 0.5;
  FlowletTracker tracker(p);
  tracker.ingest_sent(sent_pkt(1, 100'000));
  tracker.ingest_sent(sent_pkt(2, 150'000));  // separate flowlet, same window
  auto res = tracker.assign_reply(reply_pkt(3, 140'000), 50'000);
  CHECK(res.outcome == ReplyOutcome::kDiscarded);
  auto res2 = tracker.assign_reply(reply_pkt(4, 205'000), 50'000);
  CHECK(res2.outcome == ReplyOutcome::kAssigned);
  auto res3 = tracker.assign_reply(reply_pkt(5, 205'001), 50'000);
  CHECK(res3.outcome == ReplyOutcome::kDiscarded);
}

TEST_CASE("reply projects to the nearest flowlet span") {
  FlowletParams p = fixed_params(15'000);
  p.beta = 0.5;
  FlowletTracker tracker(p);
  // spans [100,110] and [130,140] ms
  tracker.ingest_sent(sent_pkt(1, 100'000));
  tracker.ingest_sent(sent_pkt(2, 110'000));
  tracker.ingest_sent(sent_pkt(3, 130'000));
  tracker.ingest_sent(sent_pkt(4, 140'000));
  REQUIRE(tracker.active().size() == 2);
  const std::uint64_t first_fid = tracker.active()[0].fid;
  const std::uint64_t second_fid = tracker.active()[1].fid;

  // projected 113ms: distance 3 to the first span, 17 to the second
  auto res = tracker.assign_reply(reply_pkt(5, 163'000), 50'000);
  CHECK(res.outcome == ReplyOutcome::kAssigned);
  CHECK(res.fid == first_fid);
  CHECK(res.closed.empty());

  // projected 133ms: inside the second span; the first one finishes
  auto res2 = tracker.assign_reply(reply_pkt(6, 183'000), 50'000);
  CHECK(res2.outcome == ReplyOutcome::kAssigned);
  CHECK(res2.fid == second_fid);
  REQUIRE(res2.closed.size() == 1);
  CHECK(res2.closed[0].fid == first_fid);
  CHECK(res2.closed[0].state == FlowletState::kFinished);
  CHECK(res2.closed[0].replies.size() == 1);
}

TEST_CASE("equidistant replies break toward the later flowlet") {
  FlowletParams p = fixed_params(20'000);
  FlowletTracker tracker(p);
  tracker.ingest_sent(sent_pkt(1, 100'000));
  tracker.ingest_sent(sent_pkt(2, 140'000));
  REQUIRE(tracker.active().size() == 2);
  // projected 120ms, 20ms from both spans
  auto res = tracker.assign_reply(reply_pkt(3, 170'000), 50'000);
  CHECK(res.outcome == ReplyOutcome::kAssigned);
  CHECK(res.fid == tracker.active().back().fid);
}

TEST_CASE("sweep closes idle flowlets and finishes past the reply window") {
  FlowletParams p = fixed_params(10'000);
  p.beta = 0.5;  // margin 5ms
  FlowletTracker tracker(p);
  tracker.ingest_sent(sent_pkt(1, 100'000));
  tracker.ingest_sent(sent_pkt(2, 104'000));

  CHECK(tracker.sweep(109'000, 50'000).empty());  // still open, not idle
  CHECK(tracker.active().back().state == FlowletState::kOpen);

  CHECK(tracker.sweep(114'000, 50'000).empty());  // idle -> awaiting
  CHECK(tracker.active().back().state == FlowletState::kAwaitingReplies);

  // reply window for the flowlet ends at 104 + 50 + 5 = 159ms
  CHECK(tracker.sweep(159'000, 50'000).empty());
  auto closed = tracker.sweep(159'001, 50'000);
  REQUIRE(closed.size() == 1);
  CHECK(closed[0].state == FlowletState::kFinished);
  CHECK(tracker.active().empty());
}

TEST_CASE("finished flowlets keep payload handles for the caller") {
  FlowletParams p = fixed_params(10'000);
  FlowletTracker tracker(p);
  tracker.ingest_sent(sent_pkt(1, 0, true));
  CHECK(tracker.buffered_bytes() == 1200);
  auto closed = tracker.sweep(1'000'000, 50'000);
  REQUIRE(closed.size() == 1);
  CHECK(closed[0].sent[0].payload != nullptr);
  CHECK(tracker.buffered_bytes() == 0);
}

TEST_CASE("active flowlets are capped by force-finishing the oldest") {
  FlowletParams p = fixed_params(100);
  p.max_active_flowlets = 4;
  FlowletTracker tracker(p);
  TimeUs t = 0;
  std::size_t closed_count = 0;
  for (int i = 0; i < 10; ++i) {
    auto r = tracker.ingest_sent(sent_pkt(i + 1, t));
    closed_count += r.closed.size();
    t += 1'000;  // every packet opens a new flowlet
  }
  CHECK(tracker.active().size() == 4);
  CHECK(closed_count == 6);
}

TEST_CASE("clear_matched drops only flowlets holding replies") {
  FlowletParams p = fixed_params(10'000);
  FlowletTracker tracker(p);
  tracker.ingest_sent(sent_pkt(1, 100'000));
  tracker.ingest_sent(sent_pkt(2, 120'000));
  REQUIRE(tracker.active().size() == 2);
  auto res = tracker.assign_reply(reply_pkt(3, 152'000), 50'000);
  REQUIRE(res.outcome == ReplyOutcome::kAssigned);
  CHECK(tracker.clear_matched() == 1);
  CHECK(tracker.active().size() == 1);
  CHECK(tracker.active().front().replies.empty());
}
