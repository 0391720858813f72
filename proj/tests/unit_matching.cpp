#include <algorithm>
#include <cstdlib>
#include <limits>
#include <random>
#include <vector>

#include "doctest.h"
#include "quicpep/flowlet.hpp"
#include "quicpep/matching.hpp"

using namespace quicpep;

namespace {

// Exhaustive search over all order-preserving assignments of m replies to
// m of n sent packets; the reference the DP must agree with.
DurUs brute_force_best(const std::vector<TimeUs>& sent,
                       const std::vector<TimeUs>& replies, DurUs rtt_hat,
                       std::size_t si = 0, std::size_t ri = 0) {
  if (ri == replies.size()) {
    return 0;
  }
  if (sent.size() - si < replies.size() - ri) {
    return std::numeric_limits<DurUs>::max() / 4;
  }
  const DurUs skip = brute_force_best(sent, replies, rtt_hat, si + 1, ri);
  const DurUs take =
      std::llabs((replies[ri] - sent[si]) - rtt_hat) +
      brute_force_best(sent, replies, rtt_hat, si + 1, ri + 1);
  return std::min(skip, take);
}

Flowlet make_flowlet(const std::vector<TimeUs>& sent_ts,
                     const std::vector<TimeUs>& reply_ts) {
  Flowlet fl;
  fl.fid = 1;
  fl.state = FlowletState::kFinished;
  std::uint64_t id = 1;
  for (TimeUs t : sent_ts) {
    PacketRecord p;
    p.id = id++;
    p.t = t;
    p.size = 1200;
    p.dir = Direction::kServerToClient;
    fl.sent.push_back(p);
  }
  for (TimeUs t : reply_ts) {
    PacketRecord p;
    p.id = id++;
    p.t = t;
    p.size = 40;
    p.dir = Direction::kClientToServer;
    fl.replies.push_back(p);
  }
  return fl;
}

}  // namespace

TEST_CASE("rtt_hat uses the tail gap when reply width tracks sent width") {
  // widths 10ms vs 9ms, last reply trails last sent by 52ms
  std::vector<TimeUs> sent{0, 4'000, 10'000};
  std::vector<TimeUs> replies{53'000, 57'000, 62'000};
  CHECK(estimate_rtt_hat(sent, replies, 50'000) == 52'000);
}

TEST_CASE("rtt_hat falls back to srtt on narrow reply bursts") {
  std::vector<TimeUs> sent{0, 10'000};
  std::vector<TimeUs> replies{50'000, 55'000};  // width 5ms vs 10ms
  CHECK(estimate_rtt_hat(sent, replies, 50'000) == 50'000);
}

TEST_CASE("rtt_hat single pair degenerates to srtt") {
  std::vector<TimeUs> sent{10'000};
  std::vector<TimeUs> replies{60'000};
  CHECK(estimate_rtt_hat(sent, replies, 50'000) == 50'000);
}

TEST_CASE("rtt_hat rejects a negative tail gap") {
  std::vector<TimeUs> sent{0, 50'000};
  std::vector<TimeUs> replies{5'000, 49'000};  // wide but before last sent
  CHECK(estimate_rtt_hat(sent, replies, 48'000) == 48'000);
}

TEST_CASE("dp_match picks the minimal-deviation pairing") {
  // sent 0/1/2 ms, replies 10.0/12.1 ms, rtt_hat 10 ms
  std::vector<TimeUs> sent{0, 1'000, 2'000};
  std::vector<TimeUs> replies{10'000, 12'100};
  DpMatch dp = dp_match(sent, replies, 10'000);
  CHECK(dp.total_deviation == 100);
  REQUIRE(dp.pairs.size() == 2);
  CHECK(dp.pairs[0] == std::pair<std::size_t, std::size_t>{0, 0});
  CHECK(dp.pairs[1] == std::pair<std::size_t, std::size_t>{2, 1});
}

TEST_CASE("dp_match n=2 m=1") {
  std::vector<TimeUs> sent{0, 5'000};
  std::vector<TimeUs> replies{15'200};
  DpMatch dp = dp_match(sent, replies, 10'000);
  CHECK(dp.total_deviation == 200);
  REQUIRE(dp.pairs.size() == 1);
  CHECK(dp.pairs[0] == std::pair<std::size_t, std::size_t>{1, 0});
}

TEST_CASE("dp_match agrees with exhaustive enumeration") {
  std::mt19937_64 rng(7);
  for (int iter = 0; iter < 400; ++iter) {
    std::uniform_int_distribution<std::size_t> n_dist(2, 8);
    const std::size_t n = n_dist(rng);
    std::uniform_int_distribution<std::size_t> m_dist(1, n - 1);
    const std::size_t m = m_dist(rng);
    std::uniform_int_distribution<TimeUs> t_dist(0, 30'000);
    std::vector<TimeUs> sent(n);
    std::vector<TimeUs> replies(m);
    for (auto& t : sent) {
      t = t_dist(rng);
    }
    for (auto& t : replies) {
      t = 40'000 + t_dist(rng);
    }
    std::sort(sent.begin(), sent.end());
    std::sort(replies.begin(), replies.end());
    const DurUs rtt_hat = 35'000 + t_dist(rng) / 2;

    DpMatch dp = dp_match(sent, replies, rtt_hat);
    CHECK(dp.total_deviation == brute_force_best(sent, replies, rtt_hat));
    CHECK(dp.pairs.size() == m);
    CHECK(dp.ops <= static_cast<std::uint64_t>(n) * m + n + m);
  }
}

TEST_CASE("dp_match pairs strictly increase in both coordinates") {
  std::mt19937_64 rng(11);
  for (int iter = 0; iter < 200; ++iter) {
    std::uniform_int_distribution<std::size_t> n_dist(2, 20);
    const std::size_t n = n_dist(rng);
    std::uniform_int_distribution<std::size_t> m_dist(1, n - 1);
    const std::size_t m = m_dist(rng);
    std::uniform_int_distribution<TimeUs> t_dist(0, 100'000);
    std::vector<TimeUs> sent(n);
    std::vector<TimeUs> replies(m);
    for (auto& t : sent) {
      t = t_dist(rng);
    }
    for (auto& t : replies) {
      t = 100'000 + t_dist(rng);
    }
    std::sort(sent.begin(), sent.end());
    std::sort(replies.begin(), replies.end());

    DpMatch dp = dp_match(sent, replies, 100'000);
    for (std::size_t k = 1; k < dp.pairs.size(); ++k) {
      CHECK(dp.pairs[k].first > dp.pairs[k - 1].first);
      CHECK(dp.pairs[k].second > dp.pairs[k - 1].second);
    }
  }
}

TEST_CASE("dp_match is translation invariant") {
  std::mt19937_64 rng(13);
  std::uniform_int_distribution<TimeUs> t_dist(0, 50'000);
  for (int iter = 0; iter < 100; ++iter) {
    std::vector<TimeUs> sent{t_dist(rng), t_dist(rng), t_dist(rng),
                             t_dist(rng)};
    std::vector<TimeUs> replies{60'000 + t_dist(rng), 60'000 + t_dist(rng)};
    std::sort(sent.begin(), sent.end());
    std::sort(replies.begin(), replies.end());

    DpMatch base = dp_match(sent, replies, 55'000);
    const TimeUs shift = 123'456;
    for (auto& t : sent) {
      t += shift;
    }
    for (auto& t : replies) {
      t += shift;
    }
    DpMatch shifted = dp_match(sent, replies, 55'000);
    CHECK(base.pairs == shifted.pairs);
    CHECK(base.total_deviation == shifted.total_deviation);
  }
}

TEST_CASE("equal-cost ties pick the earliest sent indices") {
  // both sent packets are equidistant from the reply's projection
  std::vector<TimeUs> sent{0, 2'000};
  std::vector<TimeUs> replies{11'000};
  DpMatch dp = dp_match(sent, replies, 10'000);
  REQUIRE(dp.pairs.size() == 1);
  CHECK(dp.pairs[0].first == 0);
}

TEST_CASE("match_flowlet dispatches on reply count") {
  SUBCASE("equal counts pair in timestamp order") {
    Flowlet fl = make_flowlet({0, 1'000, 2'000}, {50'000, 51'000, 52'000});
    MatchResult mr = match_flowlet(fl, 50'000);
    CHECK(mr.kind == MatchKind::kExactOneToOne);
    REQUIRE(mr.pairs.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(mr.pairs[i].first == i);
      CHECK(mr.pairs[i].second == i);
    }
  }
  SUBCASE("more replies than sent abandons the matching") {
    Flowlet fl = make_flowlet({0, 1'000}, {50'000, 51'000, 52'000});
    MatchResult mr = match_flowlet(fl, 50'000);
    CHECK(mr.kind == MatchKind::kAbandonedTooManyReplies);
    CHECK(mr.pairs.empty());
  }
  SUBCASE("no replies") {
    Flowlet fl = make_flowlet({0, 1'000, 2'000}, {});
    MatchResult mr = match_flowlet(fl, 50'000);
    CHECK(mr.kind == MatchKind::kNoReplies);
    CHECK(mr.pairs.empty());
  }
  SUBCASE("fewer replies runs the DP") {
    Flowlet fl = make_flowlet({0, 1'000, 2'000}, {50'000, 52'000});
    MatchResult mr = match_flowlet(fl, 50'000);
    CHECK(mr.kind == MatchKind::kPartial);
    CHECK(mr.pairs.size() == 2);
  }
}

TEST_CASE("appending an ideal reply never worsens mean deviation") {
  // Replies generated the way ACK streams really look: each echoes some
  // earlier sent packet rtt_hat (plus jitter) later. Appending a perfect
  // echo of the last sent packet can only help the mean.
  std::mt19937_64 rng(17);
  const DurUs rtt_hat = 30'000;
  for (int iter = 0; iter < 200; ++iter) {
    const std::size_t n = 4 + rng() % 5;
    std::vector<TimeUs> sent(n);
    TimeUs t = 0;
    for (auto& x : sent) {
      t += 1'000 + static_cast<TimeUs>(rng() % 3'000);
      x = t;
    }
    std::vector<TimeUs> replies;
    for (std::size_t i = 0; i + 1 < n && replies.size() + 2 < n; ++i) {
      if (rng() % 2 == 0) {
        replies.push_back(sent[i] + rtt_hat +
                          static_cast<DurUs>(rng() % 300));
      }
    }
    if (replies.empty()) {
      continue;
    }

    DpMatch before = dp_match(sent, replies, rtt_hat);
    const double mean_before =
        static_cast<double>(before.total_deviation) /
        static_cast<double>(before.pairs.size());

    std::vector<TimeUs> more = replies;
    more.push_back(sent.back() + rtt_hat);
    DpMatch after = dp_match(sent, more, rtt_hat);
    const double mean_after = static_cast<double>(after.total_deviation) /
                              static_cast<double>(after.pairs.size());
    CHECK(mean_after <= mean_before + 1e-9);
  }
}
