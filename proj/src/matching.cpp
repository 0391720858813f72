#include "quicpep/matching.hpp"

#include <cstdlib>
#include <limits>

#include "quicpep/flowlet.hpp"

namespace quicpep {

namespace {

constexpr DurUs kInfCost = std::numeric_limits<DurUs>::max() / 4;

DurUs pair_cost(TimeUs sent_t, TimeUs reply_t, DurUs rtt_hat) {
  return std::llabs((reply_t - sent_t) - rtt_hat);
}

}  // namespace

DurUs estimate_rtt_hat(const std::vector<TimeUs>& sent_ts,
                       const std::vector<TimeUs>& reply_ts, DurUs srtt) {
  const DurUs w_sent = sent_ts.back() - sent_ts.front();
  const DurUs w_reply = reply_ts.back() - reply_ts.front();
  // w_reply > 0.8 * w_sent, kept in integers: 5*w_reply > 4*w_sent.
  if (5 * w_reply > 4 * w_sent) {
    const DurUs gap = reply_ts.back() - sent_ts.back();
    if (gap > 0) {
      return gap;
    }
  }
  return srtt;
}

DpMatch dp_match(const std::vector<TimeUs>& sent_ts,
                 const std::vector<TimeUs>& reply_ts, DurUs rtt_hat) {
  const std::size_t n = sent_ts.size();
  const std::size_t m = reply_ts.size();
  DpMatch out;

  // suffix[i][j]: minimal deviation matching replies j.. onto sent i..
  // while keeping both sequences in order.
  std::vector<DurUs> suffix((n + 1) * (m + 1), kInfCost);
  auto cell = [&](std::size_t i, std::size_t j) -> DurUs& {
    return suffix[i * (m + 1) + j];
  };
  for (std::size_t i = 0; i <= n; ++i) {
    cell(i, m) = 0;
  }
  for (std::size_t i = n; i-- > 0;) {
    for (std::size_t j = m; j-- > 0;) {
      if (m - j > n - i) {
        continue;  // fewer sent packets left than replies: infeasible
      }
      ++out.ops;
      DurUs best = cell(i + 1, j);
      const DurUs take = pair_cost(sent_ts[i], reply_ts[j], rtt_hat);
      if (cell(i + 1, j + 1) < kInfCost) {
        best = std::min(best, take + cell(i + 1, j + 1));
      }
      cell(i, j) = best;
    }
  }

  out.total_deviation = cell(0, 0);
  // Reconstruct from the front, matching whenever it preserves the
  // optimum; this yields the lexicographically smallest pair list.
  std::size_t i = 0;
  std::size_t j = 0;
  while (j < m) {
    const DurUs take = pair_cost(sent_ts[i], reply_ts[j], rtt_hat);
    if (cell(i + 1, j + 1) < kInfCost && take + cell(i + 1, j + 1) == cell(i, j)) {
      out.pairs.emplace_back(i, j);
      ++i;
      ++j;
    } else {
      ++i;
    }
  }
  return out;
}

MatchResult match_flowlet(const Flowlet& fl, DurUs srtt) {
  MatchResult result;
  const std::size_t n = fl.sent.size();
  const std::size_t m = fl.replies.size();

  if (m == 0) {
    result.kind = MatchKind::kNoReplies;
    result.rtt_hat = srtt;
    return result;
  }

  std::vector<TimeUs> sent_ts;
  sent_ts.reserve(n);
  for (const auto& p : fl.sent) {
    sent_ts.push_back(p.t);
  }
  std::vector<TimeUs> reply_ts;
  reply_ts.reserve(m);
  for (const auto& p : fl.replies) {
    reply_ts.push_back(p.t);
  }
  result.rtt_hat = estimate_rtt_hat(sent_ts, reply_ts, srtt);

  if (m > n) {
    result.kind = MatchKind::kAbandonedTooManyReplies;
    return result;
  }
  if (m == n) {
    result.kind = MatchKind::kExactOneToOne;
    for (std::size_t k = 0; k < n; ++k) {
      result.pairs.emplace_back(k, k);
      result.total_deviation += pair_cost(sent_ts[k], reply_ts[k], result.rtt_hat);
    }
    return result;
  }

  result.kind = MatchKind::kPartial;
  DpMatch dp = dp_match(sent_ts, reply_ts, result.rtt_hat);
  result.pairs = std::move(dp.pairs);
  result.total_deviation = dp.total_deviation;
  return result;
}

}  // namespace quicpep
