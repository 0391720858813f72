#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "quicpep/time.hpp"

namespace quicpep {

struct Flowlet;

enum class MatchKind : std::uint8_t {
  kNoReplies,
  kExactOneToOne,
  kAbandonedTooManyReplies,
  kPartial,
};

// Outcome of matching a finished flowlet's sent packets against its replies.
// Pairs are (sent index, reply index), strictly increasing in both
// coordinates; for kPartial every reply is paired.
struct MatchResult {
  MatchKind kind = MatchKind::kNoReplies;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  DurUs rtt_hat = 0;
  DurUs total_deviation = 0;
};

struct DpMatch {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  DurUs total_deviation = 0;
  std::uint64_t ops = 0;  // cell evaluations, for the O(mn) cost bound
};

// Per-flowlet RTT estimate: when the reply burst is about as wide as the
// sent burst the two tails line up, so use their gap; otherwise fall back
// to the smoothed RTT.
DurUs estimate_rtt_hat(const std::vector<TimeUs>& sent_ts,
                       const std::vector<TimeUs>& reply_ts, DurUs srtt);

// Order-preserving assignment of m replies to m of n sent packets
// (0 < m < n, both lists sorted) minimizing
//   sum |(t_reply - t_sent) - rtt_hat|.
// Equal-cost solutions resolve to the lexicographically smallest pair
// list (earliest sent indices matched).
DpMatch dp_match(const std::vector<TimeUs>& sent_ts,
                 const std::vector<TimeUs>& reply_ts, DurUs rtt_hat);

MatchResult match_flowlet(const Flowlet& fl, DurUs srtt);

}  // namespace quicpep
