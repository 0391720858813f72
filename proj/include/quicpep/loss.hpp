#pragma once

#include <cstdint>
#include <vector>

#include "quicpep/flowlet.hpp"
#include "quicpep/matching.hpp"
#include "quicpep/time.hpp"

namespace quicpep {

struct LossParams {
  int eliciting_threshold = 2;
  DurUs close_interval = 100;  // microseconds
};

struct LossReport {
  std::uint64_t fid = 0;
  std::vector<std::uint64_t> lost;  // sent packet ids
  std::size_t suppressed_by_threshold = 0;
  std::size_t suppressed_by_close_interval = 0;
};

// Rewrites short unreplied runs that are followed by a reply: with an
// eliciting threshold of T the receiver may hold up to T-1 packets before
// acknowledging, so such runs are ACK aggregation, not loss. Runs of
// length >= T and the trailing run (nothing after it to aggregate into)
// are kept.
std::vector<bool> two_pointer_scan(const std::vector<bool>& replied_flags,
                                   int threshold);

// Drops candidates whose send time is within close_interval of an adjacent
// sent packet currently considered replied; those could have been covered
// by the neighbour's reply. Candidates are indexes into fl.sent.
std::vector<std::size_t> close_interval_suppress(
    const Flowlet& fl, const std::vector<std::size_t>& candidate_lost,
    DurUs close_interval);

LossReport detect(const Flowlet& fl, const MatchResult& mr, const LossParams& p);

}  // namespace quicpep
