#include "quicpep/loss.hpp"

#include <algorithm>
#include <cstdlib>

namespace quicpep {

std::vector<bool> two_pointer_scan(const std::vector<bool>& replied_flags,
                                   int threshold) {
  std::vector<bool> out = replied_flags;
  const std::size_t n = out.size();
  std::size_t left = 0;
  while (left < n) {
    if (out[left]) {
      ++left;
      continue;
    }
    std::size_t right = left;
    while (right < n && !out[right]) {
      ++right;
    }
    const bool followed_by_reply = right < n;
    if (followed_by_reply &&
        right - left < static_cast<std::size_t>(threshold)) {
      for (std::size_t i = left; i < right; ++i) {
        out[i] = true;
      }
    }
    left = right;
  }
  return out;
}

std::vector<std::size_t> close_interval_suppress(
    const Flowlet& fl, const std::vector<std::size_t>& candidate_lost,
    DurUs close_interval) {
  const std::size_t n = fl.sent.size();
  std::vector<bool> is_candidate(n, false);
  for (std::size_t idx : candidate_lost) {
    if (idx < n) {
      is_candidate[idx] = true;
    }
  }

  // Replied state is taken at entry; suppression of one candidate does not
  // promote it to a replied neighbour for the others.
  std::vector<std::size_t> surviving;
  for (std::size_t idx : candidate_lost) {
    if (idx >= n) {
      continue;
    }
    const TimeUs t = fl.sent[idx].t;
    bool near_replied = false;
    if (idx > 0 && !is_candidate[idx - 1] &&
        t - fl.sent[idx - 1].t < close_interval) {
      near_replied = true;
    }
    if (idx + 1 < n && !is_candidate[idx + 1] &&
        fl.sent[idx + 1].t - t < close_interval) {
      near_replied = true;
    }
    if (!near_replied) {
      surviving.push_back(idx);
    }
  }
  return surviving;
}

LossReport detect(const Flowlet& fl, const MatchResult& mr, const LossParams& p) {
  LossReport report;
  report.fid = fl.fid;
  const std::size_t n = fl.sent.size();

  switch (mr.kind) {
    case MatchKind::kExactOneToOne:
    case MatchKind::kAbandonedTooManyReplies:
      return report;
    case MatchKind::kNoReplies:
      // A flowlet too small to reach the eliciting threshold may simply
      // not have been acknowledged yet; anything bigger with zero replies
      // is taken as fully lost.
      if (n < static_cast<std::size_t>(p.eliciting_threshold)) {
        report.suppressed_by_threshold = n;
        return report;
      }
      for (const auto& pkt : fl.sent) {
        if (!pkt.is_retransmit) {
          report.lost.push_back(pkt.id);
        }
      }
      return report;
    case MatchKind::kPartial:
      break;
  }

  std::vector<bool> replied(n, false);
  for (const auto& [sent_idx, reply_idx] : mr.pairs) {
    (void)reply_idx;
    replied[sent_idx] = true;
  }

  std::vector<bool> scanned = two_pointer_scan(replied, p.eliciting_threshold);
  for (std::size_t i = 0; i < n; ++i) {
    if (scanned[i] && !replied[i]) {
      ++report.suppressed_by_threshold;
    }
  }

  // Up to T-1 packets of an unreplied run can be sitting below the
  // receiver's eliciting threshold rather than lost, and those always
  // precede the lost ones: once something is missing, the next arrival
  // elicits immediately and would have been matched. So hold back the
  // run's first T-1 packets and keep the tail as loss candidates.
  const std::size_t hold = static_cast<std::size_t>(p.eliciting_threshold - 1);
  std::vector<std::size_t> candidates;
  std::size_t left = 0;
  while (left < n) {
    if (scanned[left]) {
      ++left;
      continue;
    }
    std::size_t right = left;
    while (right < n && !scanned[right]) {
      ++right;
    }
    const std::size_t len = right - left;
    const std::size_t withheld = std::min(len, hold);
    for (std::size_t i = left + withheld; i < right; ++i) {
      candidates.push_back(i);
    }
    report.suppressed_by_threshold += withheld;
    left = right;
  }

  std::vector<std::size_t> surviving =
      close_interval_suppress(fl, candidates, p.close_interval);
  report.suppressed_by_close_interval = candidates.size() - surviving.size();

  for (std::size_t idx : surviving) {
    if (!fl.sent[idx].is_retransmit) {
      report.lost.push_back(fl.sent[idx].id);
    }
  }
  return report;
}

}  // namespace quicpep
