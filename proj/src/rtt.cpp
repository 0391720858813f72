#include "quicpep/rtt.hpp"

#include <algorithm>
#include <cmath>

namespace quicpep {

namespace {
constexpr double kSrttGain = 1.0 / 8.0;
}

void RttTracker::evict(TimeUs now) {
  while (!window_.empty() && now - window_.front().first > min_window_) {
    window_.pop_front();
  }
}

void RttTracker::add_sample(DurUs rtt, TimeUs t) {
  if (rtt <= 0) {
    ++dropped_samples_;
    return;
  }
  if (srtt_ <= 0.0) {
    srtt_ = static_cast<double>(rtt);
  } else {
    srtt_ = (1.0 - kSrttGain) * srtt_ + kSrttGain * static_cast<double>(rtt);
  }
  evict(t);
  window_.emplace_back(t, rtt);
}

std::size_t RttTracker::add_flowlet_samples(const MatchResult& mr,
                                            const Flowlet& fl) {
  if (mr.kind != MatchKind::kExactOneToOne && mr.kind != MatchKind::kPartial) {
    return 0;
  }
  std::size_t folded = 0;
  for (const auto& [sent_idx, reply_idx] : mr.pairs) {
    const DurUs sample = fl.replies[reply_idx].t - fl.sent[sent_idx].t;
    if (sample <= 0) {
      ++dropped_samples_;
      continue;
    }
    add_sample(sample, fl.replies[reply_idx].t);
    ++folded;
  }
  return folded;
}

CalibrationOutcome RttTracker::calibrate(const ProbeSample& probe) {
  if (!initialized()) {
    add_sample(probe.rtt, probe.t);
    return CalibrationOutcome::kAccepted;
  }
  const double deviation = std::abs(static_cast<double>(probe.rtt) - srtt_);
  if (deviation <= static_cast<double>(delta_margin_)) {
    add_sample(probe.rtt, probe.t);
    return CalibrationOutcome::kAccepted;
  }
  srtt_ = static_cast<double>(probe.rtt);
  window_.clear();
  window_.emplace_back(probe.t, probe.rtt);
  ++resets_;
  return CalibrationOutcome::kReset;
}

std::optional<DurUs> RttTracker::rtt_min(TimeUs now) const {
  DurUs best = 0;
  bool found = false;
  for (const auto& [t, rtt] : window_) {
    if (now - t > min_window_) {
      continue;
    }
    if (!found || rtt < best) {
      best = rtt;
      found = true;
    }
  }
  if (!found) {
    return std::nullopt;
  }
  return best;
}

TimeUs schedule_next_probe(const RttTracker& to_client,
                           const RttTracker& to_server, TimeUs now,
                           DurUs handshake_fallback) {
  if (to_client.initialized() && to_server.initialized()) {
    return now + to_client.srtt() + to_server.srtt();
  }
  return now + handshake_fallback;
}

}  // namespace quicpep
