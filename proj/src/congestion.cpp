#include "quicpep/congestion.hpp"

#include <algorithm>
#include <cmath>

namespace quicpep {

double CopaController::on_rtt_update(DurUs srtt, DurUs rtt_min, TimeUs now) {
  if (srtt <= 0 || rtt_min <= 0) {
    return cwnd_;
  }
  const DurUs queueing = std::max<DurUs>(0, srtt - rtt_min);

  CopaDirection dir = CopaDirection::kUp;
  if (queueing > 0) {
    // Rates in packets per microsecond.
    const double copa_target = 1.0 / (delta_ * static_cast<double>(queueing));
    const double current = cwnd_ / static_cast<double>(srtt);
    dir = current <= copa_target ? CopaDirection::kUp : CopaDirection::kDown;
  }

  if (!has_update_) {
    has_update_ = true;
    last_update_t_ = now;
    epoch_start_t_ = now;
    direction_ = dir;
    return cwnd_;
  }

  if (dir != direction_) {
    direction_ = dir;
    nu_ = 1.0;
    consistent_epochs_ = 0;
    epoch_start_t_ = now;
  } else if (now - epoch_start_t_ >= srtt) {
    ++consistent_epochs_;
    if (consistent_epochs_ >= 3) {
      nu_ *= 2.0;
    }
    epoch_start_t_ = now;
  }

  const DurUs dt = now - last_update_t_;
  last_update_t_ = now;
  const double scale =
      static_cast<double>(std::min(dt, srtt)) / static_cast<double>(srtt);
  const double step = scale * nu_ / delta_;
  cwnd_ += direction_ == CopaDirection::kUp ? step : -step;
  cwnd_ = std::max(cwnd_, kMinCwnd);
  return cwnd_;
}

double CopaController::recompute_target_rate(DurUs rtt_min) {
  rate_target_pps_ =
      cwnd_ * static_cast<double>(kMicrosPerSec) / static_cast<double>(rtt_min);
  return rate_target_pps_;
}

std::optional<RateMeter::Sample> RateMeter::maybe_roll(TimeUs now, DurUs srtt) {
  if (!started_) {
    started_ = true;
    window_start_ = now;
    window_len_ = std::max<DurUs>(srtt, 1);
    return std::nullopt;
  }
  if (now - window_start_ < window_len_) {
    return std::nullopt;
  }
  Sample sample;
  sample.window = now - window_start_;
  sample.forwarded = forwarded_;
  sample.retransmitted = retransmitted_;
  sample.rate_pps = static_cast<double>(forwarded_ + retransmitted_) *
                    static_cast<double>(kMicrosPerSec) /
                    static_cast<double>(sample.window);
  forwarded_ = 0;
  retransmitted_ = 0;
  window_start_ = now;
  window_len_ = std::max<DurUs>(srtt, 1);
  return sample;
}

EnforcementStage EnforcementController::step(const RateMeter::Sample& sample,
                                             double rate_target_pps, TimeUs now,
                                             DurUs e2e_rtt) {
  if (sample.rate_pps <= rate_target_pps) {
    stage_ = EnforcementStage::kOff;
    shape_ = ShapeParams{};
    return stage_;
  }

  switch (stage_) {
    case EnforcementStage::kOff:
      stage_ = EnforcementStage::kStopRetx;
      break;
    case EnforcementStage::kStopRetx:
      // One full window with retransmissions already off and still above
      // target: move on to shaping.
      if (sample.retransmitted == 0) {
        stage_ = EnforcementStage::kShapeReplies;
        last_escalation_t_ = now;
        reference_rate_pps_ = sample.rate_pps;
      }
      break;
    case EnforcementStage::kShapeReplies:
      if (now - last_escalation_t_ >= e2e_rtt) {
        const bool slowed = sample.rate_pps <= 0.9 * reference_rate_pps_;
        if (!slowed && shape_.multiplier < kMaxMultiplier) {
          shape_.multiplier *= 2;
          shape_.packet_threshold *= 2;
          shape_.time_threshold *= 2.0;
        }
        last_escalation_t_ = now;
        reference_rate_pps_ = sample.rate_pps;
      }
      break;
  }
  return stage_;
}

ReplyShaper::Action ReplyShaper::on_reply(TimeUs now, const ShapeParams& p,
                                          DurUs srtt) {
  if (!holding_) {
    holding_ = true;
    group_filled_ = false;
    group_count_ = 0;
    group_target_ = p.packet_threshold;
    const double extra = (p.time_threshold - 1.0) * static_cast<double>(srtt);
    earliest_release_t_ = now + static_cast<DurUs>(std::llround(extra));
    deadline_t_ =
        now + static_cast<DurUs>(std::llround(2.0 * p.time_threshold *
                                              static_cast<double>(srtt)));
    return Action::kHold;
  }
  ++group_count_;
  if (!group_filled_ && group_count_ >= group_target_) {
    group_filled_ = true;
    filled_t_ = now;
  }
  return Action::kForward;
}

bool ReplyShaper::release_due(TimeUs now) const {
  if (!holding_) {
    return false;
  }
  if (now >= deadline_t_) {
    return true;
  }
  return group_filled_ && now >= earliest_release_t_ &&
         now >= filled_t_;
}

void ReplyShaper::on_released() {
  holding_ = false;
  group_filled_ = false;
  group_count_ = 0;
}

std::optional<TimeUs> ReplyShaper::next_deadline() const {
  if (!holding_) {
    return std::nullopt;
  }
  if (group_filled_) {
    return std::min(deadline_t_, std::max(earliest_release_t_, filled_t_));
  }
  return deadline_t_;
}

}  // namespace quicpep
