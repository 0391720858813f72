#pragma once

#include <cstdint>
#include <optional>

#include "quicpep/time.hpp"

namespace quicpep {

enum class CopaDirection : std::uint8_t { kUp, kDown };

enum class EnforcementStage : std::uint8_t { kOff, kStopRetx, kShapeReplies };

// Delay-based congestion window for one protected connection, adjusted at
// RTT-update granularity rather than per ACK: each update moves the window
// by min(dt, srtt)/srtt * nu/delta, which keeps the per-RTT drift at
// ~nu/delta packets no matter how often updates arrive.
class CopaController {
 public:
  explicit CopaController(double delta = 0.5, double initial_cwnd = 10.0)
      : delta_(delta), cwnd_(initial_cwnd) {}

  double on_rtt_update(DurUs srtt, DurUs rtt_min, TimeUs now);

  // rate_target = cwnd / rtt_min, in packets per second.
  double recompute_target_rate(DurUs rtt_min);

  double cwnd() const { return cwnd_; }
  double velocity() const { return nu_; }
  double delta() const { return delta_; }
  CopaDirection direction() const { return direction_; }
  double rate_target_pps() const { return rate_target_pps_; }

  static constexpr double kMinCwnd = 2.0;

 private:
  double delta_;
  double cwnd_;
  double nu_ = 1.0;
  CopaDirection direction_ = CopaDirection::kUp;
  bool has_update_ = false;
  TimeUs last_update_t_ = 0;
  // Velocity bookkeeping runs on srtt-length epochs: three consistent
  // epochs arm doubling, a direction flip resets it.
  TimeUs epoch_start_t_ = 0;
  int consistent_epochs_ = 0;
  double rate_target_pps_ = 0.0;
};

// Packets-per-window counter for the feedback loop; window length tracks
// the current smoothed RTT.
class RateMeter {
 public:
  struct Sample {
    double rate_pps = 0.0;
    std::uint64_t forwarded = 0;
    std::uint64_t retransmitted = 0;
    DurUs window = 0;
  };

  void on_forward() { ++forwarded_; }
  void on_retransmit() { ++retransmitted_; }

  // Rolls the window when it has run its course and returns the closed
  // window's measurement.
  std::optional<Sample> maybe_roll(TimeUs now, DurUs srtt);

  std::uint64_t forwarded_in_window() const { return forwarded_; }
  std::uint64_t retransmitted_in_window() const { return retransmitted_; }

 private:
  bool started_ = false;
  TimeUs window_start_ = 0;
  DurUs window_len_ = 0;
  std::uint64_t forwarded_ = 0;
  std::uint64_t retransmitted_ = 0;
};

struct ShapeParams {
  int packet_threshold = 3;
  double time_threshold = 9.0 / 8.0;
  int multiplier = 1;
};

// Escalating response when the connection runs above its target rate:
// first stop our own retransmissions, then start delaying and reordering
// replies; if the sender keeps the pace for a full end-to-end RTT the
// shaping thresholds double.
class EnforcementController {
 public:
  EnforcementStage step(const RateMeter::Sample& sample, double rate_target_pps,
                        TimeUs now, DurUs e2e_rtt);

  EnforcementStage stage() const { return stage_; }
  const ShapeParams& shape_params() const { return shape_; }

  static constexpr int kMaxMultiplier = 16;

 private:
  EnforcementStage stage_ = EnforcementStage::kOff;
  ShapeParams shape_;
  TimeUs last_escalation_t_ = 0;
  double reference_rate_pps_ = 0.0;
};

// Hold-one-of-a-group reply scheduler. The first reply of each group of
// packet_threshold+1 is parked until packet_threshold later replies have
// been forwarded and at least (time_threshold - 1) * srtt has passed;
// a hard deadline of 2 * time_threshold * srtt releases it regardless.
// Decisions only; the caller owns the datagram being held.
class ReplyShaper {
 public:
  enum class Action : std::uint8_t { kForward, kHold };

  Action on_reply(TimeUs now, const ShapeParams& p, DurUs srtt);

  // True when the held reply is due for release at `now`.
  bool release_due(TimeUs now) const;
  void on_released();

  bool holding() const { return holding_; }
  std::optional<TimeUs> next_deadline() const;

 private:
  bool holding_ = false;
  bool group_filled_ = false;
  int group_count_ = 0;
  int group_target_ = 0;
  TimeUs earliest_release_t_ = 0;
  TimeUs deadline_t_ = 0;
  TimeUs filled_t_ = 0;
};

}  // namespace quicpep
