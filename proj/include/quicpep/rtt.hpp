#pragma once

#include <cstdint>
#include <deque>
#include <optional>

#include "quicpep/flowlet.hpp"
#include "quicpep/matching.hpp"
#include "quicpep/time.hpp"

namespace quicpep {

enum class ProbeSource : std::uint8_t {
  kProbe,
  kSpinBit,  // reserved, no decoder wired up
  kIdleGap,
};

struct ProbeSample {
  DurUs rtt = 0;
  TimeUs t = 0;
  ProbeSource source = ProbeSource::kProbe;
};

enum class CalibrationOutcome : std::uint8_t { kAccepted, kReset };

// Smoothed and minimum RTT between the middlebox and one endpoint.
class RttTracker {
 public:
  explicit RttTracker(RttSide side, DurUs min_window = 10 * kMicrosPerSec)
      : side_(side), min_window_(min_window) {}

  bool initialized() const { return srtt_ > 0.0; }
  double srtt_us() const { return srtt_; }
  DurUs srtt() const { return static_cast<DurUs>(srtt_ + 0.5); }
  RttSide side() const { return side_; }

  void set_delta_margin(DurUs margin) { delta_margin_ = margin; }
  DurUs delta_margin() const { return delta_margin_; }

  // Folds one raw sample into srtt (EWMA, gain 1/8) and the min window.
  void add_sample(DurUs rtt, TimeUs t);

  // RTT samples from the matched pairs of a finished flowlet. Returns the
  // number folded; non-positive gaps are dropped and counted.
  std::size_t add_flowlet_samples(const MatchResult& mr, const Flowlet& fl);

  // Probe/idle-gap calibration. Within the jitter margin the probe folds
  // like any sample; beyond it the estimate is untrustworthy and is reset
  // to the probe outright (the caller must clear matched flowlets).
  CalibrationOutcome calibrate(const ProbeSample& probe);

  std::optional<DurUs> rtt_min(TimeUs now) const;

  std::size_t dropped_samples() const { return dropped_samples_; }
  std::size_t resets() const { return resets_; }

 private:
  void evict(TimeUs now);

  RttSide side_;
  DurUs min_window_;
  double srtt_ = 0.0;  // microseconds, 0 = uninitialized
  DurUs delta_margin_ = 0;
  std::deque<std::pair<TimeUs, DurUs>> window_;
  std::size_t dropped_samples_ = 0;
  std::size_t resets_ = 0;
};

// Probes pace at one per end-to-end round trip. Falls back to the
// handshake-derived estimate while a side is still warming up.
TimeUs schedule_next_probe(const RttTracker& to_client,
                           const RttTracker& to_server, TimeUs now,
                           DurUs handshake_fallback);

}  // namespace quicpep
