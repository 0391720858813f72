#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <vector>

#include "quicpep/congestion.hpp"
#include "quicpep/flowlet.hpp"
#include "quicpep/observer.hpp"
#include "quicpep/rtt.hpp"
#include "quicpep/time.hpp"

namespace quicpep {

// Normalized per-direction byte volume, V = sum(B_i - B_min). The
// subtraction discounts header overhead so mostly-ACK directions score
// near zero; b_min is the connection-lifetime minimum.
struct VolumeCounter {
  std::int64_t v_client = 0;
  std::int64_t v_server = 0;
  std::uint32_t b_min = std::numeric_limits<std::uint32_t>::max();
  TimeUs epoch_start = 0;
  DurUs epoch_len = 100 * kMicrosPerMilli;
};

void accumulate_volume(VolumeCounter& vc, std::uint32_t size, Direction dir);

// 2x hysteresis rule; anything in between keeps the previous choice.
// Resets the per-epoch sums, keeps b_min.
Direction decide_dominant(VolumeCounter& vc, Direction prev);

// Caps our own retransmissions at cap_ratio of forwarded packets over
// tumbling windows, so a burst of wrong inferences cannot amplify traffic.
class RetxBudget {
 public:
  struct Window {
    std::uint64_t forwarded = 0;
    std::uint64_t retransmitted = 0;
  };

  RetxBudget(double cap_ratio, DurUs window_len)
      : cap_ratio_(cap_ratio), window_len_(window_len) {}

  void roll_if_due(TimeUs now);
  void on_forward(TimeUs now);
  bool allows() const {
    return static_cast<double>(current_.retransmitted) <
           cap_ratio_ * static_cast<double>(current_.forwarded);
  }
  void on_retransmit() { ++current_.retransmitted; }

  const Window& current() const { return current_; }
  const std::vector<Window>& history() const { return history_; }

 private:
  double cap_ratio_;
  DurUs window_len_;
  bool started_ = false;
  TimeUs window_start_ = 0;
  Window current_;
  std::vector<Window> history_;
};

struct HeldReply {
  Bytes bytes;
  Endpoint src;
  Endpoint dst;
};

struct ConnectionState {
  ConnectionState(FourTuple k, Endpoint client_ep, Endpoint server_ep,
                  FlowletParams fparams, double copa_delta, double retx_cap,
                  DurUs retx_window, DurUs rtt_min_window,
                  std::size_t eliciting_window)
      : key(k),
        client(client_ep),
        server(server_ep),
        eliciting(eliciting_window),
        rtt_to_client(RttSide::kToClient, rtt_min_window),
        rtt_to_server(RttSide::kToServer, rtt_min_window),
        flowlets(fparams),
        copa(copa_delta),
        budget(retx_cap, retx_window) {}

  FourTuple key;
  Endpoint client;
  Endpoint server;

  HandshakeTracker handshake;
  Direction dominant = Direction::kUnknown;
  ElicitingEstimator eliciting;
  TimeUs last_activity = 0;

  RttTracker rtt_to_client;
  RttTracker rtt_to_server;
  FlowletTracker flowlets;

  CopaController copa;
  RateMeter meter;
  EnforcementController enforcement;
  ReplyShaper shaper;
  std::optional<HeldReply> held_reply;

  VolumeCounter volume;
  RetxBudget budget;

  std::uint64_t next_packet_id = 1;

  // Probe scheduling.
  TimeUs next_probe_t = 0;
  bool probe_outstanding = false;
  std::uint64_t probe_token = 0;
  TimeUs probe_sent_t = 0;
  TimeUs probe_deadline_t = 0;

  // Send/first-reply pairs after long idles give calibration samples.
  TimeUs last_dominant_t = 0;
  std::optional<TimeUs> idle_gap_sent_t;

  std::uint64_t retransmitted_total = 0;
  std::uint64_t forwarded_dominant_total = 0;

  Direction direction_of(const Endpoint& src) const {
    return src == client ? Direction::kClientToServer
                         : Direction::kServerToClient;
  }
  const Endpoint& receiver_of(Direction dominant_dir) const {
    return dominant_dir == Direction::kServerToClient ? client : server;
  }
  const Endpoint& sender_of(Direction dominant_dir) const {
    return dominant_dir == Direction::kServerToClient ? server : client;
  }
  RttTracker& rtt_for(RttSide side) {
    return side == RttSide::kToClient ? rtt_to_client : rtt_to_server;
  }
  RttTracker& receiver_rtt() {
    return dominant == Direction::kServerToClient ? rtt_to_client
                                                  : rtt_to_server;
  }
  const RttTracker& receiver_rtt() const {
    return dominant == Direction::kServerToClient ? rtt_to_client
                                                  : rtt_to_server;
  }
  DurUs e2e_srtt(DurUs fallback) const {
    if (rtt_to_client.initialized() && rtt_to_server.initialized()) {
      return rtt_to_client.srtt() + rtt_to_server.srtt();
    }
    const DurUs hs = handshake.handshake_rtt_sum();
    return hs > 0 ? hs : fallback;
  }
  std::optional<DurUs> e2e_rtt_min(TimeUs now) const {
    auto c = rtt_to_client.rtt_min(now);
    auto s = rtt_to_server.rtt_min(now);
    if (!c || !s) {
      return std::nullopt;
    }
    return *c + *s;
  }
};

class ConnectionTable {
 public:
  ConnectionState* find(const FourTuple& key);
  ConnectionState& emplace(std::unique_ptr<ConnectionState> conn);

  // Drops connections idle for longer than the timeout; returns their keys.
  std::vector<FourTuple> touch_and_reap(TimeUs now, DurUs idle_timeout);

  std::size_t size() const { return map_.size(); }
  auto begin() { return map_.begin(); }
  auto end() { return map_.end(); }

 private:
  // Ordered so that reaping and timer walks are deterministic.
  std::map<FourTuple, std::unique_ptr<ConnectionState>> map_;
};

}  // namespace quicpep
