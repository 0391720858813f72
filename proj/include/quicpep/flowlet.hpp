#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <vector>

#include "quicpep/matching.hpp"
#include "quicpep/packet.hpp"
#include "quicpep/time.hpp"

namespace quicpep {

enum class FlowletState : std::uint8_t {
  kOpen,
  kAwaitingReplies,
  kFinished,
  kAbandoned,
};

// A burst of protected packets plus the replies assigned to it.
struct Flowlet {
  std::uint64_t fid = 0;
  std::vector<PacketRecord> sent;
  std::vector<PacketRecord> replies;
  FlowletState state = FlowletState::kOpen;
  std::optional<MatchResult> match;

  TimeUs first_sent_t() const { return sent.front().t; }
  TimeUs last_sent_t() const { return sent.back().t; }
};

struct FlowletParams {
  double alpha = 2.0;
  double beta = 0.5;
  std::size_t max_flowlet_packets = 100;  // protection abandoned beyond this
  std::size_t max_active_flowlets = 64;   // oldest is force-finished beyond this
  DurUs fixed_timeout = 0;                // >0 pins F_timeout (trace analysis, tests)
};

enum class ReplyOutcome : std::uint8_t { kAssigned, kDiscarded };

struct AssignResult {
  ReplyOutcome outcome = ReplyOutcome::kDiscarded;
  std::uint64_t fid = 0;
  std::vector<Flowlet> closed;  // flowlets that left the active set
};

struct IngestResult {
  std::uint64_t fid = 0;
  bool abandoned = false;       // the packet's flowlet crossed the size cap
  std::vector<Flowlet> closed;
};

// Per-connection flowlet store for one protected direction.
//
// Partitioning happens at ingest time: a packet within F_timeout of the
// newest flowlet's last packet joins it, anything later opens a new one.
// Replies are projected back by the measured RTT and assigned to the
// nearest active flowlet inside the exclusion window.
class FlowletTracker {
 public:
  explicit FlowletTracker(FlowletParams params) : params_(params) {}

  // F_timeout = alpha * s_inv; empty until the interval estimate is warm.
  std::optional<DurUs> flowlet_timeout() const;

  // Jitter tolerance for the exclusion window and the RTT reset test.
  std::optional<DurUs> delta_margin() const;

  // EWMA with gain 1/8; the first sample initializes the estimate.
  // Only intra-flowlet gaps feed this (idle periods between flowlets
  // would otherwise inflate the timeout without bound).
  DurUs update_s_inv(DurUs gap);

  IngestResult ingest_sent(const PacketRecord& pkt);

  AssignResult assign_reply(const PacketRecord& pkt, DurUs rtt);

  // Closes an idle open flowlet and finishes flowlets whose reply window
  // has passed. Returns everything that left the active set.
  std::vector<Flowlet> sweep(TimeUs now, DurUs rtt);

  // Earliest instant at which sweep(now, rtt) would make progress.
  std::optional<TimeUs> next_deadline(DurUs rtt) const;

  // Drops every active flowlet that already has replies assigned
  // (their assignments were made under a stale RTT). Returns the count.
  std::size_t clear_matched();

  // Finishes everything, e.g. on dominance flip or connection teardown.
  std::vector<Flowlet> finish_all();

  // Frees the oldest active flowlet's payload buffers and marks it
  // abandoned; used by the engine under buffer pressure.
  bool abandon_oldest();

  const std::deque<Flowlet>& active() const { return active_; }
  bool s_inv_ready() const { return s_inv_ > 0.0; }
  double s_inv_us() const { return s_inv_; }
  std::size_t buffered_bytes() const { return buffered_bytes_; }

 private:
  bool has_assignable() const;
  void strip_payloads(Flowlet& fl);
  Flowlet pop_front_closed();

  FlowletParams params_;
  std::deque<Flowlet> active_;
  double s_inv_ = 0.0;  // microseconds, 0 = uninitialized
  std::uint64_t next_fid_ = 1;
  std::size_t buffered_bytes_ = 0;
};

}  // namespace quicpep
