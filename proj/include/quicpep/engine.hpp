#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>

#include "quicpep/connection.hpp"
#include "quicpep/loss.hpp"
#include "quicpep/time.hpp"

namespace quicpep {

// Interception surface the engine runs on. The live driver wraps a
// transparent-proxy socket; the simulator supplies an in-memory one.
class EngineHost {
 public:
  virtual ~EngineHost() = default;

  // Emits one datagram toward dst, preserving the original source.
  virtual void send(std::span<const std::uint8_t> datagram, const Endpoint& src,
                    const Endpoint& dst) = 0;

  // Asks for an on_timer() call at or after `at`. A later request
  // supersedes an earlier one.
  virtual void request_wakeup(TimeUs at) = 0;
};

// Echo-style RTT probing: request() fires an echo toward the target and the
// transport later hands (token, rtt) back via Engine::on_probe_result, or
// nothing before the engine's 2*srtt deadline.
class ProbeDriver {
 public:
  virtual ~ProbeDriver() = default;
  virtual bool request(const Endpoint& target, std::uint64_t token) = 0;
};

struct EngineConfig {
  double alpha = 2.0;
  double beta = 0.5;
  DurUs close_interval = 100;
  std::size_t flowlet_cap = 100;
  std::size_t max_active_flowlets = 64;
  double retx_cap_ratio = 0.10;
  DurUs retx_budget_window = 10 * kMicrosPerSec;
  DurUs idle_timeout = 120 * kMicrosPerSec;
  double copa_delta = 0.5;
  DurUs rtt_min_window = 10 * kMicrosPerSec;
  std::size_t eliciting_window = 200;
  std::size_t per_conn_buffer_bytes = 4 * 1024 * 1024;
  std::size_t global_buffer_bytes = 64 * 1024 * 1024;
  DurUs default_epoch = 100 * kMicrosPerMilli;
  bool probing = true;
  // Replay mode: run the full inference pipeline but emit nothing.
  bool emit = true;
};

struct EngineStats {
  std::uint64_t datagrams = 0;
  std::uint64_t forwarded = 0;
  std::uint64_t passthrough_unknown = 0;
  std::uint64_t connections_created = 0;
  std::uint64_t connections_reaped = 0;
  std::uint64_t flowlets_finished = 0;
  std::uint64_t flowlets_abandoned = 0;
  std::uint64_t reports = 0;
  std::uint64_t packets_reported_lost = 0;
  std::uint64_t retransmitted = 0;
  std::uint64_t retx_blocked_budget = 0;
  std::uint64_t retx_blocked_stage = 0;
  std::uint64_t replies_discarded = 0;
  std::uint64_t replies_assigned = 0;
  std::uint64_t probes_sent = 0;
  std::uint64_t probes_timed_out = 0;
  std::uint64_t calibration_resets = 0;
  std::uint64_t flowlets_cleared_on_reset = 0;
  std::uint64_t replies_held = 0;
};

// One loss report as it leaves the detector, with enough identity for
// scoring against ground truth.
struct ReportEvent {
  FourTuple conn;
  std::uint64_t fid = 0;
  LossReport report;
  std::vector<PayloadDigest> lost_digests;
};

// The forwarding core: tracks connections, forwards every datagram,
// partitions the protected direction into flowlets, infers loss and RTT,
// retransmits within budget, and enforces the delay-based window.
class Engine {
 public:
  Engine(EngineHost& host, ProbeDriver* probe_driver, EngineConfig config);

  // `retransmit_record` marks a trace-replayed copy of one of our own
  // retransmissions; it joins the flowlet store without being re-emitted.
  // `digest_override` substitutes the recorded payload digest when the
  // caller replays a trace whose payload bytes are gone.
  void on_datagram(std::span<const std::uint8_t> bytes, const Endpoint& src,
                   const Endpoint& dst, TimeUs now,
                   bool retransmit_record = false,
                   const PayloadDigest* digest_override = nullptr);

  void on_timer(TimeUs now);

  void on_probe_result(std::uint64_t token, DurUs rtt, TimeUs now);

  // Trace replay path for recorded probe samples: calibrates the
  // connection touching `target` as a live probe completion would.
  void inject_probe_sample(const Endpoint& target, DurUs rtt, TimeUs now);

  // Flushes held replies; used at shutdown so nothing is silently dropped.
  void flush(TimeUs now);

  const EngineStats& stats() const { return stats_; }
  std::size_t connection_count() const { return table_.size(); }
  const ConnectionState* find_connection(const FourTuple& key) {
    return table_.find(key);
  }

  // Observers for the simulator and the replay/analysis commands.
  std::function<void(const ReportEvent&)> report_hook;
  std::function<void(std::span<const std::uint8_t>, const Endpoint&,
                     const Endpoint&, TimeUs)>
      retransmit_hook;

 private:
  void forward(std::span<const std::uint8_t> bytes, const Endpoint& src,
               const Endpoint& dst);
  ConnectionState& create_connection(const FourTuple& key, const Endpoint& client,
                                     const Endpoint& server, TimeUs now);
  void handle_dominant(ConnectionState& conn, const PacketRecord& pkt,
                       std::span<const std::uint8_t> bytes, TimeUs now);
  bool handle_reply(ConnectionState& conn, const PacketRecord& pkt,
                    std::span<const std::uint8_t> bytes, const Endpoint& src,
                    const Endpoint& dst, TimeUs now);
  void process_closed(ConnectionState& conn, std::vector<Flowlet> closed,
                      TimeUs now);
  void retransmit_into(ConnectionState& conn, Flowlet& fl,
                       const LossReport& report, TimeUs now,
                       std::vector<Flowlet>& overflow);
  void roll_meter(ConnectionState& conn, TimeUs now);
  void maybe_update_dominance(ConnectionState& conn, TimeUs now);
  void service_probes(ConnectionState& conn, TimeUs now);
  void apply_calibration(ConnectionState& conn, const ProbeSample& sample);
  void service_connection(ConnectionState& conn, TimeUs now);
  void enforce_buffer_limits(ConnectionState& conn);
  void release_held_reply(ConnectionState& conn);
  void reschedule(TimeUs now);
  std::optional<TimeUs> connection_deadline(ConnectionState& conn) const;
  DurUs receiver_rtt_or_zero(ConnectionState& conn) const;

  EngineHost& host_;
  ProbeDriver* probe_driver_;
  EngineConfig config_;
  ConnectionTable table_;
  EngineStats stats_;
  std::uint64_t next_probe_token_ = 1;
  TimeUs last_reap_t_ = 0;
};

}  // namespace quicpep
