#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "quicpep/engine.hpp"
#include "quicpep/packet.hpp"
#include "quicpep/time.hpp"

namespace quicpep::sim {

enum class LossKind : std::uint8_t {
  kNone,
  kUniform,
  kGilbertElliott,
  // Deterministic injection: the first transmission of one chosen chunk of
  // every n-th frame is dropped; retransmissions of it pass.
  kTargetedFrameDrop,
};

struct LossModel {
  LossKind kind = LossKind::kNone;
  double probability = 0.0;  // uniform
  double p_good_to_bad = 0.0;
  double p_bad_to_good = 0.0;
  double loss_good = 0.0;
  double loss_bad = 1.0;
  std::uint64_t frame_every_n = 0;  // targeted drops
  std::uint64_t frame_offset = 0;
  std::uint32_t chunk_idx = 0;
};

struct GeState {
  bool bad = false;
};

// One chain step per packet: drop by the current state's loss rate, then
// transition.
bool ge_step(GeState& state, const LossModel& m, std::mt19937_64& rng);

struct LinkModel {
  DurUs one_way_delay = 1'000;
  double bandwidth_bps = 100e6;
  LossModel loss;
  std::size_t queue_capacity = 100;
  // Optional dynamics for calibration/tracking scenarios.
  double drift_us_per_sec = 0.0;
  TimeUs delay_step_at = 0;
  DurUs delay_step = 0;

  DurUs serialization_us(std::size_t bytes) const;
  DurUs one_way_at(TimeUs t) const;
};

struct EndpointConfig {
  int eliciting_threshold = 2;
  DurUs max_ack_delay = 25 * kMicrosPerMilli;
  bool ack_on_reorder = false;
};

enum class AppKind : std::uint8_t { kNone, kBulk, kRtc };
enum class CcKind : std::uint8_t { kCubicLike, kFixedRate };

struct TrafficConfig {
  AppKind app = AppKind::kBulk;
  std::uint64_t bulk_bytes = 5 * 1024 * 1024;
  double rtc_fps = 30.0;
  double rtc_bitrate_bps = 3e6;
  CcKind cc = CcKind::kCubicLike;
};

struct ScenarioConfig {
  LinkModel link1;  // client <-> middlebox
  LinkModel link2;  // middlebox <-> server
  EndpointConfig client;
  EndpointConfig server;
  TrafficConfig traffic;
  bool engine_on = true;
  EngineConfig engine;
  DurUs duration = 30 * kMicrosPerSec;

  // Throws std::invalid_argument naming the offending field.
  void validate() const;
};

struct PacketTruth {
  PayloadDigest digest{};
  TimeUs sent_t = 0;
  std::uint32_t frame_id = 0;
  std::uint32_t chunk_idx = 0;
  bool from_engine = false;
  bool delivered = false;
  TimeUs deliver_t = 0;
  int dropped_link = 0;      // 0 = not dropped, else link id
  bool dropped_toward_client = false;
};

struct FrameTruth {
  std::uint32_t frame_id = 0;
  TimeUs create_t = 0;
  std::optional<TimeUs> complete_t;
};

struct LinkCounters {
  std::uint64_t sent = 0;
  std::uint64_t delivered = 0;
  std::uint64_t dropped_loss = 0;
  std::uint64_t dropped_queue = 0;
  std::uint64_t in_flight = 0;  // enqueued, not yet delivered at scenario end
  DurUs min_latency = 0;
};

struct GroundTruth {
  std::vector<PacketTruth> packets;
  std::vector<FrameTruth> frames;
  LinkCounters link1;
  LinkCounters link2;
};

struct EngineSnapshot {
  bool present = false;
  DurUs initial_server_rtt = 0;
  DurUs initial_client_rtt = 0;
  DurUs srtt_to_client = 0;
  DurUs srtt_to_server = 0;
  double copa_cwnd = 0.0;
  Direction dominant = Direction::kUnknown;
  int eliciting_threshold = 0;
};

struct Metrics {
  double goodput_bps = 0.0;
  bool transfer_complete = false;
  DurUs transfer_time = 0;
  std::uint64_t frames_created = 0;
  std::uint64_t frames_completed = 0;
  double frame_interarrival_var_us2 = 0.0;
  double frame_interarrival_rfc3550_us = 0.0;
  DurUs frame_delay_p50 = 0;
  DurUs frame_delay_p90 = 0;
  DurUs frame_delay_p99 = 0;
  double detector_precision = 1.0;
  double detector_recall = 1.0;
  std::uint64_t true_losses_protected_link = 0;
  std::uint64_t reported_losses = 0;
  std::uint64_t receiver_data_packets = 0;
  std::uint64_t receiver_acks_sent = 0;
  EngineStats engine;
  EngineSnapshot snapshot;
};

// One observed datagram at the middlebox, in trace-file order.
struct MbTraceRecord {
  TimeUs t = 0;
  bool lo_to_hi = false;  // direction relative to the canonical four-tuple
  std::uint32_t size = 0;
  FourTuple conn;
  std::optional<LongHeaderType> long_header;
  bool retransmit = false;
  PayloadDigest digest{};
};

struct ProbeLogEntry {
  TimeUs t = 0;  // completion time at the middlebox
  DurUs rtt = 0;
};

struct ScenarioResult {
  Metrics metrics;
  GroundTruth truth;
  std::vector<ReportEvent> reports;
  std::vector<MbTraceRecord> mb_trace;
  std::vector<ProbeLogEntry> probe_log;
  std::vector<std::string> events;
};

ScenarioResult run_scenario(const ScenarioConfig& cfg, std::uint64_t seed);

struct DetectorScore {
  double precision = 1.0;
  double recall = 1.0;
  std::uint64_t true_positives = 0;
  std::uint64_t false_positives = 0;
  std::uint64_t false_negatives = 0;
};

DetectorScore score_detector(const std::set<PayloadDigest>& actual_lost,
                             const std::set<PayloadDigest>& reported_lost);

// Frame geometry of the constant-rate source: one frame every 1/fps,
// bitrate/fps bits per frame, fragmented into <=1200-byte packets.
struct RtcFrameShape {
  DurUs interval = 0;
  std::uint64_t frame_bytes = 0;
  std::uint32_t packets_per_frame = 0;
};
RtcFrameShape rtc_source(double fps, double bitrate_bps);

// Wire-format constants shared with tests.
inline constexpr std::size_t kMaxPacketBytes = 1200;
inline constexpr std::size_t kDataHeaderBytes = 22;
inline constexpr std::size_t kInitialPacketBytes = 1200;
inline constexpr std::size_t kServerHandshakeBytes = 1200;
inline constexpr std::size_t kClientHandshakeBytes = 300;

inline constexpr Endpoint kClientAddr{0x0a000001, 50'001};
inline constexpr Endpoint kServerAddr{0x0a000002, 443};
inline constexpr Endpoint kMiddleboxAddr{0x0a0000fe, 9};

}  // namespace quicpep::sim
