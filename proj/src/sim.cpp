#include "quicpep/sim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <deque>
#include <functional>
#include <map>
#include <queue>
#include <stdexcept>

namespace quicpep::sim {

namespace {

constexpr std::size_t kChunkPayload = kMaxPacketBytes - kDataHeaderBytes;
constexpr double kCubicC = 0.4;
constexpr double kCubicBeta = 0.7;
constexpr double kInitialCwnd = 10.0;
constexpr DurUs kHandshakeRetry = 500 * kMicrosPerMilli;

void put_u64(Bytes& b, std::size_t at, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    b[at + i] = static_cast<std::uint8_t>(v >> (8 * (7 - i)));
  }
}
std::uint64_t get_u64(const Bytes& b, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v = (v << 8) | b[at + i];
  }
  return v;
}
void put_u32(Bytes& b, std::size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) {
    b[at + i] = static_cast<std::uint8_t>(v >> (8 * (3 - i)));
  }
}
std::uint32_t get_u32(const Bytes& b, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v = (v << 8) | b[at + i];
  }
  return v;
}

namespace wire {

constexpr std::uint8_t kKindData = 0;
constexpr std::uint8_t kKindAck = 1;
constexpr std::uint8_t kProbeReq = 0x01;
constexpr std::uint8_t kProbeResp = 0x02;

Bytes long_header(LongHeaderType type, std::size_t size) {
  Bytes b;
  b.push_back(static_cast<std::uint8_t>(
      0xc0 | (static_cast<std::uint8_t>(type) << 4)));
  b.insert(b.end(), {0x00, 0x00, 0x00, 0x01});
  b.push_back(8);
  for (int i = 0; i < 8; ++i) {
    b.push_back(static_cast<std::uint8_t>(0x10 + i));
  }
  b.push_back(8);
  for (int i = 0; i < 8; ++i) {
    b.push_back(static_cast<std::uint8_t>(0x20 + i));
  }
  b.resize(size, 0);
  return b;
}

Bytes data_packet(std::uint64_t pkt_num, std::uint32_t frame_id,
                  std::uint32_t chunk_idx, std::uint32_t chunk_count,
                  std::size_t payload_len) {
  Bytes b(kDataHeaderBytes + payload_len, 0xd5);
  b[0] = 0x40;
  put_u64(b, 1, pkt_num);
  b[9] = kKindData;
  put_u32(b, 10, frame_id);
  put_u32(b, 14, chunk_idx);
  put_u32(b, 18, chunk_count);
  // real payloads are ciphertext; keep the tail unique per packet so the
  // first8+last8 token behaves like it does on encrypted traffic
  put_u64(b, b.size() - 8, pkt_num * 0x9e3779b97f4a7c15ull);
  return b;
}

Bytes ack_packet(std::uint64_t pkt_num,
                 const std::vector<std::pair<std::uint64_t, std::uint64_t>>&
                     ranges) {
  Bytes b(std::max<std::size_t>(40, 12 + 16 * ranges.size()), 0);
  b[0] = 0x40;
  put_u64(b, 1, pkt_num);
  b[9] = kKindAck;
  b[10] = static_cast<std::uint8_t>(ranges.size() >> 8);
  b[11] = static_cast<std::uint8_t>(ranges.size());
  std::size_t at = 12;
  for (const auto& [hi, lo] : ranges) {
    put_u64(b, at, hi);
    put_u64(b, at + 8, lo);
    at += 16;
  }
  return b;
}

struct ShortPacket {
  std::uint64_t pkt_num = 0;
  std::uint8_t kind = kKindData;
  std::uint32_t frame_id = 0;
  std::uint32_t chunk_idx = 0;
  std::uint32_t chunk_count = 0;
  std::size_t payload_len = 0;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> ranges;
};

std::optional<ShortPacket> parse_short(const Bytes& b) {
  // QUIC-style short header: form bit clear, fixed bit set
  if (b.size() < 12 || (b[0] & 0xc0) != 0x40) {
    return std::nullopt;
  }
  ShortPacket p;
  p.pkt_num = get_u64(b, 1);
  p.kind = b[9];
  if (p.kind == kKindData) {
    if (b.size() < kDataHeaderBytes) {
      return std::nullopt;
    }
    p.frame_id = get_u32(b, 10);
    p.chunk_idx = get_u32(b, 14);
    p.chunk_count = get_u32(b, 18);
    p.payload_len = b.size() - kDataHeaderBytes;
  } else if (p.kind == kKindAck) {
    const std::size_t count = (static_cast<std::size_t>(b[10]) << 8) | b[11];
    if (b.size() < 12 + 16 * count) {
      return std::nullopt;
    }
    for (std::size_t i = 0; i < count; ++i) {
      p.ranges.emplace_back(get_u64(b, 12 + 16 * i), get_u64(b, 12 + 16 * i + 8));
    }
  }
  return p;
}

Bytes probe(std::uint8_t kind, std::uint64_t token) {
  Bytes b(64, 0);
  b[0] = kind;
  put_u64(b, 1, token);
  return b;
}

}  // namespace wire

struct Dgram {
  Bytes bytes;
  Endpoint src;
  Endpoint dst;
  bool from_engine = false;
  std::int64_t truth_idx = -1;
};

class Scenario;

// QUIC-like reference endpoint: long-header handshake, range ACKs with a
// configurable eliciting threshold and max_ack_delay, RFC-9002-style
// packet/time-threshold loss detection with PTO, and a CUBIC-like window
// that rolls back when a loss turns out spurious.
class SimEndpoint {
 public:
  SimEndpoint(Scenario& sim, Endpoint addr, Endpoint peer, bool is_client,
              EndpointConfig cfg, TrafficConfig traffic, bool is_sender)
      : sim_(sim),
        addr_(addr),
        peer_(peer),
        is_client_(is_client),
        cfg_(cfg),
        traffic_(traffic),
        is_sender_(is_sender) {}

  void start(TimeUs now);
  void on_datagram(const Dgram& d, TimeUs now);

  std::uint64_t data_packets_received() const { return data_packets_rx_; }
  std::uint64_t acks_sent() const { return acks_tx_; }
  std::uint64_t unique_bytes_received() const { return unique_bytes_rx_; }

 private:
  struct Chunk {
    std::uint32_t frame_id = 0;
    std::uint32_t chunk_idx = 0;
    std::uint32_t chunk_count = 0;
    std::uint32_t payload_len = 0;
  };
  struct SentInfo {
    TimeUs sent_t = 0;
    Chunk chunk;
    bool declared_lost = false;
    std::uint64_t loss_event = 0;
  };

  // handshake
  void send_initial(TimeUs now);
  void handshake_watchdog(TimeUs now);
  void on_long_header(const LongHeaderMeta& meta, TimeUs now);

  // receiver
  void on_data(const wire::ShortPacket& p, TimeUs now);
  void arm_ack_timer(TimeUs now);
  void send_ack(TimeUs now);

  // sender
  void app_start(TimeUs now);
  void rtc_tick(TimeUs now);
  std::optional<Chunk> next_chunk();
  void send_chunk(const Chunk& c, TimeUs now);
  void try_send(TimeUs now);
  void on_ack(const wire::ShortPacket& p, TimeUs now);
  void detect_losses(TimeUs now);
  void congestion_event(std::uint64_t lost_pkt, TimeUs now);
  void maybe_undo_spurious(const SentInfo& info);
  void arm_pto(TimeUs now);
  void on_pto(TimeUs now);
  double time_threshold_us() const;
  double pto_interval_us() const;
  void add_rtt_sample(DurUs sample);

  Scenario& sim_;
  Endpoint addr_;
  Endpoint peer_;
  bool is_client_;
  EndpointConfig cfg_;
  TrafficConfig traffic_;
  bool is_sender_;

  bool established_ = false;
  bool saw_initial_ = false;
  std::uint64_t hs_gen_ = 0;

  // receiver state
  std::set<std::uint64_t> received_;
  std::uint64_t largest_received_ = 0;
  int pending_eliciting_ = 0;
  bool ack_timer_armed_ = false;
  std::uint64_t ack_gen_ = 0;
  std::uint64_t data_packets_rx_ = 0;
  std::uint64_t acks_tx_ = 0;
  std::map<std::uint32_t, std::set<std::uint32_t>> frame_chunks_rx_;
  std::set<std::uint64_t> chunks_rx_;
  std::uint64_t unique_bytes_rx_ = 0;

  // sender state
  std::uint64_t next_pkt_num_ = 1;
  std::map<std::uint64_t, SentInfo> unacked_;
  std::uint64_t largest_acked_ = 0;
  std::deque<Chunk> queue_;
  std::uint64_t bulk_total_chunks_ = 0;
  std::uint64_t bulk_next_chunk_ = 0;
  std::uint32_t next_frame_ = 0;
  int in_flight_ = 0;

  double cwnd_ = kInitialCwnd;
  double ssthresh_ = 1e9;
  double w_max_ = 0.0;
  TimeUs cubic_epoch_ = 0;
  double cubic_k_ = 0.0;
  std::uint64_t recovery_end_pkt_ = 0;
  std::uint64_t loss_event_seq_ = 0;
  struct Undo {
    bool valid = false;
    double cwnd = 0, ssthresh = 0, w_max = 0, cubic_k = 0;
    TimeUs cubic_epoch = 0;
  } undo_;

  double srtt_ = 0.0;
  double rttvar_ = 0.0;
  DurUs latest_rtt_ = 0;
  int pto_count_ = 0;
  std::uint64_t pto_gen_ = 0;
  std::uint64_t loss_gen_ = 0;
};

class SimHost;
class SimProbeDriver;

class Scenario {
 public:
  Scenario(const ScenarioConfig& cfg, std::uint64_t seed);
  ScenarioResult run();

  // event plumbing
  void at(TimeUs t, std::function<void()> fn);
  TimeUs now() const { return now_; }
  TimeUs end() const { return end_t_; }
  std::mt19937_64& rng() { return rng_; }
  const ScenarioConfig& cfg() const { return cfg_; }

  void endpoint_send(Dgram d);
  void mb_emit(Dgram d);
  void send_probe(const Endpoint& target, std::uint64_t token);

  // ground truth & app progress
  std::int64_t record_data_truth(const Bytes& bytes, TimeUs t, bool from_engine);
  void frame_created(std::uint32_t frame_id, TimeUs t);
  void frame_completed(std::uint32_t frame_id, TimeUs t);
  void bulk_completed(TimeUs t);
  void note_first_data(TimeUs t) {
    if (first_data_t_ == 0) {
      first_data_t_ = t;
    }
  }
  void log(const char* fmt, ...);

  bool engine_retx_pending = false;  // set by the retransmit hook

 private:
  struct LinkDir {
    const LinkModel* model = nullptr;
    int link_id = 1;
    bool toward_client = false;
    TimeUs next_free = 0;
    std::size_t queue_len = 0;
    GeState ge;
    std::uint64_t data_seq = 0;
    std::set<std::uint64_t> targeted_seen;
    LinkCounters* counters = nullptr;
  };

  struct Ev {
    TimeUs t;
    std::uint64_t seq;
    std::function<void()> fn;
    bool operator>(const Ev& o) const {
      return t != o.t ? t > o.t : seq > o.seq;
    }
  };

  void link_enqueue(LinkDir& ld, Dgram d);
  void deliver(LinkDir& ld, Dgram d, TimeUs enq_t);
  void mb_receive(Dgram d);
  void finalize_metrics();

  ScenarioConfig cfg_;
  std::mt19937_64 rng_;
  TimeUs now_ = 0;
  TimeUs end_t_ = 0;
  std::uint64_t next_seq_ = 0;
  std::priority_queue<Ev, std::vector<Ev>, std::greater<Ev>> events_;

  LinkDir l1_to_client_, l1_to_mb_, l2_to_server_, l2_to_mb_;

  SimEndpoint client_;
  SimEndpoint server_;

  std::unique_ptr<SimHost> host_;
  std::unique_ptr<SimProbeDriver> probe_driver_;
  std::unique_ptr<Engine> engine_;
  std::uint64_t engine_wake_gen_ = 0;
  std::map<std::uint64_t, TimeUs> probe_sent_;
  std::int64_t rx_truth_stash_ = -1;
  const Bytes* rx_bytes_stash_ = nullptr;

  ScenarioResult result_;
  TimeUs first_data_t_ = 0;
  std::optional<TimeUs> bulk_complete_t_;

  friend class SimHost;
  friend class SimProbeDriver;
};

class SimHost : public EngineHost {
 public:
  explicit SimHost(Scenario& sim) : sim_(sim) {}
  void send(std::span<const std::uint8_t> datagram, const Endpoint& src,
            const Endpoint& dst) override {
    Dgram d;
    d.bytes.assign(datagram.begin(), datagram.end());
    d.src = src;
    d.dst = dst;
    if (sim_.engine_retx_pending) {
      sim_.engine_retx_pending = false;
      d.from_engine = true;
      d.truth_idx = sim_.record_data_truth(d.bytes, sim_.now(), true);
    } else if (sim_.rx_bytes_stash_ != nullptr &&
               d.bytes == *sim_.rx_bytes_stash_) {
      d.truth_idx = sim_.rx_truth_stash_;
    }
    sim_.mb_emit(std::move(d));
  }
  void request_wakeup(TimeUs at) override {
    const std::uint64_t gen = ++sim_.engine_wake_gen_;
    const TimeUs when = std::max(at, sim_.now());
    sim_.at(when, [this, gen, when] {
      if (gen == sim_.engine_wake_gen_ && sim_.engine_) {
        sim_.engine_->on_timer(std::max(when, sim_.now()));
      }
    });
  }

 private:
  Scenario& sim_;
};

class SimProbeDriver : public ProbeDriver {
 public:
  explicit SimProbeDriver(Scenario& sim) : sim_(sim) {}
  bool request(const Endpoint& target, std::uint64_t token) override {
    sim_.send_probe(target, token);
    return true;
  }

 private:
  Scenario& sim_;
};

// ---------------------------------------------------------------------------
// SimEndpoint

void SimEndpoint::start(TimeUs now) {
  if (is_client_) {
    send_initial(now);
  }
}

void SimEndpoint::send_initial(TimeUs now) {
  Dgram d;
  d.bytes = wire::long_header(LongHeaderType::kInitial, kInitialPacketBytes);
  d.src = addr_;
  d.dst = peer_;
  sim_.endpoint_send(std::move(d));
  const std::uint64_t gen = ++hs_gen_;
  sim_.at(now + kHandshakeRetry, [this, gen] {
    if (gen == hs_gen_ && !established_) {
      handshake_watchdog(sim_.now());
    }
  });
}

void SimEndpoint::handshake_watchdog(TimeUs now) { send_initial(now); }

void SimEndpoint::on_long_header(const LongHeaderMeta& meta, TimeUs now) {
  if (is_client_) {
    if (meta.packet_type == LongHeaderType::kHandshake) {
      // reply (or re-reply on duplicates) with the client handshake ack
      const bool first = !established_;
      established_ = true;
      ++hs_gen_;  // cancel the retry watchdog
      Dgram d;
      d.bytes =
          wire::long_header(LongHeaderType::kHandshake, kClientHandshakeBytes);
      d.src = addr_;
      d.dst = peer_;
      sim_.endpoint_send(std::move(d));
      if (first && is_sender_) {
        app_start(now);
      }
    }
    return;
  }
  // server
  if (meta.packet_type == LongHeaderType::kInitial) {
    saw_initial_ = true;
    Dgram d;
    d.bytes =
        wire::long_header(LongHeaderType::kHandshake, kServerHandshakeBytes);
    d.src = addr_;
    d.dst = peer_;
    sim_.endpoint_send(std::move(d));
  } else if (meta.packet_type == LongHeaderType::kHandshake) {
    if (!established_) {
      established_ = true;
      if (is_sender_) {
        app_start(now);
      }
    }
  }
}

void SimEndpoint::on_datagram(const Dgram& d, TimeUs now) {
  (void)now;
  if (!d.bytes.empty() && d.bytes[0] == wire::kProbeReq) {
    Dgram resp;
    resp.bytes = d.bytes;
    resp.bytes[0] = wire::kProbeResp;
    resp.src = addr_;
    resp.dst = kMiddleboxAddr;
    sim_.endpoint_send(std::move(resp));
    return;
  }
  if (auto meta = parse_long_header(d.bytes)) {
    on_long_header(*meta, now);
    return;
  }
  auto p = wire::parse_short(d.bytes);
  if (!p) {
    return;
  }
  if (p->kind == wire::kKindAck) {
    on_ack(*p, now);
  } else {
    on_data(*p, now);
  }
}

void SimEndpoint::on_data(const wire::ShortPacket& p, TimeUs now) {
  if (received_.count(p.pkt_num) > 0) {
    return;  // duplicate packet numbers are dropped outright
  }
  received_.insert(p.pkt_num);
  ++data_packets_rx_;
  // a gap or a late fill is "out of order" for the immediate-ACK trigger
  const bool out_of_order =
      largest_received_ != 0 && p.pkt_num != largest_received_ + 1;
  largest_received_ = std::max(largest_received_, p.pkt_num);
  ++pending_eliciting_;

  const std::uint64_t chunk_key =
      (static_cast<std::uint64_t>(p.frame_id) << 32) | p.chunk_idx;
  if (chunks_rx_.insert(chunk_key).second) {
    unique_bytes_rx_ += p.payload_len;
    if (traffic_.app == AppKind::kRtc) {
      auto& got = frame_chunks_rx_[p.frame_id];
      got.insert(p.chunk_idx);
      if (got.size() == p.chunk_count) {
        sim_.frame_completed(p.frame_id, now);
      }
    } else if (traffic_.app == AppKind::kBulk &&
               chunks_rx_.size() == p.chunk_count) {
      sim_.bulk_completed(now);
    }
  }

  if (pending_eliciting_ >= cfg_.eliciting_threshold ||
      (out_of_order && cfg_.ack_on_reorder)) {
    send_ack(now);
  } else {
    arm_ack_timer(now);
  }
}

void SimEndpoint::arm_ack_timer(TimeUs now) {
  if (ack_timer_armed_) {
    return;
  }
  ack_timer_armed_ = true;
  const std::uint64_t gen = ++ack_gen_;
  sim_.at(now + cfg_.max_ack_delay, [this, gen] {
    if (gen == ack_gen_ && pending_eliciting_ > 0) {
      send_ack(sim_.now());
    }
  });
}

void SimEndpoint::send_ack(TimeUs now) {
  (void)now;
  pending_eliciting_ = 0;
  ack_timer_armed_ = false;
  ++ack_gen_;

  std::vector<std::pair<std::uint64_t, std::uint64_t>> ranges;
  for (auto it = received_.rbegin();
       it != received_.rend() && ranges.size() < 8;) {
    std::uint64_t hi = *it;
    std::uint64_t lo = hi;
    ++it;
    while (it != received_.rend() && *it == lo - 1) {
      lo = *it;
      ++it;
    }
    ranges.emplace_back(hi, lo);
  }
  Dgram d;
  d.bytes = wire::ack_packet(next_pkt_num_++, ranges);
  d.src = addr_;
  d.dst = peer_;
  ++acks_tx_;
  sim_.endpoint_send(std::move(d));
}

void SimEndpoint::app_start(TimeUs now) {
  if (traffic_.app == AppKind::kBulk) {
    bulk_total_chunks_ =
        (traffic_.bulk_bytes + kChunkPayload - 1) / kChunkPayload;
    try_send(now);
  } else if (traffic_.app == AppKind::kRtc) {
    rtc_tick(now);
  }
}

void SimEndpoint::rtc_tick(TimeUs now) {
  const RtcFrameShape shape = rtc_source(traffic_.rtc_fps, traffic_.rtc_bitrate_bps);
  if (shape.frame_bytes == 0) {
    return;
  }
  const std::uint32_t frame = next_frame_++;
  sim_.frame_created(frame, now);
  std::uint64_t remaining = shape.frame_bytes;
  std::uint32_t idx = 0;
  while (remaining > 0) {
    const std::uint32_t len =
        static_cast<std::uint32_t>(std::min<std::uint64_t>(remaining, kChunkPayload));
    queue_.push_back(Chunk{frame, idx++, shape.packets_per_frame, len});
    remaining -= len;
  }
  try_send(now);
  if (now + shape.interval <= sim_.end()) {
    sim_.at(now + shape.interval, [this] { rtc_tick(sim_.now()); });
  }
}

std::optional<SimEndpoint::Chunk> SimEndpoint::next_chunk() {
  if (!queue_.empty()) {
    Chunk c = queue_.front();
    queue_.pop_front();
    return c;
  }
  if (traffic_.app == AppKind::kBulk && bulk_next_chunk_ < bulk_total_chunks_) {
    const std::uint64_t idx = bulk_next_chunk_++;
    const std::uint64_t off = idx * kChunkPayload;
    const std::uint32_t len = static_cast<std::uint32_t>(
        std::min<std::uint64_t>(kChunkPayload, traffic_.bulk_bytes - off));
    return Chunk{0, static_cast<std::uint32_t>(idx),
                 static_cast<std::uint32_t>(bulk_total_chunks_), len};
  }
  return std::nullopt;
}

void SimEndpoint::send_chunk(const Chunk& c, TimeUs now) {
  const std::uint64_t num = next_pkt_num_++;
  Dgram d;
  d.bytes = wire::data_packet(num, c.frame_id, c.chunk_idx, c.chunk_count,
                              c.payload_len);
  d.src = addr_;
  d.dst = peer_;
  unacked_[num] = SentInfo{now, c, false, 0};
  ++in_flight_;
  sim_.note_first_data(now);
  sim_.endpoint_send(std::move(d));
}

void SimEndpoint::try_send(TimeUs now) {
  const bool window_limited = traffic_.cc == CcKind::kCubicLike;
  while (!window_limited || in_flight_ < static_cast<int>(cwnd_)) {
    auto c = next_chunk();
    if (!c) {
      break;
    }
    send_chunk(*c, now);
  }
  arm_pto(now);
}

void SimEndpoint::add_rtt_sample(DurUs sample) {
  if (sample <= 0) {
    return;
  }
  latest_rtt_ = sample;
  if (srtt_ <= 0.0) {
    srtt_ = static_cast<double>(sample);
    rttvar_ = srtt_ / 2.0;
  } else {
    const double err = std::abs(srtt_ - static_cast<double>(sample));
    rttvar_ = 0.75 * rttvar_ + 0.25 * err;
    srtt_ = 0.875 * srtt_ + 0.125 * static_cast<double>(sample);
  }
}

double SimEndpoint::time_threshold_us() const {
  const double base = std::max(srtt_, static_cast<double>(latest_rtt_));
  return base > 0 ? 9.0 / 8.0 * base : 1e9;
}

double SimEndpoint::pto_interval_us() const {
  if (srtt_ <= 0.0) {
    return 1e6;
  }
  return srtt_ + 4.0 * rttvar_ +
         static_cast<double>(cfg_.max_ack_delay);
}

void SimEndpoint::maybe_undo_spurious(const SentInfo& info) {
  if (!undo_.valid || info.loss_event != loss_event_seq_) {
    return;
  }
  // The "lost" packet arrived after all; take back the window cut.
  cwnd_ = std::max(cwnd_, undo_.cwnd);
  ssthresh_ = undo_.ssthresh;
  w_max_ = undo_.w_max;
  cubic_epoch_ = undo_.cubic_epoch;
  cubic_k_ = undo_.cubic_k;
  undo_.valid = false;
}

void SimEndpoint::on_ack(const wire::ShortPacket& p, TimeUs now) {
  std::uint64_t newly_acked = 0;
  std::uint64_t largest_newly = 0;
  for (const auto& [hi, lo] : p.ranges) {
    auto it = unacked_.lower_bound(lo);
    while (it != unacked_.end() && it->first <= hi) {
      const SentInfo info = it->second;
      if (info.declared_lost) {
        maybe_undo_spurious(info);
      } else {
        --in_flight_;
        ++newly_acked;
      }
      if (it->first > largest_newly) {
        largest_newly = it->first;
        if (it->first >= largest_acked_) {
          add_rtt_sample(now - info.sent_t);
        }
      }
      it = unacked_.erase(it);
    }
  }
  if (largest_newly == 0) {
    return;  // stale or empty
  }
  largest_acked_ = std::max(largest_acked_, largest_newly);
  pto_count_ = 0;

  if (traffic_.cc == CcKind::kCubicLike && newly_acked > 0) {
    if (cwnd_ < ssthresh_) {
      cwnd_ += static_cast<double>(newly_acked);
    } else {
      const double t =
          static_cast<double>(now - cubic_epoch_) / 1e6;
      const double w =
          w_max_ + kCubicC * (t - cubic_k_) * (t - cubic_k_) * (t - cubic_k_);
      for (std::uint64_t i = 0; i < newly_acked; ++i) {
        if (w > cwnd_) {
          cwnd_ += std::min((w - cwnd_) / cwnd_, 0.5);
        } else {
          cwnd_ += 0.05 / cwnd_;
        }
      }
    }
  }
  detect_losses(now);
  try_send(now);
}

void SimEndpoint::congestion_event(std::uint64_t lost_pkt, TimeUs now) {
  if (traffic_.cc != CcKind::kCubicLike) {
    return;
  }
  if (lost_pkt <= recovery_end_pkt_) {
    return;  // same loss round
  }
  ++loss_event_seq_;
  undo_ = Undo{true, cwnd_, ssthresh_, w_max_, cubic_k_, cubic_epoch_};
  recovery_end_pkt_ = next_pkt_num_ - 1;
  w_max_ = cwnd_;
  cwnd_ = std::max(2.0, cwnd_ * kCubicBeta);
  ssthresh_ = cwnd_;
  cubic_epoch_ = now;
  cubic_k_ = std::cbrt(w_max_ * (1.0 - kCubicBeta) / kCubicC);
}

void SimEndpoint::detect_losses(TimeUs now) {
  const double thr = time_threshold_us();
  std::optional<TimeUs> next_check;
  for (auto& [num, info] : unacked_) {
    if (num >= largest_acked_) {
      break;
    }
    if (info.declared_lost) {
      continue;
    }
    bool lost = largest_acked_ - num >= 3;
    if (!lost) {
      if (static_cast<double>(now - info.sent_t) >= thr) {
        lost = true;
      } else {
        const TimeUs due = info.sent_t + static_cast<DurUs>(thr) + 1;
        if (!next_check || due < *next_check) {
          next_check = due;
        }
      }
    }
    if (lost) {
      congestion_event(num, now);
      info.declared_lost = true;
      info.loss_event = loss_event_seq_;
      --in_flight_;
      queue_.push_front(info.chunk);
    }
  }
  // forget stale loss markers once any spurious-ACK window has passed
  const DurUs keep = static_cast<DurUs>(10 * std::max(srtt_, 1e4));
  for (auto it = unacked_.begin(); it != unacked_.end();) {
    if (it->second.declared_lost && now - it->second.sent_t > keep) {
      it = unacked_.erase(it);
    } else {
      ++it;
    }
  }
  if (next_check) {
    const std::uint64_t gen = ++loss_gen_;
    sim_.at(*next_check, [this, gen] {
      if (gen == loss_gen_) {
        detect_losses(sim_.now());
        try_send(sim_.now());
      }
    });
  }
}

void SimEndpoint::arm_pto(TimeUs now) {
  if (in_flight_ <= 0) {
    return;
  }
  const std::uint64_t gen = ++pto_gen_;
  const double backoff = static_cast<double>(1u << std::min(pto_count_, 6));
  sim_.at(now + static_cast<DurUs>(pto_interval_us() * backoff),
          [this, gen] {
            if (gen == pto_gen_) {
              on_pto(sim_.now());
            }
          });
}

void SimEndpoint::on_pto(TimeUs now) {
  if (in_flight_ <= 0) {
    return;
  }
  // probe with the oldest outstanding chunk; no window reduction
  for (auto& [num, info] : unacked_) {
    if (!info.declared_lost) {
      send_chunk(info.chunk, now);
      break;
    }
  }
  ++pto_count_;
  arm_pto(now);
}

// ---------------------------------------------------------------------------
// Scenario

Scenario::Scenario(const ScenarioConfig& cfg, std::uint64_t seed)
    : cfg_(cfg),
      rng_(seed),
      end_t_(cfg.duration),
      client_(*this, kClientAddr, kServerAddr, true, cfg.client, cfg.traffic,
              false),
      server_(*this, kServerAddr, kClientAddr, false, cfg.server, cfg.traffic,
              true) {
  auto init_dir = [](LinkDir& ld, const LinkModel* model, int id,
                     bool toward_client, LinkCounters* counters) {
    ld.model = model;
    ld.link_id = id;
    ld.toward_client = toward_client;
    ld.counters = counters;
  };
  init_dir(l1_to_client_, &cfg_.link1, 1, true, &result_.truth.link1);
  init_dir(l1_to_mb_, &cfg_.link1, 1, false, &result_.truth.link1);
  init_dir(l2_to_server_, &cfg_.link2, 2, false, &result_.truth.link2);
  init_dir(l2_to_mb_, &cfg_.link2, 2, true, &result_.truth.link2);
  result_.truth.link1.min_latency = std::numeric_limits<DurUs>::max();
  result_.truth.link2.min_latency = std::numeric_limits<DurUs>::max();

  if (cfg_.engine_on) {
    host_ = std::make_unique<SimHost>(*this);
    probe_driver_ = std::make_unique<SimProbeDriver>(*this);
    engine_ = std::make_unique<Engine>(*host_, probe_driver_.get(), cfg_.engine);
    engine_->report_hook = [this](const ReportEvent& ev) {
      result_.reports.push_back(ev);
    };
    engine_->retransmit_hook = [this](std::span<const std::uint8_t> bytes,
                                      const Endpoint& src, const Endpoint& dst,
                                      TimeUs t) {
      engine_retx_pending = true;
      MbTraceRecord rec;
      rec.t = t;
      rec.conn = FourTuple::canonical(src, dst);
      rec.lo_to_hi = src == rec.conn.lo;
      rec.size = static_cast<std::uint32_t>(bytes.size());
      rec.retransmit = true;
      rec.digest = payload_digest(bytes);
      result_.mb_trace.push_back(rec);
    };
  }
}

void Scenario::at(TimeUs t, std::function<void()> fn) {
  events_.push(Ev{std::max(t, now_), next_seq_++, std::move(fn)});
}

void Scenario::log(const char* fmt, ...) {
  char buf[160];
  va_list ap;
  va_start(ap, fmt);
  std::vsnprintf(buf, sizeof(buf), fmt, ap);
  va_end(ap);
  result_.events.push_back(buf);
}

std::int64_t Scenario::record_data_truth(const Bytes& bytes, TimeUs t,
                                         bool from_engine) {
  auto p = wire::parse_short(bytes);
  if (!p || p->kind != wire::kKindData) {
    return -1;
  }
  PacketTruth rec;
  rec.digest = payload_digest(bytes);
  rec.sent_t = t;
  rec.frame_id = p->frame_id;
  rec.chunk_idx = p->chunk_idx;
  rec.from_engine = from_engine;
  result_.truth.packets.push_back(rec);
  return static_cast<std::int64_t>(result_.truth.packets.size() - 1);
}

void Scenario::endpoint_send(Dgram d) {
  if (d.truth_idx < 0 && !d.from_engine) {
    d.truth_idx = record_data_truth(d.bytes, now_, false);
  }
  LinkDir& ld = d.src == kClientAddr ? l1_to_mb_ : l2_to_mb_;
  link_enqueue(ld, std::move(d));
}

void Scenario::mb_emit(Dgram d) {
  LinkDir& ld = d.dst == kClientAddr ? l1_to_client_ : l2_to_server_;
  link_enqueue(ld, std::move(d));
}

void Scenario::send_probe(const Endpoint& target, std::uint64_t token) {
  probe_sent_[token] = now_;
  Dgram d;
  d.bytes = wire::probe(wire::kProbeReq, token);
  d.src = kMiddleboxAddr;
  d.dst = target;
  mb_emit(std::move(d));
}

void Scenario::link_enqueue(LinkDir& ld, Dgram d) {
  ++ld.counters->sent;

  // loss ahead of the queue, netem style
  bool drop = false;
  const LossModel& loss = ld.model->loss;
  switch (loss.kind) {
    case LossKind::kNone:
      break;
    case LossKind::kUniform: {
      std::uniform_real_distribution<double> uni(0.0, 1.0);
      drop = loss.probability > 0.0 && uni(rng_) < loss.probability;
      break;
    }
    case LossKind::kGilbertElliott:
      drop = ge_step(ld.ge, loss, rng_);
      break;
    case LossKind::kTargetedFrameDrop:
      if (d.truth_idx >= 0 && !d.from_engine) {
        if (auto p = wire::parse_short(d.bytes);
            p && p->kind == wire::kKindData &&
            p->frame_id >= loss.frame_offset &&
            (p->frame_id - loss.frame_offset) % loss.frame_every_n == 0 &&
            p->chunk_idx == loss.chunk_idx) {
          const std::uint64_t key =
              (static_cast<std::uint64_t>(p->frame_id) << 32) | p->chunk_idx;
          drop = ld.targeted_seen.insert(key).second;
        }
      }
      break;
  }
  if (drop) {
    ++ld.counters->dropped_loss;
    if (d.truth_idx >= 0) {
      auto& rec = result_.truth.packets[d.truth_idx];
      rec.dropped_link = ld.link_id;
      rec.dropped_toward_client = ld.toward_client;
    }
    log("%lld drop-loss link%d %s", static_cast<long long>(now_), ld.link_id,
        ld.toward_client ? "c" : "s");
    return;
  }

  if (ld.queue_len >= ld.model->queue_capacity) {
    ++ld.counters->dropped_queue;
    if (d.truth_idx >= 0) {
      auto& rec = result_.truth.packets[d.truth_idx];
      rec.dropped_link = ld.link_id;
      rec.dropped_toward_client = ld.toward_client;
    }
    log("%lld drop-queue link%d", static_cast<long long>(now_), ld.link_id);
    return;
  }

  const DurUs ser = ld.model->serialization_us(d.bytes.size());
  const TimeUs start = std::max(now_, ld.next_free);
  const TimeUs done = start + ser;
  ld.next_free = done;
  ++ld.queue_len;
  const TimeUs enq_t = now_;
  at(start, [&ld] { --ld.queue_len; });
  ++ld.counters->in_flight;
  const TimeUs deliver_t = done + ld.model->one_way_at(done);
  auto shared = std::make_shared<Dgram>(std::move(d));
  at(deliver_t, [this, &ld, shared, enq_t] { deliver(ld, std::move(*shared), enq_t); });
}

void Scenario::deliver(LinkDir& ld, Dgram d, TimeUs enq_t) {
  --ld.counters->in_flight;
  ++ld.counters->delivered;
  ld.counters->min_latency = std::min(ld.counters->min_latency, now_ - enq_t);

  if (ld.link_id == 1 && ld.toward_client) {
    if (d.truth_idx >= 0) {
      auto& rec = result_.truth.packets[d.truth_idx];
      rec.delivered = true;
      rec.deliver_t = now_;
    }
    client_.on_datagram(d, now_);
    return;
  }
  if (ld.link_id == 2 && !ld.toward_client) {
    if (d.truth_idx >= 0) {
      auto& rec = result_.truth.packets[d.truth_idx];
      rec.delivered = true;
      rec.deliver_t = now_;
    }
    server_.on_datagram(d, now_);
    return;
  }
  mb_receive(std::move(d));
}

void Scenario::mb_receive(Dgram d) {
  if (d.dst == kMiddleboxAddr) {
    if (!d.bytes.empty() && d.bytes[0] == wire::kProbeResp && engine_) {
      const std::uint64_t token = get_u64(d.bytes, 1);
      auto it = probe_sent_.find(token);
      if (it != probe_sent_.end()) {
        const DurUs rtt = now_ - it->second;
        probe_sent_.erase(it);
        result_.probe_log.push_back(ProbeLogEntry{now_, rtt});
        engine_->on_probe_result(token, rtt, now_);
      }
    }
    return;
  }
  if (!d.bytes.empty() &&
      (d.bytes[0] == wire::kProbeReq || d.bytes[0] == wire::kProbeResp)) {
    // probe echo at an endpoint address happens below at delivery
  }

  MbTraceRecord rec;
  rec.t = now_;
  rec.conn = FourTuple::canonical(d.src, d.dst);
  rec.lo_to_hi = d.src == rec.conn.lo;
  rec.size = static_cast<std::uint32_t>(d.bytes.size());
  if (auto meta = parse_long_header(d.bytes)) {
    rec.long_header = meta->packet_type;
  }
  rec.digest = payload_digest(d.bytes);
  result_.mb_trace.push_back(rec);

  if (engine_) {
    rx_truth_stash_ = d.truth_idx;
    rx_bytes_stash_ = &d.bytes;
    engine_->on_datagram(d.bytes, d.src, d.dst, now_);
    rx_truth_stash_ = -1;
    rx_bytes_stash_ = nullptr;
  } else {
    mb_emit(std::move(d));
  }
}

void Scenario::frame_created(std::uint32_t frame_id, TimeUs t) {
  if (result_.truth.frames.size() <= frame_id) {
    result_.truth.frames.resize(frame_id + 1);
  }
  result_.truth.frames[frame_id].frame_id = frame_id;
  result_.truth.frames[frame_id].create_t = t;
  ++result_.metrics.frames_created;
}

void Scenario::frame_completed(std::uint32_t frame_id, TimeUs t) {
  if (frame_id < result_.truth.frames.size() &&
      !result_.truth.frames[frame_id].complete_t) {
    result_.truth.frames[frame_id].complete_t = t;
    ++result_.metrics.frames_completed;
  }
}

void Scenario::bulk_completed(TimeUs t) {
  if (!bulk_complete_t_) {
    bulk_complete_t_ = t;
    // let retransmissions and probes drain briefly, then stop
    end_t_ = std::min(end_t_, t + 200 * kMicrosPerMilli);
  }
}

ScenarioResult Scenario::run() {
  at(0, [this] { client_.start(0); });
  while (!events_.empty()) {
    Ev ev = events_.top();
    if (ev.t > end_t_) {
      break;
    }
    events_.pop();
    now_ = ev.t;
    ev.fn();
  }
  now_ = end_t_;
  finalize_metrics();
  return std::move(result_);
}

void Scenario::finalize_metrics() {
  Metrics& m = result_.metrics;
  m.receiver_data_packets = client_.data_packets_received();
  m.receiver_acks_sent = client_.acks_sent();
  if (engine_) {
    m.engine = engine_->stats();
    const auto* conn = engine_->find_connection(
        FourTuple::canonical(kClientAddr, kServerAddr));
    if (conn != nullptr) {
      m.snapshot.present = true;
      m.snapshot.initial_server_rtt = conn->handshake.server_rtt();
      m.snapshot.initial_client_rtt = conn->handshake.client_rtt();
      m.snapshot.srtt_to_client = conn->rtt_to_client.srtt();
      m.snapshot.srtt_to_server = conn->rtt_to_server.srtt();
      m.snapshot.copa_cwnd = conn->copa.cwnd();
      m.snapshot.dominant = conn->dominant;
      m.snapshot.eliciting_threshold = conn->eliciting.threshold();
    }
  }

  if (cfg_.traffic.app == AppKind::kBulk) {
    m.transfer_complete = bulk_complete_t_.has_value();
    const TimeUs start = first_data_t_;
    const TimeUs finish = bulk_complete_t_.value_or(end_t_);
    if (finish > start) {
      const double bits =
          8.0 * static_cast<double>(m.transfer_complete
                                        ? cfg_.traffic.bulk_bytes
                                        : client_.unique_bytes_received());
      m.goodput_bps = bits * 1e6 / static_cast<double>(finish - start);
      m.transfer_time = finish - start;
    }
  }

  // frame metrics over completed frames, in completion order
  std::vector<TimeUs> completions;
  std::vector<DurUs> delays;
  for (const auto& f : result_.truth.frames) {
    if (f.complete_t) {
      completions.push_back(*f.complete_t);
      delays.push_back(*f.complete_t - f.create_t);
    }
  }
  std::sort(completions.begin(), completions.end());
  if (completions.size() >= 2) {
    std::vector<double> gaps;
    for (std::size_t i = 1; i < completions.size(); ++i) {
      gaps.push_back(static_cast<double>(completions[i] - completions[i - 1]));
    }
    double mean = 0;
    for (double g : gaps) {
      mean += g;
    }
    mean /= static_cast<double>(gaps.size());
    double var = 0;
    for (double g : gaps) {
      var += (g - mean) * (g - mean);
    }
    m.frame_interarrival_var_us2 = var / static_cast<double>(gaps.size());
    double j = 0;
    for (std::size_t i = 1; i < gaps.size(); ++i) {
      j += (std::abs(gaps[i] - gaps[i - 1]) - j) / 16.0;
    }
    m.frame_interarrival_rfc3550_us = j;
  }
  if (!delays.empty()) {
    std::sort(delays.begin(), delays.end());
    auto pct = [&](double p) {
      const std::size_t idx = static_cast<std::size_t>(
          std::min<double>(static_cast<double>(delays.size()) - 1,
                           std::ceil(p * static_cast<double>(delays.size())) - 1));
      return delays[idx];
    };
    m.frame_delay_p50 = pct(0.50);
    m.frame_delay_p90 = pct(0.90);
    m.frame_delay_p99 = pct(0.99);
  }

  // detector accuracy against drops on the protected sub-link (the one
  // between the middlebox and the data receiver, here the client)
  std::set<PayloadDigest> actual;
  for (const auto& p : result_.truth.packets) {
    if (!p.from_engine && p.dropped_link == 1 && p.dropped_toward_client) {
      actual.insert(p.digest);
    }
  }
  std::set<PayloadDigest> reported;
  for (const auto& ev : result_.reports) {
    for (const auto& dg : ev.lost_digests) {
      reported.insert(dg);
    }
  }
  const DetectorScore score = score_detector(actual, reported);
  m.detector_precision = score.precision;
  m.detector_recall = score.recall;
  m.true_losses_protected_link = actual.size();
  m.reported_losses = reported.size();

  if (result_.truth.link1.min_latency == std::numeric_limits<DurUs>::max()) {
    result_.truth.link1.min_latency = 0;
  }
  if (result_.truth.link2.min_latency == std::numeric_limits<DurUs>::max()) {
    result_.truth.link2.min_latency = 0;
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// public surface

DurUs LinkModel::serialization_us(std::size_t bytes) const {
  return static_cast<DurUs>(
      std::llround(static_cast<double>(bytes) * 8.0 * 1e6 / bandwidth_bps));
}

bool ge_step(GeState& state, const LossModel& m, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const double loss_rate = state.bad ? m.loss_bad : m.loss_good;
  bool drop = false;
  if (loss_rate >= 1.0) {
    drop = true;
  } else if (loss_rate > 0.0) {
    drop = uni(rng) < loss_rate;
  }
  const double p_leave = state.bad ? m.p_bad_to_good : m.p_good_to_bad;
  if (p_leave >= 1.0) {
    state.bad = !state.bad;
  } else if (p_leave > 0.0 && uni(rng) < p_leave) {
    state.bad = !state.bad;
  }
  return drop;
}

DurUs LinkModel::one_way_at(TimeUs t) const {
  double owd = static_cast<double>(one_way_delay);
  owd += drift_us_per_sec * (static_cast<double>(t) / 1e6);
  if (delay_step_at > 0 && t >= delay_step_at) {
    owd += static_cast<double>(delay_step);
  }
  return static_cast<DurUs>(std::llround(std::max(owd, 0.0)));
}

void ScenarioConfig::validate() const {
  auto check_prob = [](double p, const char* field) {
    if (p < 0.0 || p > 1.0) {
      throw std::invalid_argument(std::string("probability out of range: ") +
                                  field);
    }
  };
  for (const LinkModel* link : {&link1, &link2}) {
    if (link->bandwidth_bps <= 0) {
      throw std::invalid_argument("bandwidth_bps must be positive");
    }
    if (link->queue_capacity == 0) {
      throw std::invalid_argument("queue_capacity must be at least 1");
    }
    check_prob(link->loss.probability, "loss.probability");
    check_prob(link->loss.p_good_to_bad, "loss.p_good_to_bad");
    check_prob(link->loss.p_bad_to_good, "loss.p_bad_to_good");
    check_prob(link->loss.loss_good, "loss.loss_good");
    check_prob(link->loss.loss_bad, "loss.loss_bad");
    if (link->loss.kind == LossKind::kTargetedFrameDrop &&
        link->loss.frame_every_n == 0) {
      throw std::invalid_argument("frame_every_n must be at least 1");
    }
  }
  if (duration <= 0) {
    throw std::invalid_argument("duration must be positive");
  }
  if (traffic.app == AppKind::kRtc && traffic.rtc_fps <= 0) {
    throw std::invalid_argument("rtc_fps must be positive");
  }
}

RtcFrameShape rtc_source(double fps, double bitrate_bps) {
  RtcFrameShape shape;
  if (fps <= 0 || bitrate_bps <= 0) {
    return shape;
  }
  shape.interval = static_cast<DurUs>(std::llround(1e6 / fps));
  shape.frame_bytes =
      static_cast<std::uint64_t>(std::llround(bitrate_bps / fps / 8.0));
  shape.packets_per_frame = static_cast<std::uint32_t>(
      (shape.frame_bytes + kChunkPayload - 1) / kChunkPayload);
  return shape;
}

DetectorScore score_detector(const std::set<PayloadDigest>& actual_lost,
                             const std::set<PayloadDigest>& reported_lost) {
  DetectorScore s;
  for (const auto& d : reported_lost) {
    if (actual_lost.count(d) > 0) {
      ++s.true_positives;
    } else {
      ++s.false_positives;
    }
  }
  s.false_negatives = actual_lost.size() - s.true_positives;
  s.precision = reported_lost.empty()
                    ? 1.0
                    : static_cast<double>(s.true_positives) /
                          static_cast<double>(reported_lost.size());
  s.recall = actual_lost.empty()
                 ? 1.0
                 : static_cast<double>(s.true_positives) /
                       static_cast<double>(actual_lost.size());
  return s;
}

ScenarioResult run_scenario(const ScenarioConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Scenario scenario(cfg, seed);
  return scenario.run();
}

}  // namespace quicpep::sim
