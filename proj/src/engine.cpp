#include "quicpep/engine.hpp"

#include <algorithm>
#include <cstdlib>
#include <deque>

namespace quicpep {

namespace {
constexpr DurUs kReapInterval = 1 * kMicrosPerSec;
}

Engine::Engine(EngineHost& host, ProbeDriver* probe_driver, EngineConfig config)
    : host_(host), probe_driver_(probe_driver), config_(config) {}

void Engine::forward(std::span<const std::uint8_t> bytes, const Endpoint& src,
                     const Endpoint& dst) {
  if (config_.emit) {
    host_.send(bytes, src, dst);
  }
}

DurUs Engine::receiver_rtt_or_zero(ConnectionState& conn) const {
  RttTracker& rtt = conn.receiver_rtt();
  return rtt.initialized() ? rtt.srtt() : 0;
}

ConnectionState& Engine::create_connection(const FourTuple& key,
                                           const Endpoint& client,
                                           const Endpoint& server, TimeUs now) {
  FlowletParams fparams;
  fparams.alpha = config_.alpha;
  fparams.beta = config_.beta;
  fparams.max_flowlet_packets = config_.flowlet_cap;
  fparams.max_active_flowlets = config_.max_active_flowlets;

  auto conn = std::make_unique<ConnectionState>(
      key, client, server, fparams, config_.copa_delta, config_.retx_cap_ratio,
      config_.retx_budget_window, config_.rtt_min_window,
      config_.eliciting_window);
  conn->last_activity = now;
  conn->volume.epoch_start = now;
  conn->volume.epoch_len = config_.default_epoch;
  ++stats_.connections_created;
  return table_.emplace(std::move(conn));
}

void Engine::on_datagram(std::span<const std::uint8_t> bytes,
                         const Endpoint& src, const Endpoint& dst, TimeUs now,
                         bool retransmit_record,
                         const PayloadDigest* digest_override) {
  ++stats_.datagrams;
  const FourTuple key = FourTuple::canonical(src, dst);
  ConnectionState* conn = table_.find(key);
  const auto meta = parse_long_header(bytes);

  if (conn == nullptr) {
    if (meta && meta->packet_type == LongHeaderType::kInitial &&
        !retransmit_record) {
      conn = &create_connection(key, src, dst, now);
    } else {
      // Not ours to interpret; forward untouched and keep no state.
      ++stats_.passthrough_unknown;
      ++stats_.forwarded;
      forward(bytes, src, dst);
      return;
    }
  }

  conn->last_activity = now;
  service_connection(*conn, now);

  if (retransmit_record) {
    // Trace replay of one of our own emissions: it joins the flowlet
    // store like the live copy did, but is not independent traffic.
    if (conn->handshake.established() &&
        conn->dominant != Direction::kUnknown) {
      PacketRecord pkt;
      pkt.id = conn->next_packet_id++;
      pkt.t = now;
      pkt.size = static_cast<std::uint32_t>(bytes.size());
      pkt.dir = conn->dominant;
      pkt.digest = digest_override ? *digest_override : payload_digest(bytes);
      pkt.is_retransmit = true;
      conn->meter.on_retransmit();
      process_closed(*conn, conn->flowlets.ingest_sent(pkt).closed, now);
    }
    reschedule(now);
    return;
  }

  const Direction dir = conn->direction_of(src);
  accumulate_volume(conn->volume, static_cast<std::uint32_t>(bytes.size()), dir);

  if (meta && !conn->handshake.established()) {
    if (auto sample = conn->handshake.track(*meta, dir, now)) {
      conn->rtt_for(sample->side).add_sample(sample->rtt, now);
      if (conn->handshake.established()) {
        conn->next_probe_t = now + conn->handshake.handshake_rtt_sum();
      }
    }
  }

  maybe_update_dominance(*conn, now);

  bool forward_now = true;
  if (conn->handshake.established() && conn->dominant != Direction::kUnknown) {
    PacketRecord pkt;
    pkt.id = conn->next_packet_id++;
    pkt.t = now;
    pkt.size = static_cast<std::uint32_t>(bytes.size());
    pkt.dir = dir;
    if (digest_override) {
      pkt.digest = *digest_override;
    }
    if (dir == conn->dominant) {
      handle_dominant(*conn, pkt, bytes, now);
    } else {
      forward_now = handle_reply(*conn, pkt, bytes, src, dst, now);
    }
  }

  if (forward_now) {
    ++stats_.forwarded;
    forward(bytes, src, dst);
  }
  roll_meter(*conn, now);
  reschedule(now);
}

void Engine::handle_dominant(ConnectionState& conn, const PacketRecord& base,
                             std::span<const std::uint8_t> bytes, TimeUs now) {
  conn.eliciting.on_sent();

  RttTracker& recv_rtt = conn.receiver_rtt();
  if (recv_rtt.initialized() && conn.last_dominant_t > 0 &&
      now - conn.last_dominant_t >= 4 * recv_rtt.srtt()) {
    conn.idle_gap_sent_t = now;
  }
  conn.last_dominant_t = now;

  conn.budget.on_forward(now);
  conn.meter.on_forward();
  ++conn.forwarded_dominant_total;

  PacketRecord pkt = base;
  pkt.payload = std::make_shared<const Bytes>(bytes.begin(), bytes.end());
  if (!pkt.digest) {
    pkt.digest = payload_digest(bytes);
  }

  process_closed(conn, conn.flowlets.ingest_sent(pkt).closed, now);
  enforce_buffer_limits(conn);
}

bool Engine::handle_reply(ConnectionState& conn, const PacketRecord& base,
                          std::span<const std::uint8_t> bytes,
                          const Endpoint& src, const Endpoint& dst,
                          TimeUs now) {
  conn.eliciting.on_reply();

  if (conn.idle_gap_sent_t) {
    const DurUs sample = now - *conn.idle_gap_sent_t;
    conn.idle_gap_sent_t.reset();
    if (sample > 0) {
      apply_calibration(conn, ProbeSample{sample, now, ProbeSource::kIdleGap});
    }
  }

  RttTracker& recv_rtt = conn.receiver_rtt();
  if (recv_rtt.initialized()) {
    AssignResult res = conn.flowlets.assign_reply(base, recv_rtt.srtt());
    if (res.outcome == ReplyOutcome::kAssigned) {
      ++stats_.replies_assigned;
    } else {
      ++stats_.replies_discarded;
    }
    process_closed(conn, std::move(res.closed), now);
  }

  if (conn.enforcement.stage() == EnforcementStage::kShapeReplies) {
    const DurUs e2e = conn.e2e_srtt(config_.default_epoch);
    const ReplyShaper::Action action =
        conn.shaper.on_reply(now, conn.enforcement.shape_params(), e2e);
    if (action == ReplyShaper::Action::kHold && !conn.held_reply) {
      conn.held_reply = HeldReply{Bytes(bytes.begin(), bytes.end()), src, dst};
      ++stats_.replies_held;
      return false;
    }
  }
  return true;
}

void Engine::process_closed(ConnectionState& conn, std::vector<Flowlet> closed,
                            TimeUs now) {
  std::deque<Flowlet> queue(std::make_move_iterator(closed.begin()),
                            std::make_move_iterator(closed.end()));
  while (!queue.empty()) {
    Flowlet fl = std::move(queue.front());
    queue.pop_front();
    if (fl.state == FlowletState::kAbandoned) {
      ++stats_.flowlets_abandoned;
      continue;
    }
    ++stats_.flowlets_finished;

    const DurUs srtt_recv = receiver_rtt_or_zero(conn);
    if (srtt_recv <= 0) {
      continue;
    }
    MatchResult mr = match_flowlet(fl, srtt_recv);
    fl.match = mr;

    RttTracker& recv_rtt = conn.receiver_rtt();
    const std::size_t folded = recv_rtt.add_flowlet_samples(mr, fl);
    if (folded > 0) {
      if (auto margin = conn.flowlets.delta_margin()) {
        recv_rtt.set_delta_margin(*margin);
      }
      if (auto rtt_min = conn.e2e_rtt_min(now)) {
        conn.copa.on_rtt_update(conn.e2e_srtt(config_.default_epoch), *rtt_min,
                                now);
        conn.copa.recompute_target_rate(*rtt_min);
      }
    }

    // Loss inference waits for the first eliciting-threshold estimate;
    // retransmitting on a guessed threshold risks a false-positive storm.
    if (!conn.eliciting.warmed_up()) {
      continue;
    }
    LossParams params;
    params.eliciting_threshold = conn.eliciting.threshold();
    params.close_interval = config_.close_interval;
    LossReport report = detect(fl, mr, params);
    ++stats_.reports;
    stats_.packets_reported_lost += report.lost.size();

    if (report_hook) {
      ReportEvent ev;
      ev.conn = conn.key;
      ev.fid = fl.fid;
      ev.report = report;
      for (std::uint64_t id : report.lost) {
        for (const auto& p : fl.sent) {
          if (p.id == id && p.digest) {
            ev.lost_digests.push_back(*p.digest);
            break;
          }
        }
      }
      report_hook(ev);
    }

    if (!report.lost.empty()) {
      std::vector<Flowlet> overflow;
      retransmit_into(conn, fl, report, now, overflow);
      for (auto& extra : overflow) {
        queue.push_back(std::move(extra));
      }
    }
  }
}

void Engine::retransmit_into(ConnectionState& conn, Flowlet& fl,
                             const LossReport& report, TimeUs now,
                             std::vector<Flowlet>& overflow) {
  if (!config_.emit || report.lost.empty()) {
    return;
  }
  if (conn.enforcement.stage() != EnforcementStage::kOff) {
    stats_.retx_blocked_stage += report.lost.size();
    return;
  }
  const Endpoint& sender = conn.sender_of(conn.dominant);
  const Endpoint& receiver = conn.receiver_of(conn.dominant);

  for (std::size_t i = 0; i < report.lost.size(); ++i) {
    const std::uint64_t id = report.lost[i];
    const PacketRecord* orig = nullptr;
    for (const auto& p : fl.sent) {
      if (p.id == id) {
        orig = &p;
        break;
      }
    }
    if (orig == nullptr || orig->is_retransmit || !orig->payload) {
      continue;  // once-only rule, or the buffer was already released
    }
    conn.budget.roll_if_due(now);
    if (!conn.budget.allows()) {
      stats_.retx_blocked_budget += report.lost.size() - i;
      break;
    }
    if (retransmit_hook) {
      retransmit_hook(*orig->payload, sender, receiver, now);
    }
    host_.send(*orig->payload, sender, receiver);
    conn.budget.on_retransmit();
    conn.meter.on_retransmit();
    ++conn.retransmitted_total;
    ++stats_.retransmitted;

    PacketRecord copy;
    copy.id = conn.next_packet_id++;
    copy.t = now;
    copy.size = orig->size;
    copy.dir = conn.dominant;
    copy.digest = orig->digest;
    copy.is_retransmit = true;
    IngestResult ing = conn.flowlets.ingest_sent(copy);
    for (auto& extra : ing.closed) {
      overflow.push_back(std::move(extra));
    }
  }
}

void Engine::roll_meter(ConnectionState& conn, TimeUs now) {
  const DurUs e2e = conn.e2e_srtt(config_.default_epoch);
  auto sample = conn.meter.maybe_roll(now, e2e);
  if (!sample) {
    return;
  }
  auto rtt_min = conn.e2e_rtt_min(now);
  if (!rtt_min) {
    return;
  }
  const double target = conn.copa.recompute_target_rate(*rtt_min);
  const EnforcementStage stage =
      conn.enforcement.step(*sample, target, now, e2e);
  if (stage != EnforcementStage::kShapeReplies && conn.shaper.holding()) {
    release_held_reply(conn);
  }
}

void Engine::maybe_update_dominance(ConnectionState& conn, TimeUs now) {
  if (now - conn.volume.epoch_start < conn.volume.epoch_len) {
    return;
  }
  const Direction next = decide_dominant(conn.volume, conn.dominant);
  conn.volume.epoch_start = now;
  conn.volume.epoch_len = conn.e2e_srtt(config_.default_epoch);

  if (next == conn.dominant) {
    return;
  }
  if (conn.dominant != Direction::kUnknown) {
    // Direction flip: settle the old direction with what it has, then
    // start fresh for the new one.
    process_closed(conn, conn.flowlets.finish_all(), now);
    FlowletParams fparams;
    fparams.alpha = config_.alpha;
    fparams.beta = config_.beta;
    fparams.max_flowlet_packets = config_.flowlet_cap;
    fparams.max_active_flowlets = config_.max_active_flowlets;
    conn.flowlets = FlowletTracker(fparams);
    conn.eliciting = ElicitingEstimator(config_.eliciting_window);
    conn.last_dominant_t = 0;
    conn.idle_gap_sent_t.reset();
  }
  conn.dominant = next;
}

void Engine::apply_calibration(ConnectionState& conn,
                               const ProbeSample& sample) {
  RttTracker& recv = conn.receiver_rtt();
  auto margin = conn.flowlets.delta_margin();
  if (!margin || !recv.initialized()) {
    // No jitter tolerance to test against yet; treat as a plain sample.
    recv.add_sample(sample.rtt, sample.t);
  } else if (sample.source == ProbeSource::kIdleGap) {
    // An idle-gap sample inflates by a packet spacing whenever the
    // idle-breaking packet itself was lost; it may fold but never reset.
    recv.set_delta_margin(*margin);
    if (std::llabs(sample.rtt - recv.srtt()) <= *margin) {
      recv.add_sample(sample.rtt, sample.t);
    }
  } else {
    recv.set_delta_margin(*margin);
    if (recv.calibrate(sample) == CalibrationOutcome::kReset) {
      ++stats_.calibration_resets;
      stats_.flowlets_cleared_on_reset += conn.flowlets.clear_matched();
    }
  }
  if (auto rtt_min = conn.e2e_rtt_min(sample.t)) {
    conn.copa.on_rtt_update(conn.e2e_srtt(config_.default_epoch), *rtt_min,
                            sample.t);
    conn.copa.recompute_target_rate(*rtt_min);
  }
}

void Engine::service_probes(ConnectionState& conn, TimeUs now) {
  if (!config_.probing || probe_driver_ == nullptr ||
      !conn.handshake.established() ||
      conn.dominant == Direction::kUnknown) {
    return;
  }
  if (conn.probe_outstanding && now >= conn.probe_deadline_t) {
    conn.probe_outstanding = false;
    ++stats_.probes_timed_out;
    conn.next_probe_t = schedule_next_probe(
        conn.rtt_to_client, conn.rtt_to_server, now,
        std::max<DurUs>(conn.handshake.handshake_rtt_sum(), 1));
  }
  if (!conn.probe_outstanding && conn.next_probe_t > 0 &&
      now >= conn.next_probe_t) {
    const std::uint64_t token = next_probe_token_++;
    if (probe_driver_->request(conn.receiver_of(conn.dominant), token)) {
      conn.probe_outstanding = true;
      conn.probe_token = token;
      conn.probe_sent_t = now;
      const DurUs srtt = receiver_rtt_or_zero(conn);
      conn.probe_deadline_t =
          now + 2 * (srtt > 0 ? srtt : conn.e2e_srtt(config_.default_epoch));
      ++stats_.probes_sent;
    } else {
      conn.next_probe_t = now + conn.e2e_srtt(config_.default_epoch);
    }
  }
}

void Engine::inject_probe_sample(const Endpoint& target, DurUs rtt,
                                 TimeUs now) {
  for (auto& [key, conn] : table_) {
    if (conn->client == target || conn->server == target) {
      apply_calibration(*conn, ProbeSample{rtt, now, ProbeSource::kProbe});
      return;
    }
  }
}

void Engine::on_probe_result(std::uint64_t token, DurUs rtt, TimeUs now) {
  for (auto& [key, conn] : table_) {
    if (conn->probe_outstanding && conn->probe_token == token) {
      conn->probe_outstanding = false;
      apply_calibration(*conn, ProbeSample{rtt, now, ProbeSource::kProbe});
      conn->next_probe_t = schedule_next_probe(
          conn->rtt_to_client, conn->rtt_to_server, now,
          std::max<DurUs>(conn->handshake.handshake_rtt_sum(), 1));
      reschedule(now);
      return;
    }
  }
}

void Engine::enforce_buffer_limits(ConnectionState& conn) {
  while (conn.flowlets.buffered_bytes() > config_.per_conn_buffer_bytes) {
    if (!conn.flowlets.abandon_oldest()) {
      break;
    }
    ++stats_.flowlets_abandoned;
  }
  std::size_t total = 0;
  for (auto& [key, c] : table_) {
    total += c->flowlets.buffered_bytes();
  }
  while (total > config_.global_buffer_bytes) {
    ConnectionState* fattest = nullptr;
    for (auto& [key, c] : table_) {
      if (fattest == nullptr ||
          c->flowlets.buffered_bytes() > fattest->flowlets.buffered_bytes()) {
        fattest = c.get();
      }
    }
    if (fattest == nullptr || fattest->flowlets.buffered_bytes() == 0) {
      break;
    }
    const std::size_t before = fattest->flowlets.buffered_bytes();
    if (!fattest->flowlets.abandon_oldest()) {
      break;
    }
    ++stats_.flowlets_abandoned;
    total -= before - fattest->flowlets.buffered_bytes();
  }
}

void Engine::release_held_reply(ConnectionState& conn) {
  if (conn.held_reply) {
    ++stats_.forwarded;
    forward(conn.held_reply->bytes, conn.held_reply->src, conn.held_reply->dst);
    conn.held_reply.reset();
  }
  conn.shaper.on_released();
}

void Engine::service_connection(ConnectionState& conn, TimeUs now) {
  if (conn.handshake.established() && conn.dominant != Direction::kUnknown) {
    const DurUs srtt_recv = receiver_rtt_or_zero(conn);
    if (srtt_recv > 0) {
      process_closed(conn, conn.flowlets.sweep(now, srtt_recv), now);
    }
  }
  service_probes(conn, now);
  roll_meter(conn, now);
  if (conn.shaper.holding() &&
      (conn.shaper.release_due(now) ||
       conn.enforcement.stage() != EnforcementStage::kShapeReplies)) {
    release_held_reply(conn);
  }
}

void Engine::on_timer(TimeUs now) {
  for (auto& [key, conn] : table_) {
    (void)key;
    service_connection(*conn, now);
  }
  if (now - last_reap_t_ >= kReapInterval) {
    last_reap_t_ = now;
    for (auto& [key, conn] : table_) {
      if (now - conn->last_activity > config_.idle_timeout) {
        release_held_reply(*conn);
      }
    }
    stats_.connections_reaped +=
        table_.touch_and_reap(now, config_.idle_timeout).size();
  }
  reschedule(now);
}

void Engine::flush(TimeUs now) {
  (void)now;
  for (auto& [key, conn] : table_) {
    release_held_reply(*conn);
  }
}

std::optional<TimeUs> Engine::connection_deadline(ConnectionState& conn) const {
  std::optional<TimeUs> deadline;
  auto consider = [&deadline](std::optional<TimeUs> t) {
    if (t && (!deadline || *t < *deadline)) {
      deadline = t;
    }
  };
  if (conn.handshake.established() && conn.dominant != Direction::kUnknown) {
    RttTracker& rtt = conn.receiver_rtt();
    if (rtt.initialized()) {
      consider(conn.flowlets.next_deadline(rtt.srtt()));
    }
    if (config_.probing && probe_driver_ != nullptr) {
      if (conn.probe_outstanding) {
        consider(conn.probe_deadline_t);
      } else if (conn.next_probe_t > 0) {
        consider(conn.next_probe_t);
      }
    }
  }
  consider(conn.shaper.next_deadline());
  return deadline;
}

void Engine::reschedule(TimeUs now) {
  std::optional<TimeUs> deadline;
  for (auto& [key, conn] : table_) {
    auto d = connection_deadline(*conn);
    if (d && (!deadline || *d < *deadline)) {
      deadline = d;
    }
  }
  if (table_.size() > 0) {
    const TimeUs reap_at = last_reap_t_ + kReapInterval;
    if (!deadline || reap_at < *deadline) {
      deadline = reap_at;
    }
  }
  if (deadline) {
    host_.request_wakeup(std::max(*deadline, now));
  }
}

}  // namespace quicpep
