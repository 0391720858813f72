#include "quicpep/flowlet.hpp"

#include <algorithm>
#include <cmath>

namespace quicpep {

namespace {
constexpr double kSInvGain = 1.0 / 8.0;
}

std::optional<DurUs> FlowletTracker::flowlet_timeout() const {
  if (params_.fixed_timeout > 0) {
    return params_.fixed_timeout;
  }
  if (s_inv_ <= 0.0) {
    return std::nullopt;
  }
  return static_cast<DurUs>(std::llround(params_.alpha * s_inv_));
}

std::optional<DurUs> FlowletTracker::delta_margin() const {
  auto timeout = flowlet_timeout();
  if (!timeout) {
    return std::nullopt;
  }
  return static_cast<DurUs>(std::llround(params_.beta * static_cast<double>(*timeout)));
}

DurUs FlowletTracker::update_s_inv(DurUs gap) {
  if (s_inv_ <= 0.0) {
    s_inv_ = static_cast<double>(gap);
  } else {
    s_inv_ = (1.0 - kSInvGain) * s_inv_ + kSInvGain * static_cast<double>(gap);
  }
  return static_cast<DurUs>(std::llround(s_inv_));
}

void FlowletTracker::strip_payloads(Flowlet& fl) {
  for (auto& p : fl.sent) {
    if (p.payload) {
      buffered_bytes_ -= p.payload->size();
      p.payload.reset();
    }
  }
}

bool FlowletTracker::has_assignable() const {
  return std::any_of(active_.begin(), active_.end(), [](const Flowlet& f) {
    return f.state == FlowletState::kOpen || f.state == FlowletState::kAwaitingReplies;
  });
}

Flowlet FlowletTracker::pop_front_closed() {
  Flowlet fl = std::move(active_.front());
  active_.pop_front();
  for (const auto& p : fl.sent) {
    if (p.payload) {
      buffered_bytes_ -= p.payload->size();
    }
  }
  if (fl.state == FlowletState::kAbandoned) {
    for (auto& p : fl.sent) {
      p.payload.reset();
    }
  } else {
    // Finished flowlets keep their payload handles; the caller still needs
    // them for retransmission and releases them after processing.
    fl.state = FlowletState::kFinished;
  }
  return fl;
}

IngestResult FlowletTracker::ingest_sent(const PacketRecord& pkt) {
  IngestResult result;

  bool open_new = active_.empty();
  if (!open_new) {
    Flowlet& newest = active_.back();
    const bool appendable = newest.state == FlowletState::kOpen ||
                            newest.state == FlowletState::kAbandoned;
    if (!appendable) {
      open_new = true;
    } else {
      const DurUs gap = pkt.t - newest.sent.back().t;
      auto timeout = flowlet_timeout();
      if (timeout && gap >= *timeout) {
        if (newest.state == FlowletState::kOpen) {
          newest.state = FlowletState::kAwaitingReplies;
        }
        open_new = true;
      } else {
        // F_timeout is sampled here; later s_inv changes do not re-partition.
        update_s_inv(gap);
        const bool was_abandoned = newest.state == FlowletState::kAbandoned;
        newest.sent.push_back(pkt);
        if (was_abandoned) {
          newest.sent.back().payload.reset();
        } else {
          if (pkt.payload) {
            buffered_bytes_ += pkt.payload->size();
          }
          if (newest.sent.size() > params_.max_flowlet_packets) {
            newest.state = FlowletState::kAbandoned;
            strip_payloads(newest);
          }
        }
        result.fid = newest.fid;
        result.abandoned = newest.state == FlowletState::kAbandoned;
        return result;
      }
    }
  }

  if (open_new && active_.size() >= params_.max_active_flowlets) {
    result.closed.push_back(pop_front_closed());
  }

  Flowlet fl;
  fl.fid = next_fid_++;
  fl.state = FlowletState::kOpen;
  fl.sent.push_back(pkt);
  if (pkt.payload) {
    buffered_bytes_ += pkt.payload->size();
  }
  active_.push_back(std::move(fl));
  result.fid = active_.back().fid;
  return result;
}

AssignResult FlowletTracker::assign_reply(const PacketRecord& pkt, DurUs rtt) {
  AssignResult result;
  if (!has_assignable()) {
    return result;
  }
  auto margin = delta_margin();
  if (!margin) {
    return result;
  }

  const TimeUs flowlets_begin = active_.front().first_sent_t();
  const TimeUs flowlets_end = active_.back().last_sent_t();
  const TimeUs t_start = flowlets_begin + rtt - *margin;
  const TimeUs t_end = flowlets_end + rtt + *margin;
  if (pkt.t < t_start || pkt.t > t_end) {
    return result;
  }

  const TimeUs projected = pkt.t - rtt;
  std::size_t best = 0;
  DurUs best_dist = 0;
  bool have_best = false;
  for (std::size_t i = 0; i < active_.size(); ++i) {
    const Flowlet& fl = active_[i];
    DurUs dist = 0;
    if (projected < fl.first_sent_t()) {
      dist = fl.first_sent_t() - projected;
    } else if (projected > fl.last_sent_t()) {
      dist = projected - fl.last_sent_t();
    }
    // Ties go to the later flowlet: replies that late for an earlier
    // flowlet are more likely stale.
    if (!have_best || dist <= best_dist) {
      best = i;
      best_dist = dist;
      have_best = true;
    }
  }

  // Everything strictly earlier than the assigned flowlet will see no
  // further replies.
  for (std::size_t i = 0; i < best; ++i) {
    result.closed.push_back(pop_front_closed());
  }
  Flowlet& chosen = active_.front();
  chosen.replies.push_back(pkt);
  result.outcome = ReplyOutcome::kAssigned;
  result.fid = chosen.fid;
  return result;
}

std::vector<Flowlet> FlowletTracker::sweep(TimeUs now, DurUs rtt) {
  std::vector<Flowlet> closed;
  auto timeout = flowlet_timeout();
  auto margin = delta_margin();
  if (!timeout || !margin) {
    return closed;
  }

  if (!active_.empty()) {
    Flowlet& newest = active_.back();
    if (newest.state == FlowletState::kOpen &&
        now - newest.last_sent_t() >= *timeout) {
      newest.state = FlowletState::kAwaitingReplies;
    }
  }
  // In-window replies for a flowlet all arrive by last_sent + RTT + margin;
  // past that the flowlet is finished.
  while (!active_.empty()) {
    Flowlet& oldest = active_.front();
    if (oldest.state == FlowletState::kOpen) {
      break;
    }
    if (now <= oldest.last_sent_t() + rtt + *margin) {
      break;
    }
    closed.push_back(pop_front_closed());
  }
  return closed;
}

std::optional<TimeUs> FlowletTracker::next_deadline(DurUs rtt) const {
  auto timeout = flowlet_timeout();
  auto margin = delta_margin();
  if (!timeout || !margin || active_.empty()) {
    return std::nullopt;
  }
  std::optional<TimeUs> deadline;
  const Flowlet& newest = active_.back();
  if (newest.state == FlowletState::kOpen) {
    deadline = newest.last_sent_t() + *timeout;
  }
  const Flowlet& oldest = active_.front();
  if (oldest.state != FlowletState::kOpen) {
    const TimeUs finish_at = oldest.last_sent_t() + rtt + *margin + 1;
    if (!deadline || finish_at < *deadline) {
      deadline = finish_at;
    }
  }
  return deadline;
}

std::size_t FlowletTracker::clear_matched() {
  std::size_t cleared = 0;
  for (auto it = active_.begin(); it != active_.end();) {
    if (!it->replies.empty()) {
      strip_payloads(*it);
      it = active_.erase(it);
      ++cleared;
    } else {
      ++it;
    }
  }
  return cleared;
}

std::vector<Flowlet> FlowletTracker::finish_all() {
  std::vector<Flowlet> closed;
  while (!active_.empty()) {
    Flowlet& fl = active_.front();
    if (fl.state == FlowletState::kOpen) {
      fl.state = FlowletState::kAwaitingReplies;
    }
    closed.push_back(pop_front_closed());
  }
  return closed;
}

bool FlowletTracker::abandon_oldest() {
  for (auto& fl : active_) {
    if (fl.state != FlowletState::kAbandoned) {
      fl.state = FlowletState::kAbandoned;
      strip_payloads(fl);
      return true;
    }
  }
  return false;
}

}  // namespace quicpep
