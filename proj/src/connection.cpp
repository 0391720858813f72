#include "quicpep/connection.hpp"

#include <algorithm>

namespace quicpep {

void accumulate_volume(VolumeCounter& vc, std::uint32_t size, Direction dir) {
  vc.b_min = std::min(vc.b_min, size);
  const std::int64_t normalized = static_cast<std::int64_t>(size) - vc.b_min;
  if (dir == Direction::kClientToServer) {
    vc.v_client += normalized;
  } else if (dir == Direction::kServerToClient) {
    vc.v_server += normalized;
  }
}

Direction decide_dominant(VolumeCounter& vc, Direction prev) {
  Direction out = prev;
  if (2 * vc.v_client < vc.v_server) {
    out = Direction::kServerToClient;
  } else if (vc.v_client > 2 * vc.v_server) {
    out = Direction::kClientToServer;
  }
  vc.v_client = 0;
  vc.v_server = 0;
  return out;
}

void RetxBudget::roll_if_due(TimeUs now) {
  if (!started_) {
    started_ = true;
    window_start_ = now;
    return;
  }
  if (now - window_start_ < window_len_) {
    return;
  }
  history_.push_back(current_);
  current_ = Window{};
  window_start_ = now;
}

void RetxBudget::on_forward(TimeUs now) {
  roll_if_due(now);
  ++current_.forwarded;
}

ConnectionState* ConnectionTable::find(const FourTuple& key) {
  auto it = map_.find(key);
  return it == map_.end() ? nullptr : it->second.get();
}

ConnectionState& ConnectionTable::emplace(std::unique_ptr<ConnectionState> conn) {
  auto key = conn->key;
  auto [it, inserted] = map_.emplace(key, std::move(conn));
  return *it->second;
}

std::vector<FourTuple> ConnectionTable::touch_and_reap(TimeUs now,
                                                       DurUs idle_timeout) {
  std::vector<FourTuple> removed;
  for (auto it = map_.begin(); it != map_.end();) {
    if (now - it->second->last_activity > idle_timeout) {
      removed.push_back(it->first);
      it = map_.erase(it);
    } else {
      ++it;
    }
  }
  return removed;
}

}  // namespace quicpep
