#include "quicpep/observer.hpp"

#include <charconv>
#include <cstdio>

namespace quicpep {

namespace {

constexpr std::uint8_t kHeaderFormBit = 0x80;
constexpr std::uint8_t kFixedBit = 0x40;
constexpr std::uint32_t kQuicV1 = 0x00000001;
constexpr std::size_t kMaxCidLen = 20;

}  // namespace

std::string endpoint_text(const Endpoint& e) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%u.%u.%u.%u:%u", (e.addr >> 24) & 0xff,
                (e.addr >> 16) & 0xff, (e.addr >> 8) & 0xff, e.addr & 0xff,
                e.port);
  return buf;
}

std::optional<Endpoint> endpoint_from_text(std::string_view text) {
  Endpoint out;
  std::uint32_t octets[4] = {0, 0, 0, 0};
  std::size_t pos = 0;
  for (int i = 0; i < 4; ++i) {
    const char sep = i < 3 ? '.' : ':';
    const std::size_t end = text.find(sep, pos);
    if (end == std::string_view::npos) {
      return std::nullopt;
    }
    auto [ptr, ec] =
        std::from_chars(text.data() + pos, text.data() + end, octets[i]);
    if (ec != std::errc{} || ptr != text.data() + end || octets[i] > 255) {
      return std::nullopt;
    }
    pos = end + 1;
  }
  std::uint32_t port = 0;
  auto [ptr, ec] =
      std::from_chars(text.data() + pos, text.data() + text.size(), port);
  if (ec != std::errc{} || ptr != text.data() + text.size() || port > 65535) {
    return std::nullopt;
  }
  out.addr = (octets[0] << 24) | (octets[1] << 16) | (octets[2] << 8) | octets[3];
  out.port = static_cast<std::uint16_t>(port);
  return out;
}

std::string four_tuple_text(const FourTuple& t) {
  return endpoint_text(t.lo) + "-" + endpoint_text(t.hi);
}

std::optional<LongHeaderMeta> parse_long_header(
    std::span<const std::uint8_t> datagram) {
  if (datagram.empty()) {
    return std::nullopt;
  }
  const std::uint8_t first = datagram[0];
  if ((first & kHeaderFormBit) == 0 || (first & kFixedBit) == 0) {
    return std::nullopt;
  }
  if (datagram.size() < 7) {  // first byte + version + two CID lengths
    return std::nullopt;
  }
  LongHeaderMeta meta;
  meta.version = (static_cast<std::uint32_t>(datagram[1]) << 24) |
                 (static_cast<std::uint32_t>(datagram[2]) << 16) |
                 (static_cast<std::uint32_t>(datagram[3]) << 8) |
                 static_cast<std::uint32_t>(datagram[4]);
  if (meta.version != kQuicV1) {
    return std::nullopt;
  }
  meta.packet_type = static_cast<LongHeaderType>((first >> 4) & 0x03);

  std::size_t pos = 5;
  const std::size_t dcid_len = datagram[pos++];
  if (dcid_len > kMaxCidLen || pos + dcid_len + 1 > datagram.size()) {
    return std::nullopt;
  }
  meta.dcid.assign(datagram.begin() + pos, datagram.begin() + pos + dcid_len);
  pos += dcid_len;
  const std::size_t scid_len = datagram[pos++];
  if (scid_len > kMaxCidLen || pos + scid_len > datagram.size()) {
    return std::nullopt;
  }
  meta.scid.assign(datagram.begin() + pos, datagram.begin() + pos + scid_len);
  return meta;
}

std::optional<InitialRttSample> HandshakeTracker::track(
    const LongHeaderMeta& meta, Direction dir, TimeUs t) {
  switch (phase_) {
    case HandshakePhase::kAwaitInitial:
      if (dir == Direction::kClientToServer &&
          meta.packet_type == LongHeaderType::kInitial) {
        t_initial_ = t;
        phase_ = HandshakePhase::kAwaitServerReply;
      }
      return std::nullopt;

    case HandshakePhase::kAwaitServerReply:
      if (dir == Direction::kClientToServer &&
          meta.packet_type == LongHeaderType::kInitial) {
        t_initial_ = t;  // client retransmitted its Initial
        return std::nullopt;
      }
      if (dir == Direction::kServerToClient &&
          (meta.packet_type == LongHeaderType::kHandshake ||
           meta.packet_type == LongHeaderType::kRetry)) {
        t_server_reply_ = t;
        server_replied_with_retry_ = meta.packet_type == LongHeaderType::kRetry;
        server_rtt_ = t - t_initial_;
        phase_ = HandshakePhase::kAwaitClientAck;
        return InitialRttSample{RttSide::kToServer, server_rtt_};
      }
      return std::nullopt;

    case HandshakePhase::kAwaitClientAck: {
      const bool ack = dir == Direction::kClientToServer &&
                       (meta.packet_type == LongHeaderType::kHandshake ||
                        (server_replied_with_retry_ &&
                         meta.packet_type == LongHeaderType::kInitial));
      if (ack) {
        client_rtt_ = t - t_server_reply_;
        phase_ = HandshakePhase::kEstablished;
        return InitialRttSample{RttSide::kToClient, client_rtt_};
      }
      return std::nullopt;
    }

    case HandshakePhase::kEstablished:
      return std::nullopt;
  }
  return std::nullopt;
}

void ElicitingEstimator::on_sent() {
  ++sent_count_;
  if (sent_count_ >= window_) {
    threshold_ = estimate(sent_count_, reply_count_);
    warmed_up_ = true;
    sent_count_ = 0;
    reply_count_ = 0;
  }
}

}  // namespace quicpep
