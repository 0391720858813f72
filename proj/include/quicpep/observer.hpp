#pragma once

#include <compare>
#include <cstdint>
#include <optional>
#include <span>
#include <string>

#include "quicpep/packet.hpp"
#include "quicpep/time.hpp"

namespace quicpep {

struct Endpoint {
  std::uint32_t addr = 0;  // IPv4-style host value
  std::uint16_t port = 0;

  auto operator<=>(const Endpoint&) const = default;
};

std::string endpoint_text(const Endpoint& e);
std::optional<Endpoint> endpoint_from_text(std::string_view text);

// Connection key; both directions of a flow canonicalize to the same key.
struct FourTuple {
  Endpoint lo;
  Endpoint hi;

  static FourTuple canonical(const Endpoint& a, const Endpoint& b) {
    return a <= b ? FourTuple{a, b} : FourTuple{b, a};
  }

  auto operator<=>(const FourTuple&) const = default;
};

std::string four_tuple_text(const FourTuple& t);

enum class LongHeaderType : std::uint8_t {
  kInitial = 0,
  kZeroRtt = 1,
  kHandshake = 2,
  kRetry = 3,
};

struct LongHeaderMeta {
  LongHeaderType packet_type = LongHeaderType::kInitial;
  std::uint32_t version = 0;
  Bytes dcid;
  Bytes scid;
};

// Parses the invariant part of a QUIC v1 long header. Short headers,
// other versions, and malformed headers all come back empty; the caller
// forwards those untouched.
std::optional<LongHeaderMeta> parse_long_header(
    std::span<const std::uint8_t> datagram);

enum class HandshakePhase : std::uint8_t {
  kAwaitInitial,
  kAwaitServerReply,
  kAwaitClientAck,
  kEstablished,
};

struct InitialRttSample {
  RttSide side = RttSide::kToServer;
  DurUs rtt = 0;
};

// Walks the long-header exchange at the start of a connection and yields
// one RTT sample per side: client Initial -> server reply measures the
// server leg, the client's follow-up measures the client leg. A Retry
// counts as the server reply, with the client's fresh Initial as its ack.
class HandshakeTracker {
 public:
  std::optional<InitialRttSample> track(const LongHeaderMeta& meta,
                                        Direction dir, TimeUs t);

  HandshakePhase phase() const { return phase_; }
  bool established() const { return phase_ == HandshakePhase::kEstablished; }
  DurUs server_rtt() const { return server_rtt_; }
  DurUs client_rtt() const { return client_rtt_; }
  // Sum of both handshake samples; probe pacing falls back to this.
  DurUs handshake_rtt_sum() const { return server_rtt_ + client_rtt_; }

 private:
  HandshakePhase phase_ = HandshakePhase::kAwaitInitial;
  bool server_replied_with_retry_ = false;
  TimeUs t_initial_ = 0;
  TimeUs t_server_reply_ = 0;
  DurUs server_rtt_ = 0;
  DurUs client_rtt_ = 0;
};

// Infers whether the receiver acknowledges every ack-eliciting packet or
// every second one, from the reply/sent ratio over tumbling windows of
// dominant-direction packets.
class ElicitingEstimator {
 public:
  explicit ElicitingEstimator(std::size_t window = 200) : window_(window) {}

  void on_sent();
  void on_reply() { ++reply_count_; }

  // Ratio strictly above 60% means a threshold-1 receiver.
  int threshold() const { return threshold_; }
  bool warmed_up() const { return warmed_up_; }

  std::uint64_t sent_count() const { return sent_count_; }
  std::uint64_t reply_count() const { return reply_count_; }

  static int estimate(std::uint64_t sent, std::uint64_t replies) {
    return replies * 5 > sent * 3 ? 1 : 2;
  }

 private:
  std::size_t window_;
  std::uint64_t sent_count_ = 0;
  std::uint64_t reply_count_ = 0;
  int threshold_ = 2;
  bool warmed_up_ = false;
};

}  // namespace quicpep
