#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "quicpep/time.hpp"

namespace quicpep {

enum class Direction : std::uint8_t {
  kClientToServer,
  kServerToClient,
  kUnknown,
};

// Which endpoint an RTT estimate runs to, from the middlebox.
enum class RttSide : std::uint8_t { kToClient, kToServer };

constexpr Direction opposite(Direction d) {
  switch (d) {
    case Direction::kClientToServer:
      return Direction::kServerToClient;
    case Direction::kServerToClient:
      return Direction::kClientToServer;
    default:
      return Direction::kUnknown;
  }
}

using Bytes = std::vector<std::uint8_t>;

// Buffered datagram payload, shared between the flowlet store and the
// retransmission path and dropped as soon as the flowlet is done with it.
using PayloadHandle = std::shared_ptr<const Bytes>;

// 16-octet packet token: first 8 + last 8 payload octets, zero padded.
using PayloadDigest = std::array<std::uint8_t, 16>;

PayloadDigest payload_digest(std::span<const std::uint8_t> payload);
std::string digest_hex(const PayloadDigest& d);
bool digest_from_hex(std::string_view hex, PayloadDigest& out);

// One datagram as observed by the middlebox.
struct PacketRecord {
  std::uint64_t id = 0;  // per connection, increasing in arrival order
  TimeUs t = 0;          // arrival timestamp at the middlebox
  std::uint32_t size = 0;
  Direction dir = Direction::kUnknown;
  PayloadHandle payload;
  std::optional<PayloadDigest> digest;
  bool is_retransmit = false;
};

}  // namespace quicpep
