#include "quicpep/packet.hpp"

#include <algorithm>
#include <cstdio>
#include <string>

namespace quicpep {

PayloadDigest payload_digest(std::span<const std::uint8_t> payload) {
  PayloadDigest d{};
  const std::size_t n = payload.size();
  for (std::size_t i = 0; i < 8 && i < n; ++i) {
    d[i] = payload[i];
  }
  const std::size_t tail = n < 8 ? n : 8;
  for (std::size_t i = 0; i < tail; ++i) {
    d[8 + i] = payload[n - tail + i];
  }
  return d;
}

std::string digest_hex(const PayloadDigest& d) {
  static const char* kHex = "0123456789abcdef";
  std::string out;
  out.reserve(32);
  for (std::uint8_t b : d) {
    out.push_back(kHex[b >> 4]);
    out.push_back(kHex[b & 0x0f]);
  }
  return out;
}

bool digest_from_hex(std::string_view hex, PayloadDigest& out) {
  if (hex.size() != 32) {
    return false;
  }
  auto nibble = [](char c, std::uint8_t& v) {
    if (c >= '0' && c <= '9') {
      v = static_cast<std::uint8_t>(c - '0');
    } else if (c >= 'a' && c <= 'f') {
      v = static_cast<std::uint8_t>(c - 'a' + 10);
    } else if (c >= 'A' && c <= 'F') {
      v = static_cast<std::uint8_t>(c - 'A' + 10);
    } else {
      return false;
    }
    return true;
  };
  for (std::size_t i = 0; i < 16; ++i) {
    std::uint8_t hi = 0;
    std::uint8_t lo = 0;
    if (!nibble(hex[2 * i], hi) || !nibble(hex[2 * i + 1], lo)) {
      return false;
    }
    out[i] = static_cast<std::uint8_t>((hi << 4) | lo);
  }
  return true;
}

}  // namespace quicpep
