#pragma once

#include <cstdint>

namespace quicpep {

// All timestamps and durations are integer microseconds.
using TimeUs = std::int64_t;
using DurUs = std::int64_t;

inline constexpr DurUs kMicrosPerMilli = 1'000;
inline constexpr DurUs kMicrosPerSec = 1'000'000;

constexpr DurUs ms_to_us(std::int64_t ms) { return ms * kMicrosPerMilli; }
constexpr DurUs sec_to_us(std::int64_t s) { return s * kMicrosPerSec; }

}  // namespace quicpep
