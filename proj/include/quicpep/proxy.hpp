#pragma once

#include <string>

#include "quicpep/engine.hpp"

namespace quicpep {

// Live datagram relay: a static client-side listener whose traffic is
// relayed to one upstream destination, with the engine on the path. Stands
// in for a transparent-interception deployment; the engine only ever sees
// the receive/send surface.
struct ProxyOptions {
  Endpoint listen;
  Endpoint forward;
  EngineConfig engine;
  DurUs stats_interval = kMicrosPerSec;
  std::uint16_t probe_echo_port = 0;  // 0 leaves calibration probing off
  long max_runtime_ms = 0;            // 0 = run until a signal arrives
};

// Blocks until shutdown. Returns a process exit code: 0 on clean exit,
// 3 when the environment refuses the sockets.
int run_proxy(const ProxyOptions& opts);

}  // namespace quicpep
