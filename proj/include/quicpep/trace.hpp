#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "quicpep/engine.hpp"
#include "quicpep/observer.hpp"
#include "quicpep/packet.hpp"
#include "quicpep/sim.hpp"

namespace quicpep {

// One line of the middlebox trace file:
//   <t_us> <a2b|b2a> <size> <lo>-<hi> <flags|-> <digest|->
// flags is a comma list from {initial,zerortt,handshake,retry,retx}.
struct TraceRecord {
  TimeUs t_us = 0;
  bool a_to_b = true;  // relative to the canonical tuple (a == lo)
  std::uint32_t size = 0;
  FourTuple conn;
  std::optional<LongHeaderType> long_header;
  bool retransmit = false;
  std::optional<PayloadDigest> digest;
};

std::string format_trace_record(const TraceRecord& rec);
std::optional<TraceRecord> parse_trace_record(std::string_view line);

struct TraceFile {
  std::vector<TraceRecord> records;
  std::size_t malformed = 0;
  std::size_t total_lines = 0;
  // From the optional "# end_us=N" header: when the observation window
  // closed. Replay stops its clock there so late flowlets settle (or not)
  // exactly as they did live.
  std::optional<TimeUs> end_us;
};

TraceFile read_trace_file(std::istream& in);

// Probe sidecar, one line per completed calibration sample:
//   <t_us> <target> <rtt_us>
struct ProbeRecord {
  TimeUs t_us = 0;
  Endpoint target;
  DurUs rtt_us = 0;
};

std::string format_probe_record(const ProbeRecord& rec);
std::optional<ProbeRecord> parse_probe_record(std::string_view line);
std::vector<ProbeRecord> read_probe_file(std::istream& in);

// --- trace analysis -------------------------------------------------------

struct FlowletStatsRow {
  DurUs timeout_us = 0;
  std::uint64_t flowlets = 0;
  double avg_packets = 0.0;
  double avg_duration_us = 0.0;
};

// Partitions the dominant direction (larger byte volume) of each
// connection at gaps >= timeout and averages across connections.
std::vector<FlowletStatsRow> analyze_trace(const std::vector<TraceRecord>& recs,
                                           const std::vector<DurUs>& timeouts);

// --- offline replay -------------------------------------------------------

struct ReplaySummary {
  std::size_t records = 0;
  std::size_t connections = 0;
  std::vector<ReportEvent> reports;
  std::vector<std::string> rtt_series;  // "<t_us> <conn> <srtt_us>" lines
  EngineStats stats;
};

// Runs the full inference pipeline over a recorded trace with emission
// disabled. Probe samples from the sidecar are injected at their times.
ReplaySummary replay_trace(const std::vector<TraceRecord>& recs,
                           const std::vector<ProbeRecord>& probes,
                           EngineConfig config,
                           std::optional<TimeUs> end_hint = std::nullopt);

// Canonical one-line rendering of a report, used both by the simulator
// output and the replay output so the two can be diffed.
std::string format_report_line(const ReportEvent& ev);

}  // namespace quicpep
