#include "quicpep/trace.hpp"

#include <algorithm>
#include <charconv>
#include <istream>
#include <map>
#include <sstream>

namespace quicpep {

namespace {

const char* long_header_token(LongHeaderType t) {
  switch (t) {
    case LongHeaderType::kInitial:
      return "initial";
    case LongHeaderType::kZeroRtt:
      return "zerortt";
    case LongHeaderType::kHandshake:
      return "handshake";
    case LongHeaderType::kRetry:
      return "retry";
  }
  return "?";
}

std::optional<LongHeaderType> long_header_from_token(std::string_view tok) {
  if (tok == "initial") return LongHeaderType::kInitial;
  if (tok == "zerortt") return LongHeaderType::kZeroRtt;
  if (tok == "handshake") return LongHeaderType::kHandshake;
  if (tok == "retry") return LongHeaderType::kRetry;
  return std::nullopt;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const std::size_t end = s.find(sep, pos);
    if (end == std::string_view::npos) {
      out.push_back(s.substr(pos));
      break;
    }
    out.push_back(s.substr(pos, end - pos));
    pos = end + 1;
  }
  return out;
}

template <typename T>
bool parse_int(std::string_view s, T& out) {
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc{} && ptr == s.data() + s.size();
}

std::optional<FourTuple> tuple_from_text(std::string_view text) {
  const std::size_t dash = text.find('-');
  if (dash == std::string_view::npos) {
    return std::nullopt;
  }
  auto lo = endpoint_from_text(text.substr(0, dash));
  auto hi = endpoint_from_text(text.substr(dash + 1));
  if (!lo || !hi) {
    return std::nullopt;
  }
  return FourTuple::canonical(*lo, *hi);
}

}  // namespace

std::string format_trace_record(const TraceRecord& rec) {
  std::string flags;
  if (rec.long_header) {
    flags = long_header_token(*rec.long_header);
  }
  if (rec.retransmit) {
    if (!flags.empty()) {
      flags += ',';
    }
    flags += "retx";
  }
  if (flags.empty()) {
    flags = "-";
  }
  std::ostringstream os;
  os << rec.t_us << ' ' << (rec.a_to_b ? "a2b" : "b2a") << ' ' << rec.size
     << ' ' << four_tuple_text(rec.conn) << ' ' << flags << ' '
     << (rec.digest ? digest_hex(*rec.digest) : std::string("-"));
  return os.str();
}

std::optional<TraceRecord> parse_trace_record(std::string_view line) {
  if (line.empty() || line[0] == '#') {
    return std::nullopt;
  }
  auto fields = split(line, ' ');
  if (fields.size() != 6) {
    return std::nullopt;
  }
  TraceRecord rec;
  if (!parse_int(fields[0], rec.t_us)) {
    return std::nullopt;
  }
  if (fields[1] == "a2b") {
    rec.a_to_b = true;
  } else if (fields[1] == "b2a") {
    rec.a_to_b = false;
  } else {
    return std::nullopt;
  }
  if (!parse_int(fields[2], rec.size) || rec.size == 0) {
    return std::nullopt;
  }
  auto conn = tuple_from_text(fields[3]);
  if (!conn) {
    return std::nullopt;
  }
  rec.conn = *conn;
  if (fields[4] != "-") {
    for (auto tok : split(fields[4], ',')) {
      if (tok == "retx") {
        rec.retransmit = true;
      } else if (auto lh = long_header_from_token(tok)) {
        rec.long_header = lh;
      } else {
        return std::nullopt;
      }
    }
  }
  if (fields[5] != "-") {
    PayloadDigest d;
    if (!digest_from_hex(fields[5], d)) {
      return std::nullopt;
    }
    rec.digest = d;
  }
  return rec;
}

TraceFile read_trace_file(std::istream& in) {
  TraceFile out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') {
      const std::string_view key = "# end_us=";
      if (line.rfind(key, 0) == 0) {
        TimeUs end = 0;
        if (parse_int(std::string_view(line).substr(key.size()), end)) {
          out.end_us = end;
        }
      }
      continue;
    }
    ++out.total_lines;
    if (auto rec = parse_trace_record(line)) {
      out.records.push_back(*rec);
    } else {
      ++out.malformed;
    }
  }
  return out;
}

std::string format_probe_record(const ProbeRecord& rec) {
  std::ostringstream os;
  os << rec.t_us << ' ' << endpoint_text(rec.target) << ' ' << rec.rtt_us;
  return os.str();
}

std::optional<ProbeRecord> parse_probe_record(std::string_view line) {
  if (line.empty() || line[0] == '#') {
    return std::nullopt;
  }
  auto fields = split(line, ' ');
  if (fields.size() != 3) {
    return std::nullopt;
  }
  ProbeRecord rec;
  if (!parse_int(fields[0], rec.t_us) || !parse_int(fields[2], rec.rtt_us)) {
    return std::nullopt;
  }
  auto target = endpoint_from_text(fields[1]);
  if (!target) {
    return std::nullopt;
  }
  rec.target = *target;
  return rec;
}

std::vector<ProbeRecord> read_probe_file(std::istream& in) {
  std::vector<ProbeRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (auto rec = parse_probe_record(line)) {
      out.push_back(*rec);
    }
  }
  return out;
}

std::vector<FlowletStatsRow> analyze_trace(const std::vector<TraceRecord>& recs,
                                           const std::vector<DurUs>& timeouts) {
  // choose each connection's dominant direction by raw byte volume
  struct PerConn {
    std::uint64_t bytes_a2b = 0;
    std::uint64_t bytes_b2a = 0;
    std::vector<TimeUs> a2b_ts;
    std::vector<TimeUs> b2a_ts;
  };
  std::map<FourTuple, PerConn> conns;
  for (const auto& rec : recs) {
    PerConn& pc = conns[rec.conn];
    if (rec.a_to_b) {
      pc.bytes_a2b += rec.size;
      pc.a2b_ts.push_back(rec.t_us);
    } else {
      pc.bytes_b2a += rec.size;
      pc.b2a_ts.push_back(rec.t_us);
    }
  }

  std::vector<FlowletStatsRow> rows;
  for (DurUs timeout : timeouts) {
    FlowletStatsRow row;
    row.timeout_us = timeout;
    std::uint64_t packets = 0;
    std::uint64_t duration_sum = 0;
    for (auto& [key, pc] : conns) {
      const std::vector<TimeUs>& ts =
          pc.bytes_a2b >= pc.bytes_b2a ? pc.a2b_ts : pc.b2a_ts;
      if (ts.empty()) {
        continue;
      }
      TimeUs start = ts.front();
      TimeUs last = ts.front();
      std::uint64_t count = 1;
      auto close_flowlet = [&] {
        ++row.flowlets;
        packets += count;
        duration_sum += static_cast<std::uint64_t>(last - start);
      };
      for (std::size_t i = 1; i < ts.size(); ++i) {
        if (ts[i] - last >= timeout) {
          close_flowlet();
          start = ts[i];
          count = 0;
        }
        last = ts[i];
        ++count;
      }
      close_flowlet();
    }
    if (row.flowlets > 0) {
      row.avg_packets =
          static_cast<double>(packets) / static_cast<double>(row.flowlets);
      row.avg_duration_us =
          static_cast<double>(duration_sum) / static_cast<double>(row.flowlets);
    }
    rows.push_back(row);
  }
  return rows;
}

namespace {

class ReplayHost : public EngineHost {
 public:
  void send(std::span<const std::uint8_t>, const Endpoint&,
            const Endpoint&) override {}
  void request_wakeup(TimeUs at) override { wakeup = at; }
  std::optional<TimeUs> wakeup;
};

Bytes synthesize_record_bytes(const TraceRecord& rec) {
  Bytes b(std::max<std::uint32_t>(rec.size, 12), 0);
  if (rec.long_header) {
    b[0] = static_cast<std::uint8_t>(
        0xc0 | (static_cast<std::uint8_t>(*rec.long_header) << 4));
    b[1] = 0x00;
    b[2] = 0x00;
    b[3] = 0x00;
    b[4] = 0x01;
    b[5] = 0;  // empty connection ids
    b[6] = 0;
  } else {
    b[0] = 0x40;
  }
  return b;
}

}  // namespace

ReplaySummary replay_trace(const std::vector<TraceRecord>& recs,
                           const std::vector<ProbeRecord>& probes,
                           EngineConfig config,
                           std::optional<TimeUs> end_hint) {
  config.emit = false;
  config.probing = false;  // samples come from the sidecar instead

  ReplayHost host;
  Engine engine(host, nullptr, config);
  ReplaySummary summary;
  engine.report_hook = [&summary](const ReportEvent& ev) {
    summary.reports.push_back(ev);
  };

  std::size_t probe_idx = 0;
  TimeUs last_t = 0;
  auto drain_timers = [&](TimeUs upto) {
    while (host.wakeup && *host.wakeup <= upto) {
      const TimeUs at = *host.wakeup;
      host.wakeup.reset();
      engine.on_timer(at);
    }
  };

  for (const auto& rec : recs) {
    const TimeUs t = std::max(rec.t_us, last_t);  // file order wins on ties
    while (probe_idx < probes.size() && probes[probe_idx].t_us <= t) {
      const auto& pr = probes[probe_idx++];
      drain_timers(pr.t_us);
      engine.inject_probe_sample(pr.target, pr.rtt_us, pr.t_us);
    }
    drain_timers(t);

    const Endpoint& src = rec.a_to_b ? rec.conn.lo : rec.conn.hi;
    const Endpoint& dst = rec.a_to_b ? rec.conn.hi : rec.conn.lo;
    Bytes bytes = synthesize_record_bytes(rec);
    const PayloadDigest* digest = rec.digest ? &*rec.digest : nullptr;
    engine.on_datagram(bytes, src, dst, t, rec.retransmit, digest);

    if (const auto* conn = engine.find_connection(rec.conn)) {
      if (conn->receiver_rtt().initialized() &&
          summary.rtt_series.size() < 100'000) {
        std::ostringstream os;
        os << t << ' ' << four_tuple_text(rec.conn) << ' '
           << conn->receiver_rtt().srtt();
        if (summary.rtt_series.empty() || summary.rtt_series.back() != os.str()) {
          summary.rtt_series.push_back(os.str());
        }
      }
    }
    last_t = t;
    ++summary.records;
  }
  // run the clock to the recorded end of observation, not further
  drain_timers(end_hint.value_or(last_t));

  summary.connections = engine.connection_count();
  summary.stats = engine.stats();
  return summary;
}

std::string format_report_line(const ReportEvent& ev) {
  std::ostringstream os;
  os << "report conn=" << four_tuple_text(ev.conn) << " fid=" << ev.fid
     << " lost=";
  if (ev.lost_digests.empty()) {
    os << '-';
  } else {
    for (std::size_t i = 0; i < ev.lost_digests.size(); ++i) {
      if (i > 0) {
        os << ',';
      }
      os << digest_hex(ev.lost_digests[i]);
    }
  }
  os << " suppressed_thr=" << ev.report.suppressed_by_threshold
     << " suppressed_ci=" << ev.report.suppressed_by_close_interval;
  return os.str();
}

}  // namespace quicpep
