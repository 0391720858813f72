#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "quicpep/config.hpp"
#include "quicpep/proxy.hpp"
#include "quicpep/sim.hpp"
#include "quicpep/trace.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace quicpep;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInput = 2;
constexpr int kExitEnvironment = 3;

std::optional<std::string> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    return std::nullopt;
  }
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

json metrics_to_json(const sim::Metrics& m) {
  json j;
  j["goodput_bps"] = m.goodput_bps;
  j["transfer_complete"] = m.transfer_complete;
  j["transfer_time_us"] = m.transfer_time;
  j["frames_created"] = m.frames_created;
  j["frames_completed"] = m.frames_completed;
  j["frame_interarrival_var_us2"] = m.frame_interarrival_var_us2;
  j["frame_interarrival_rfc3550_us"] = m.frame_interarrival_rfc3550_us;
  j["frame_delay_p50_us"] = m.frame_delay_p50;
  j["frame_delay_p90_us"] = m.frame_delay_p90;
  j["frame_delay_p99_us"] = m.frame_delay_p99;
  j["detector_precision"] = m.detector_precision;
  j["detector_recall"] = m.detector_recall;
  j["true_losses_protected_link"] = m.true_losses_protected_link;
  j["reported_losses"] = m.reported_losses;
  j["receiver_data_packets"] = m.receiver_data_packets;
  j["receiver_acks_sent"] = m.receiver_acks_sent;
  json e;
  e["datagrams"] = m.engine.datagrams;
  e["forwarded"] = m.engine.forwarded;
  e["flowlets_finished"] = m.engine.flowlets_finished;
  e["flowlets_abandoned"] = m.engine.flowlets_abandoned;
  e["reports"] = m.engine.reports;
  e["packets_reported_lost"] = m.engine.packets_reported_lost;
  e["retransmitted"] = m.engine.retransmitted;
  e["retx_blocked_budget"] = m.engine.retx_blocked_budget;
  e["retx_blocked_stage"] = m.engine.retx_blocked_stage;
  e["calibration_resets"] = m.engine.calibration_resets;
  e["probes_sent"] = m.engine.probes_sent;
  j["engine"] = e;
  return j;
}

json truth_to_json(const sim::GroundTruth& t) {
  json packets = json::array();
  for (const auto& p : t.packets) {
    json j;
    j["digest"] = digest_hex(p.digest);
    j["sent_t_us"] = p.sent_t;
    j["from_engine"] = p.from_engine;
    j["delivered"] = p.delivered;
    j["deliver_t_us"] = p.deliver_t;
    j["dropped_link"] = p.dropped_link;
    j["dropped_toward_client"] = p.dropped_toward_client;
    packets.push_back(std::move(j));
  }
  json frames = json::array();
  for (const auto& f : t.frames) {
    json j;
    j["frame_id"] = f.frame_id;
    j["create_t_us"] = f.create_t;
    if (f.complete_t) {
      j["complete_t_us"] = *f.complete_t;
    }
    frames.push_back(std::move(j));
  }
  auto link_json = [](const sim::LinkCounters& c) {
    return json{{"sent", c.sent},
                {"delivered", c.delivered},
                {"dropped_loss", c.dropped_loss},
                {"dropped_queue", c.dropped_queue},
                {"in_flight", c.in_flight}};
  };
  return json{{"packets", std::move(packets)},
              {"frames", std::move(frames)},
              {"link1", link_json(t.link1)},
              {"link2", link_json(t.link2)}};
}

int cmd_simulate(const std::string& config_path, std::uint64_t seed,
                 const std::string& out_dir) {
  auto text = read_file(config_path);
  if (!text) {
    std::cerr << "simulate: cannot read config " << config_path << "\n";
    return kExitInput;
  }
  sim::ScenarioConfig cfg;
  try {
    cfg = scenario_from_json(*text);
  } catch (const std::exception& e) {
    std::cerr << "simulate: invalid config: " << e.what() << "\n";
    return kExitInput;
  }

  sim::ScenarioResult result = sim::run_scenario(cfg, seed);

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) {
    std::cerr << "simulate: cannot create output dir " << out_dir << "\n";
    return kExitEnvironment;
  }
  {
    std::ofstream out(fs::path(out_dir) / "metrics.json");
    out << metrics_to_json(result.metrics).dump(2) << "\n";
  }
  {
    std::ofstream out(fs::path(out_dir) / "truth.json");
    out << truth_to_json(result.truth).dump(2) << "\n";
  }
  {
    std::ofstream out(fs::path(out_dir) / "trace.txt");
    out << "# quicpep trace v1 seed=" << seed << "\n";
    out << "# end_us=" << cfg.duration << "\n";
    for (const auto& rec : result.mb_trace) {
      TraceRecord tr;
      tr.t_us = rec.t;
      tr.a_to_b = rec.lo_to_hi;
      tr.size = rec.size;
      tr.conn = rec.conn;
      tr.long_header = rec.long_header;
      tr.retransmit = rec.retransmit;
      tr.digest = rec.digest;
      out << format_trace_record(tr) << "\n";
    }
  }
  {
    std::ofstream out(fs::path(out_dir) / "probes.log");
    for (const auto& p : result.probe_log) {
      ProbeRecord rec{p.t, sim::kClientAddr, p.rtt};
      out << format_probe_record(rec) << "\n";
    }
  }
  {
    std::ofstream out(fs::path(out_dir) / "reports.txt");
    for (const auto& ev : result.reports) {
      out << format_report_line(ev) << "\n";
    }
  }
  {
    std::ofstream out(fs::path(out_dir) / "events.txt");
    for (const auto& line : result.events) {
      out << line << "\n";
    }
  }
  std::cout << metrics_to_json(result.metrics).dump(2) << "\n";
  return kExitOk;
}

int cmd_analyze(const std::string& trace_path,
                const std::vector<std::string>& timeout_args,
                const std::string& out_path) {
  std::ifstream in(trace_path);
  if (!in) {
    std::cerr << "analyze: cannot read trace " << trace_path << "\n";
    return kExitInput;
  }
  TraceFile trace = read_trace_file(in);
  if (trace.records.empty()) {
    std::cerr << "analyze: trace has no records\n";
    return kExitInput;
  }

  std::vector<DurUs> timeouts;
  for (const auto& arg : timeout_args) {
    try {
      if (arg.size() > 2 && arg.substr(arg.size() - 2) == "ms") {
        timeouts.push_back(
            static_cast<DurUs>(std::stod(arg.substr(0, arg.size() - 2)) *
                               kMicrosPerMilli));
      } else {
        timeouts.push_back(std::stoll(arg));
      }
    } catch (const std::exception&) {
      std::cerr << "analyze: bad timeout '" << arg << "'\n";
      return kExitInput;
    }
  }
  if (timeouts.empty()) {
    std::cerr << "analyze: no timeouts given\n";
    return kExitInput;
  }

  const auto rows = analyze_trace(trace.records, timeouts);
  std::ostream* os = &std::cout;
  std::ofstream file;
  if (!out_path.empty()) {
    file.open(out_path);
    os = &file;
  }
  *os << "timeout_us\tflowlets\tavg_packets\tavg_duration_us\n";
  for (const auto& row : rows) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%lld\t%llu\t%.3f\t%.1f\n",
                  static_cast<long long>(row.timeout_us),
                  static_cast<unsigned long long>(row.flowlets),
                  row.avg_packets, row.avg_duration_us);
    *os << buf;
  }
  return kExitOk;
}

int cmd_replay(const std::string& trace_path, const std::string& config_path,
               const std::string& truth_path, const std::string& probes_path,
               const std::string& out_dir) {
  std::ifstream in(trace_path);
  if (!in) {
    std::cerr << "replay: cannot read trace " << trace_path << "\n";
    return kExitInput;
  }
  TraceFile trace = read_trace_file(in);
  if (trace.total_lines == 0) {
    std::cerr << "replay: empty trace\n";
    return kExitInput;
  }
  if (trace.malformed * 100 >= trace.total_lines) {
    std::cerr << "replay: " << trace.malformed << " of " << trace.total_lines
              << " lines malformed\n";
    return kExitInput;
  }

  EngineConfig engine_cfg;
  if (!config_path.empty()) {
    auto text = read_file(config_path);
    if (!text) {
      std::cerr << "replay: cannot read config " << config_path << "\n";
      return kExitInput;
    }
    try {
      engine_cfg = engine_config_from_json(*text);
    } catch (const std::exception& e) {
      std::cerr << "replay: invalid config: " << e.what() << "\n";
      return kExitInput;
    }
  }

  std::vector<ProbeRecord> probes;
  if (!probes_path.empty()) {
    std::ifstream pin(probes_path);
    if (pin) {
      probes = read_probe_file(pin);
    }
  }

  ReplaySummary summary =
      replay_trace(trace.records, probes, engine_cfg, trace.end_us);

  std::cout << "records=" << summary.records
            << " malformed=" << trace.malformed
            << " connections=" << summary.connections
            << " reports=" << summary.reports.size()
            << " packets_reported_lost="
            << summary.stats.packets_reported_lost << "\n";
  for (const auto& ev : summary.reports) {
    std::cout << format_report_line(ev) << "\n";
  }

  if (!truth_path.empty()) {
    auto text = read_file(truth_path);
    if (!text) {
      std::cerr << "replay: cannot read truth sidecar " << truth_path << "\n";
      return kExitInput;
    }
    json truth = json::parse(*text, nullptr, false);
    if (truth.is_discarded()) {
      std::cerr << "replay: truth sidecar is not valid JSON\n";
      return kExitInput;
    }
    std::set<PayloadDigest> actual;
    for (const auto& p : truth.at("packets")) {
      if (!p.value("from_engine", false) && p.value("dropped_link", 0) == 1 &&
          p.value("dropped_toward_client", false)) {
        PayloadDigest d;
        if (digest_from_hex(p.value("digest", std::string()), d)) {
          actual.insert(d);
        }
      }
    }
    std::set<PayloadDigest> reported;
    for (const auto& ev : summary.reports) {
      for (const auto& d : ev.lost_digests) {
        reported.insert(d);
      }
    }
    const sim::DetectorScore score = sim::score_detector(actual, reported);
    std::cout << "accuracy precision=" << score.precision
              << " recall=" << score.recall << " tp=" << score.true_positives
              << " fp=" << score.false_positives
              << " fn=" << score.false_negatives << "\n";
  }

  if (!out_dir.empty()) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    std::ofstream rep(fs::path(out_dir) / "replay_reports.txt");
    for (const auto& ev : summary.reports) {
      rep << format_report_line(ev) << "\n";
    }
    std::ofstream rtt(fs::path(out_dir) / "replay_rtt.txt");
    for (const auto& line : summary.rtt_series) {
      rtt << line << "\n";
    }
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"transparent QUIC performance-enhancement middlebox tools"};
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed = 1;
  std::string out_dir = "out";
  auto* simulate = app.add_subcommand("simulate", "run a scenario");
  simulate->add_option("--config", config_path, "scenario JSON")->required();
  simulate->add_option("--seed", seed, "RNG seed");
  simulate->add_option("--out", out_dir, "output directory");

  std::string trace_path;
  std::vector<std::string> timeouts;
  std::string analyze_out;
  auto* analyze = app.add_subcommand("analyze", "flowlet statistics of a trace");
  analyze->add_option("--trace", trace_path, "trace file")->required();
  analyze->add_option("--timeouts", timeouts,
                      "flowlet timeouts (us, or e.g. 20ms)")
      ->required()
      ->delimiter(',');
  analyze->add_option("--out", analyze_out, "write the table here");

  std::string replay_trace_path;
  std::string replay_config;
  std::string truth_path;
  std::string probes_path;
  std::string replay_out;
  auto* replay = app.add_subcommand("replay", "re-run inference over a trace");
  replay->add_option("--trace", replay_trace_path, "trace file")->required();
  replay->add_option("--config", replay_config, "engine config JSON");
  replay->add_option("--truth", truth_path, "ground-truth sidecar");
  replay->add_option("--probes", probes_path, "probe sample sidecar");
  replay->add_option("--out", replay_out, "output directory");

  std::string listen_text;
  std::string forward_text;
  std::string proxy_config;
  double stats_interval_s = 1.0;
  std::uint16_t probe_echo_port = 0;
  long max_runtime_ms = 0;
  auto* proxy = app.add_subcommand("proxy", "run the live relay");
  proxy->add_option("--listen", listen_text, "listen address ip:port")
      ->required();
  proxy->add_option("--forward", forward_text, "upstream address ip:port")
      ->required();
  proxy->add_option("--config", proxy_config, "engine config JSON");
  proxy->add_option("--stats-interval", stats_interval_s,
                    "seconds between stats lines");
  proxy->add_option("--probe-echo-port", probe_echo_port,
                    "UDP echo port for calibration probes (0 = off)");
  proxy->add_option("--max-runtime-ms", max_runtime_ms,
                    "exit after this long (testing)");

  CLI11_PARSE(app, argc, argv);

  if (simulate->parsed()) {
    return cmd_simulate(config_path, seed, out_dir);
  }
  if (analyze->parsed()) {
    return cmd_analyze(trace_path, timeouts, analyze_out);
  }
  if (replay->parsed()) {
    return cmd_replay(replay_trace_path, replay_config, truth_path, probes_path,
                      replay_out);
  }
  if (proxy->parsed()) {
    ProxyOptions opts;
    auto listen = endpoint_from_text(listen_text);
    auto forward = endpoint_from_text(forward_text);
    if (!listen || !forward) {
      std::cerr << "proxy: addresses must be ip:port\n";
      return kExitInput;
    }
    opts.listen = *listen;
    opts.forward = *forward;
    if (!proxy_config.empty()) {
      auto text = read_file(proxy_config);
      if (!text) {
        std::cerr << "proxy: cannot read config " << proxy_config << "\n";
        return kExitInput;
      }
      try {
        opts.engine = engine_config_from_json(*text);
      } catch (const std::exception& e) {
        std::cerr << "proxy: invalid config: " << e.what() << "\n";
        return kExitInput;
      }
    }
    opts.stats_interval = static_cast<DurUs>(stats_interval_s * 1e6);
    opts.probe_echo_port = probe_echo_port;
    opts.max_runtime_ms = max_runtime_ms;
    return run_proxy(opts);
  }
  return kExitInput;
}
