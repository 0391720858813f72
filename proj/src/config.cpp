#include "quicpep/config.hpp"

#include <cstdlib>
#include <stdexcept>

#include "json.hpp"

namespace quicpep {

namespace {

using nlohmann::json;

void apply_env_overrides(json& node, const std::string& path) {
  if (node.is_object()) {
    for (auto& [key, value] : node.items()) {
      std::string next = path;
      for (char c : key) {
        next.push_back(static_cast<char>(std::toupper(c)));
      }
      apply_env_overrides(value, next + "_");
    }
    return;
  }
  std::string name = kEnvPrefix + path;
  if (!name.empty() && name.back() == '_') {
    name.pop_back();
  }
  const char* env = std::getenv(name.c_str());
  if (env == nullptr) {
    return;
  }
  const std::string text = env;
  if (node.is_boolean()) {
    node = text == "1" || text == "true" || text == "yes";
  } else if (node.is_number_integer() || node.is_number_unsigned()) {
    node = json::parse(text, nullptr, false).is_number()
               ? json(std::stoll(text))
               : node;
  } else if (node.is_number_float()) {
    node = std::stod(text);
  } else {
    node = text;
  }
}

sim::LossModel loss_from_json(const json& j) {
  sim::LossModel m;
  const std::string kind = j.value("kind", "none");
  if (kind == "none") {
    m.kind = sim::LossKind::kNone;
  } else if (kind == "uniform") {
    m.kind = sim::LossKind::kUniform;
    m.probability = j.value("probability", 0.0);
  } else if (kind == "gilbert_elliott") {
    m.kind = sim::LossKind::kGilbertElliott;
    m.p_good_to_bad = j.value("p_good_to_bad", 0.0);
    m.p_bad_to_good = j.value("p_bad_to_good", 0.0);
    m.loss_good = j.value("loss_good", 0.0);
    m.loss_bad = j.value("loss_bad", 1.0);
  } else if (kind == "targeted_frame_drop") {
    m.kind = sim::LossKind::kTargetedFrameDrop;
    m.frame_every_n = j.value("frame_every_n", std::uint64_t{10});
    m.frame_offset = j.value("frame_offset", std::uint64_t{0});
    m.chunk_idx = j.value("chunk_idx", std::uint32_t{0});
  } else {
    throw std::invalid_argument("loss.kind: unknown value '" + kind + "'");
  }
  return m;
}

sim::LinkModel link_from_json(const json& j) {
  sim::LinkModel link;
  link.one_way_delay = j.value("one_way_delay_us", link.one_way_delay);
  link.bandwidth_bps = j.value("bandwidth_bps", link.bandwidth_bps);
  link.queue_capacity = j.value("queue_capacity", link.queue_capacity);
  link.drift_us_per_sec = j.value("drift_us_per_sec", link.drift_us_per_sec);
  link.delay_step_at = j.value("delay_step_at_us", link.delay_step_at);
  link.delay_step = j.value("delay_step_us", link.delay_step);
  if (j.contains("loss")) {
    link.loss = loss_from_json(j.at("loss"));
  }
  return link;
}

sim::EndpointConfig endpoint_from_json(const json& j) {
  sim::EndpointConfig e;
  e.eliciting_threshold = j.value("eliciting_threshold", e.eliciting_threshold);
  e.max_ack_delay = j.value("max_ack_delay_us", e.max_ack_delay);
  e.ack_on_reorder = j.value("ack_on_reorder", e.ack_on_reorder);
  return e;
}

EngineConfig engine_from_json(const json& j) {
  EngineConfig c;
  c.alpha = j.value("alpha", c.alpha);
  c.beta = j.value("beta", c.beta);
  c.close_interval = j.value("close_interval_us", c.close_interval);
  c.flowlet_cap = j.value("flowlet_cap", c.flowlet_cap);
  c.max_active_flowlets = j.value("max_active_flowlets", c.max_active_flowlets);
  c.retx_cap_ratio = j.value("retx_cap_ratio", c.retx_cap_ratio);
  if (j.contains("retx_budget_window_s")) {
    c.retx_budget_window =
        j.at("retx_budget_window_s").get<std::int64_t>() * kMicrosPerSec;
  }
  if (j.contains("idle_timeout_s")) {
    c.idle_timeout = j.at("idle_timeout_s").get<std::int64_t>() * kMicrosPerSec;
  }
  c.copa_delta = j.value("delta", c.copa_delta);
  if (j.contains("rtt_min_window_s")) {
    c.rtt_min_window =
        j.at("rtt_min_window_s").get<std::int64_t>() * kMicrosPerSec;
  }
  c.eliciting_window = j.value("eliciting_window", c.eliciting_window);
  c.per_conn_buffer_bytes =
      j.value("per_conn_buffer_bytes", c.per_conn_buffer_bytes);
  c.global_buffer_bytes = j.value("global_buffer_bytes", c.global_buffer_bytes);
  c.probing = j.value("probing", c.probing);
  return c;
}

json parse_with_env(const std::string& text) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) {
    throw std::invalid_argument("config is not valid JSON");
  }
  apply_env_overrides(j, "");
  return j;
}

}  // namespace

sim::ScenarioConfig scenario_from_json(const std::string& text) {
  const json j = parse_with_env(text);
  sim::ScenarioConfig cfg;
  if (j.contains("link1")) {
    cfg.link1 = link_from_json(j.at("link1"));
  }
  if (j.contains("link2")) {
    cfg.link2 = link_from_json(j.at("link2"));
  }
  if (j.contains("client")) {
    cfg.client = endpoint_from_json(j.at("client"));
  }
  if (j.contains("server")) {
    cfg.server = endpoint_from_json(j.at("server"));
  }
  if (j.contains("traffic")) {
    const json& t = j.at("traffic");
    const std::string app = t.value("app", "bulk");
    if (app == "bulk") {
      cfg.traffic.app = sim::AppKind::kBulk;
    } else if (app == "rtc") {
      cfg.traffic.app = sim::AppKind::kRtc;
    } else if (app == "none") {
      cfg.traffic.app = sim::AppKind::kNone;
    } else {
      throw std::invalid_argument("traffic.app: unknown value '" + app + "'");
    }
    cfg.traffic.bulk_bytes = t.value("bulk_bytes", cfg.traffic.bulk_bytes);
    cfg.traffic.rtc_fps = t.value("rtc_fps", cfg.traffic.rtc_fps);
    cfg.traffic.rtc_bitrate_bps =
        t.value("rtc_bitrate_bps", cfg.traffic.rtc_bitrate_bps);
    const std::string cc = t.value("cc", "cubic");
    if (cc == "cubic") {
      cfg.traffic.cc = sim::CcKind::kCubicLike;
    } else if (cc == "fixed_rate") {
      cfg.traffic.cc = sim::CcKind::kFixedRate;
    } else {
      throw std::invalid_argument("traffic.cc: unknown value '" + cc + "'");
    }
  }
  cfg.engine_on = j.value("engine_on", cfg.engine_on);
  if (j.contains("duration_s")) {
    cfg.duration = static_cast<DurUs>(j.at("duration_s").get<double>() *
                                      static_cast<double>(kMicrosPerSec));
  }
  if (j.contains("engine")) {
    cfg.engine = engine_from_json(j.at("engine"));
  }
  cfg.validate();
  return cfg;
}

EngineConfig engine_config_from_json(const std::string& text) {
  const json j = parse_with_env(text);
  if (j.contains("engine")) {
    return engine_from_json(j.at("engine"));
  }
  return engine_from_json(j);
}

std::string scenario_to_json(const sim::ScenarioConfig& cfg) {
  auto loss_json = [](const sim::LossModel& m) {
    json j;
    switch (m.kind) {
      case sim::LossKind::kNone:
        j["kind"] = "none";
        break;
      case sim::LossKind::kUniform:
        j["kind"] = "uniform";
        j["probability"] = m.probability;
        break;
      case sim::LossKind::kGilbertElliott:
        j["kind"] = "gilbert_elliott";
        j["p_good_to_bad"] = m.p_good_to_bad;
        j["p_bad_to_good"] = m.p_bad_to_good;
        j["loss_good"] = m.loss_good;
        j["loss_bad"] = m.loss_bad;
        break;
      case sim::LossKind::kTargetedFrameDrop:
        j["kind"] = "targeted_frame_drop";
        j["frame_every_n"] = m.frame_every_n;
        j["frame_offset"] = m.frame_offset;
        j["chunk_idx"] = m.chunk_idx;
        break;
    }
    return j;
  };
  auto link_json = [&](const sim::LinkModel& l) {
    json j;
    j["one_way_delay_us"] = l.one_way_delay;
    j["bandwidth_bps"] = l.bandwidth_bps;
    j["queue_capacity"] = l.queue_capacity;
    j["loss"] = loss_json(l.loss);
    if (l.drift_us_per_sec != 0.0) {
      j["drift_us_per_sec"] = l.drift_us_per_sec;
    }
    if (l.delay_step_at != 0) {
      j["delay_step_at_us"] = l.delay_step_at;
      j["delay_step_us"] = l.delay_step;
    }
    return j;
  };
  json j;
  j["link1"] = link_json(cfg.link1);
  j["link2"] = link_json(cfg.link2);
  j["client"] = {{"eliciting_threshold", cfg.client.eliciting_threshold},
                 {"max_ack_delay_us", cfg.client.max_ack_delay},
                 {"ack_on_reorder", cfg.client.ack_on_reorder}};
  j["server"] = {{"eliciting_threshold", cfg.server.eliciting_threshold},
                 {"max_ack_delay_us", cfg.server.max_ack_delay},
                 {"ack_on_reorder", cfg.server.ack_on_reorder}};
  json t;
  t["app"] = cfg.traffic.app == sim::AppKind::kBulk
                 ? "bulk"
                 : cfg.traffic.app == sim::AppKind::kRtc ? "rtc" : "none";
  t["bulk_bytes"] = cfg.traffic.bulk_bytes;
  t["rtc_fps"] = cfg.traffic.rtc_fps;
  t["rtc_bitrate_bps"] = cfg.traffic.rtc_bitrate_bps;
  t["cc"] = cfg.traffic.cc == sim::CcKind::kCubicLike ? "cubic" : "fixed_rate";
  j["traffic"] = t;
  j["engine_on"] = cfg.engine_on;
  j["duration_s"] =
      static_cast<double>(cfg.duration) / static_cast<double>(kMicrosPerSec);
  json e;
  e["alpha"] = cfg.engine.alpha;
  e["beta"] = cfg.engine.beta;
  e["close_interval_us"] = cfg.engine.close_interval;
  e["flowlet_cap"] = cfg.engine.flowlet_cap;
  e["max_active_flowlets"] = cfg.engine.max_active_flowlets;
  e["retx_cap_ratio"] = cfg.engine.retx_cap_ratio;
  e["retx_budget_window_s"] = cfg.engine.retx_budget_window / kMicrosPerSec;
  e["idle_timeout_s"] = cfg.engine.idle_timeout / kMicrosPerSec;
  e["delta"] = cfg.engine.copa_delta;
  e["rtt_min_window_s"] = cfg.engine.rtt_min_window / kMicrosPerSec;
  e["eliciting_window"] = cfg.engine.eliciting_window;
  e["probing"] = cfg.engine.probing;
  j["engine"] = e;
  return j.dump(2);
}

}  // namespace quicpep
