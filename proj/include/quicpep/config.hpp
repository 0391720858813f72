#pragma once

#include <string>

#include "quicpep/engine.hpp"
#include "quicpep/sim.hpp"

namespace quicpep {

// Loads a scenario description from JSON text, after applying environment
// overrides: QUICPEP_<PATH_WITH_UNDERSCORES> replaces the value at that
// path (e.g. QUICPEP_LINK1_LOSS_PROBABILITY=0.02).
// Throws std::invalid_argument with the offending field on bad input.
sim::ScenarioConfig scenario_from_json(const std::string& text);

EngineConfig engine_config_from_json(const std::string& text);

std::string scenario_to_json(const sim::ScenarioConfig& cfg);

inline constexpr const char* kEnvPrefix = "QUICPEP_";

}  // namespace quicpep
