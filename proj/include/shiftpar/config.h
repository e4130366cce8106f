#pragma once

#include <cstdint>
#include <string>

#include "json.hpp"
#include "shiftpar/engine.h"
#include "shiftpar/serving.h"
#include "shiftpar/spec_decode.h"
#include "shiftpar/swiftkv.h"

namespace shiftpar {

// Everything a CLI run depends on. Serialized as one flat JSON document;
// unknown keys are errors.
struct RunConfig {
  ModelConfig model;
  std::size_t world_size = 8;
  ShiftPolicy policy;  // token_threshold 0 resolves to 4 * world_size
  SwiftKvConfig swiftkv;
  SpeculationConfig speculation;
  CostModel cost;
  std::uint64_t seed = 7;
  ExecutionMode execution = ExecutionMode::Threaded;
  // Used when no trace file is given, and for per-phase summaries.
  TrafficProfile workload = reference_burst_profile();

  // Throws ConfigError naming the offending field.
  void validate() const;
  EngineOptions engine_options() const;
};

RunConfig parse_run_config(const nlohmann::json& doc);
RunConfig load_run_config(const std::string& path);
// Fully resolved echo: defaults filled in, threshold resolved.
nlohmann::json to_json(const RunConfig& config);

}  // namespace shiftpar
