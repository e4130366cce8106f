#include "shiftpar/config.h"

#include <fstream>
#include <initializer_list>
#include <set>

#include "shiftpar/errors.h"

namespace shiftpar {

using nlohmann::json;

namespace {

void reject_unknown(const json& obj, const std::string& where,
                    std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
  const std::set<std::string> keys(allowed.begin(), allowed.end());
  for (const auto& [key, value] : obj.items()) {
    if (!keys.count(key)) {
      throw ConfigError("unknown config key '" + (where.empty() ? "" : where + ".") + key + "'");
    }
  }
}

std::string path_of(const std::string& where, const char* key) {
  return where.empty() ? key : where + "." + key;
}

void read_size(const json& obj, const std::string& where, const char* key, std::size_t& out) {
  if (!obj.contains(key)) return;
  const json& v = obj[key];
  if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
    throw ConfigError("'" + path_of(where, key) + "' must be a nonnegative integer");
  }
  out = v.get<std::size_t>();
}

void read_double(const json& obj, const std::string& where, const char* key, double& out) {
  if (!obj.contains(key)) return;
  if (!obj[key].is_number()) throw ConfigError("'" + path_of(where, key) + "' must be a number");
  out = obj[key].get<double>();
}

void read_bool(const json& obj, const std::string& where, const char* key, bool& out) {
  if (!obj.contains(key)) return;
  if (!obj[key].is_boolean()) throw ConfigError("'" + path_of(where, key) + "' must be a boolean");
  out = obj[key].get<bool>();
}

std::string read_string(const json& obj, const std::string& where, const char* key) {
  if (!obj[key].is_string()) throw ConfigError("'" + path_of(where, key) + "' must be a string");
  return obj[key].get<std::string>();
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  if (world_size < 1) throw ConfigError("world_size must be >= 1");
  model.validate_for_world(world_size);
  if (policy.resolved_threshold(world_size) < 1) throw ConfigError("shift_threshold must be >= 1");
  if (swiftkv.enabled) {
    const std::size_t cut = swiftkv.resolved_cut(model);
    if (cut < 1 || cut >= model.n_layers) {
      throw ConfigError("swiftkv.cut_layer must lie in [1, n_layers - 1], got " +
                        std::to_string(cut));
    }
  }
  speculation.validate();
  cost.validate();
  workload.validate();
}

EngineOptions RunConfig::engine_options() const {
  EngineOptions o;
  o.world_size = world_size;
  o.execution = execution;
  o.policy = policy;
  o.policy.token_threshold = policy.resolved_threshold(world_size);
  o.swiftkv = swiftkv;
  return o;
}

RunConfig parse_run_config(const json& doc) {
  reject_unknown(doc, "", {"model", "world_size", "policy", "shift_threshold", "swiftkv",
                           "speculation", "cost_model", "precision", "seed", "execution",
                           "workload"});
  RunConfig c;
  if (doc.contains("model")) {
    const json& m = doc["model"];
    reject_unknown(m, "model", {"n_layers", "n_heads", "head_dim", "ffn_dim", "vocab", "max_seq"});
    read_size(m, "model", "n_layers", c.model.n_layers);
    read_size(m, "model", "n_heads", c.model.n_heads);
    read_size(m, "model", "head_dim", c.model.head_dim);
    read_size(m, "model", "ffn_dim", c.model.ffn_dim);
    read_size(m, "model", "vocab", c.model.vocab);
    read_size(m, "model", "max_seq", c.model.max_seq);
  }
  read_size(doc, "", "world_size", c.world_size);
  if (doc.contains("policy")) c.policy.kind = parse_policy(read_string(doc, "", "policy"));
  if (doc.contains("shift_threshold")) {
    read_size(doc, "", "shift_threshold", c.policy.token_threshold);
    if (c.policy.token_threshold < 1) throw ConfigError("shift_threshold must be >= 1");
  }
  if (doc.contains("swiftkv")) {
    const json& s = doc["swiftkv"];
    reject_unknown(s, "swiftkv", {"enabled", "cut_layer"});
    read_bool(s, "swiftkv", "enabled", c.swiftkv.enabled);
    read_size(s, "swiftkv", "cut_layer", c.swiftkv.cut_layer);
  }
  if (doc.contains("speculation")) {
    const json& s = doc["speculation"];
    reject_unknown(s, "speculation", {"enabled", "min_match", "max_spec", "window"});
    read_bool(s, "speculation", "enabled", c.speculation.enabled);
    read_size(s, "speculation", "min_match", c.speculation.min_match);
    read_size(s, "speculation", "max_spec", c.speculation.max_spec);
    read_size(s, "speculation", "window", c.speculation.window);
  }
  if (doc.contains("cost_model")) {
    const json& s = doc["cost_model"];
    reject_unknown(s, "cost_model", {"device_flops_per_s", "link_bytes_per_s", "collective_latency_s"});
    read_double(s, "cost_model", "device_flops_per_s", c.cost.device_flops_per_s);
    read_double(s, "cost_model", "link_bytes_per_s", c.cost.link_bytes_per_s);
    read_double(s, "cost_model", "collective_latency_s", c.cost.collective_latency_s);
  }
  if (doc.contains("precision")) c.model.precision = parse_precision(read_string(doc, "", "precision"));
  if (doc.contains("seed")) {
    const json& seed = doc["seed"];
    if (!seed.is_number_unsigned() && !(seed.is_number_integer() && seed.get<std::int64_t>() >= 0)) {
      throw ConfigError("'seed' must be a nonnegative integer");
    }
    c.seed = seed.get<std::uint64_t>();
  }
  if (doc.contains("execution")) c.execution = parse_execution_mode(read_string(doc, "", "execution"));
  if (doc.contains("workload")) {
    const json& w = doc["workload"];
    reject_unknown(w, "workload", {"phases", "lengths", "corpus"});
    if (w.contains("phases")) {
      if (!w["phases"].is_array()) throw ConfigError("'workload.phases' must be an array");
      c.workload.phases.clear();
      for (const json& p : w["phases"]) {
        reject_unknown(p, "workload.phases[]", {"duration_ms", "rate_per_s"});
        TrafficPhase phase;
        read_double(p, "workload.phases[]", "duration_ms", phase.duration_ms);
        read_double(p, "workload.phases[]", "rate_per_s", phase.rate_per_s);
        c.workload.phases.push_back(phase);
      }
    }
    if (w.contains("lengths")) {
      const json& l = w["lengths"];
      reject_unknown(l, "workload.lengths", {"kind", "mean_input", "mean_output", "sigma"});
      if (l.contains("kind")) {
        const std::string kind = read_string(l, "workload.lengths", "kind");
        if (kind == "fixed") {
          c.workload.lengths.kind = LengthSampler::Kind::Fixed;
        } else if (kind == "lognormal") {
          c.workload.lengths.kind = LengthSampler::Kind::LogNormal;
        } else {
          throw ConfigError("'workload.lengths.kind' must be fixed or lognormal");
        }
      }
      read_double(l, "workload.lengths", "mean_input", c.workload.lengths.mean_input);
      read_double(l, "workload.lengths", "mean_output", c.workload.lengths.mean_output);
      read_double(l, "workload.lengths", "sigma", c.workload.lengths.sigma);
    }
    if (w.contains("corpus")) c.workload.corpus = parse_corpus(read_string(w, "workload", "corpus"));
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_run_config(doc);
}

json to_json(const RunConfig& c) {
  json phases = json::array();
  for (const TrafficPhase& p : c.workload.phases) {
    phases.push_back({{"duration_ms", p.duration_ms}, {"rate_per_s", p.rate_per_s}});
  }
  return {
      {"model",
       {{"n_layers", c.model.n_layers},
        {"n_heads", c.model.n_heads},
        {"head_dim", c.model.head_dim},
        {"ffn_dim", c.model.ffn_dim},
        {"vocab", c.model.vocab},
        {"max_seq", c.model.max_seq}}},
      {"world_size", c.world_size},
      {"policy", to_string(c.policy.kind)},
      {"shift_threshold", c.policy.resolved_threshold(c.world_size)},
      {"swiftkv", {{"enabled", c.swiftkv.enabled}, {"cut_layer", c.swiftkv.resolved_cut(c.model)}}},
      {"speculation",
       {{"enabled", c.speculation.enabled},
        {"min_match", c.speculation.min_match},
        {"max_spec", c.speculation.max_spec},
        {"window", c.speculation.window}}},
      {"cost_model",
       {{"device_flops_per_s", c.cost.device_flops_per_s},
        {"link_bytes_per_s", c.cost.link_bytes_per_s},
        {"collective_latency_s", c.cost.collective_latency_s}}},
      {"precision", to_string(c.model.precision)},
      {"seed", c.seed},
      {"execution", c.execution == ExecutionMode::Threaded ? "threaded" : "lockstep"},
      {"workload",
       {{"phases", phases},
        {"lengths",
         {{"kind", c.workload.lengths.kind == LengthSampler::Kind::Fixed ? "fixed" : "lognormal"},
          {"mean_input", c.workload.lengths.mean_input},
          {"mean_output", c.workload.lengths.mean_output},
          {"sigma", c.workload.lengths.sigma}}},
        {"corpus", to_string(c.workload.corpus)}}},
  };
}

}  // namespace shiftpar
