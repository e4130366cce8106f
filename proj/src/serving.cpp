#include "shiftpar/serving.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <random>
#include <sstream>

#include "json.hpp"
#include "shiftpar/errors.h"

namespace shiftpar {

using nlohmann::json;

std::string_view to_string(Corpus corpus) {
  return corpus == Corpus::Random ? "random" : "repetitive";
}

Corpus parse_corpus(std::string_view text) {
  if (text == "random") return Corpus::Random;
  if (text == "repetitive") return Corpus::Repetitive;
  throw ConfigError("unknown corpus '" + std::string(text) +
                    "' (expected random or repetitive)");
}

void TrafficProfile::validate() const {
  for (const TrafficPhase& p : phases) {
    if (!(p.duration_ms >= 0) || !(p.rate_per_s >= 0)) {
      throw ConfigError("traffic phases need nonnegative duration and rate");
    }
  }
  if (!(lengths.mean_input >= 1) || !(lengths.mean_output >= 1)) {
    throw ConfigError("mean input and output lengths must be >= 1");
  }
  if (!(lengths.sigma >= 0)) throw ConfigError("length sigma must be >= 0");
}

double TrafficProfile::phase_start_ms(std::size_t i) const {
  double t = 0;
  for (std::size_t j = 0; j < i && j < phases.size(); ++j) t += phases[j].duration_ms;
  return t;
}

TrafficProfile reference_burst_profile() {
  TrafficProfile p;
  p.phases = {{5000, 1}, {5000, 20}};
  return p;
}

namespace {

std::size_t sample_length(const LengthSampler& s, double mean, std::mt19937_64& rng) {
  if (s.kind == LengthSampler::Kind::Fixed) {
    return static_cast<std::size_t>(std::llround(mean));
  }
  const double mu = std::log(mean) - 0.5 * s.sigma * s.sigma;
  std::lognormal_distribution<double> dist(mu, s.sigma);
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(dist(rng))));
}

}  // namespace

std::vector<TraceEntry> generate_trace(const TrafficProfile& profile, std::uint64_t seed) {
  profile.validate();
  std::mt19937_64 arrivals(seed);
  std::mt19937_64 lengths(seed ^ 0x9e3779b97f4a7c15ull);
  std::vector<TraceEntry> trace;
  for (std::size_t i = 0; i < profile.phases.size(); ++i) {
    const TrafficPhase& phase = profile.phases[i];
    if (phase.rate_per_s == 0) continue;
    const double start = profile.phase_start_ms(i);
    const double end = start + phase.duration_ms;
    std::exponential_distribution<double> gap(phase.rate_per_s / 1000.0);
    for (double t = start + gap(arrivals); t < end; t += gap(arrivals)) {
      TraceEntry e;
      e.arrival_ms = static_cast<std::uint64_t>(std::floor(t));
      e.prompt_len = sample_length(profile.lengths, profile.lengths.mean_input, lengths);
      e.output_len = sample_length(profile.lengths, profile.lengths.mean_output, lengths);
      e.corpus = profile.corpus;
      trace.push_back(e);
    }
  }
  return trace;
}

std::string trace_to_jsonl(const std::vector<TraceEntry>& trace) {
  std::string out;
  for (const TraceEntry& e : trace) {
    json j = {{"arrival_ms", e.arrival_ms},
              {"prompt_len", e.prompt_len},
              {"output_len", e.output_len},
              {"corpus", to_string(e.corpus)}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<TraceEntry> parse_trace_jsonl(std::istream& in) {
  std::vector<TraceEntry> trace;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "trace line " + std::to_string(line_no) + ": ";
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ConfigError(where + "invalid JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw ConfigError(where + "expected a JSON object");
    for (const auto& [key, value] : j.items()) {
      if (key != "arrival_ms" && key != "prompt_len" && key != "output_len" &&
          key != "corpus") {
        throw ConfigError(where + "unknown key '" + key + "'");
      }
    }
    auto need_uint = [&](const char* key, std::uint64_t min) {
      if (!j.contains(key) || !j[key].is_number_integer() ||
          j[key].get<std::int64_t>() < static_cast<std::int64_t>(min)) {
        throw ConfigError(where + "'" + key + "' must be an integer >= " +
                          std::to_string(min));
      }
      return j[key].get<std::uint64_t>();
    };
    TraceEntry e;
    e.arrival_ms = need_uint("arrival_ms", 0);
    e.prompt_len = need_uint("prompt_len", 1);
    e.output_len = need_uint("output_len", 1);
    if (j.contains("corpus")) {
      if (!j["corpus"].is_string()) throw ConfigError(where + "'corpus' must be a string");
      try {
        e.corpus = parse_corpus(j["corpus"].get<std::string>());
      } catch (const ConfigError& err) {
        throw ConfigError(where + err.what());
      }
    }
    if (!trace.empty() && e.arrival_ms < trace.back().arrival_ms) {
      throw ConfigError(where + "arrivals must be sorted");
    }
    trace.push_back(e);
  }
  return trace;
}

std::vector<TraceEntry> read_trace_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open trace file '" + path + "'");
  return parse_trace_jsonl(in);
}

std::vector<Token> synthesize_prompt(std::uint64_t seed, RequestId id,
                                     std::size_t length, Corpus corpus,
                                     std::size_t vocab) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(id), static_cast<std::uint32_t>(id >> 32),
                    static_cast<std::uint32_t>(corpus)};
  std::mt19937_64 rng(seq);
  std::uniform_int_distribution<Token> dist(0, static_cast<Token>(vocab - 1));
  std::vector<Token> prompt(length);
  if (corpus == Corpus::Random) {
    for (Token& t : prompt) t = dist(rng);
    return prompt;
  }
  std::vector<Token> pattern(kTemplateLength);
  for (Token& t : pattern) t = dist(rng);
  for (std::size_t i = 0; i < length; ++i) prompt[i] = pattern[i % kTemplateLength];
  return prompt;
}

std::vector<Request> materialize(const std::vector<TraceEntry>& trace,
                                 std::uint64_t seed, std::size_t vocab) {
  std::vector<Request> requests;
  requests.reserve(trace.size());
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const TraceEntry& e = trace[i];
    Request r;
    r.id = i;
    r.arrival_ms = static_cast<double>(e.arrival_ms);
    r.prompt = synthesize_prompt(seed, i, e.prompt_len, e.corpus, vocab);
    r.output_budget = e.output_len;
    r.corpus = e.corpus;
    requests.push_back(std::move(r));
  }
  return requests;
}

void CostModel::validate() const {
  if (!(device_flops_per_s > 0) || !(link_bytes_per_s > 0) || !(collective_latency_s > 0)) {
    throw ConfigError("cost model rates and latency must be positive");
  }
}

double CostModel::step_time_s(const StepResult& step) const {
  double t = static_cast<double>(step.max_device_flops()) / device_flops_per_s;
  for (const CommRecord& c : step.comm) {
    t += static_cast<double>(c.bytes_sent_per_device) / link_bytes_per_s + collective_latency_s;
  }
  return t;
}

double ServingResult::accepted_len_mean() const {
  return draft_passes == 0 ? 0.0
                           : static_cast<double>(accepted_total) /
                                 static_cast<double>(draft_passes);
}

namespace {

struct Live {
  Request* request = nullptr;
  std::size_t slot = 0;  // position in the request list
  GenerationState gen;
  std::optional<SuffixIndex> index;
  std::vector<Token> draft;
  double first_token_ms = 0;
};

}  // namespace

ServingResult run_serving_loop(Engine& engine, std::vector<Request> requests,
                               const ServingOptions& options) {
  options.cost.validate();
  if (options.speculation.enabled) options.speculation.validate();
  for (std::size_t i = 1; i < requests.size(); ++i) {
    SHIFTPAR_CHECK(requests[i].arrival_ms >= requests[i - 1].arrival_ms,
                   "serving loop needs requests sorted by arrival");
  }
  const ModelConfig& config = engine.config();
  ServingResult result;
  result.metrics.resize(requests.size());
  for (std::size_t i = 0; i < requests.size(); ++i) {
    result.metrics[i].id = requests[i].id;
    result.metrics[i].arrival_ms = requests[i].arrival_ms;
    result.metrics[i].tokens_in = requests[i].prompt.size();
  }

  std::vector<std::size_t> queue;  // indices waiting for prefill
  std::vector<Live> active;        // decoding, in admission order
  std::size_t next_arrival = 0;
  double clock = 0;
  std::uint64_t step_no = 0;
  std::optional<ParallelMode> last_mode;

  auto finish = [&](Live& live, double now) {
    RequestMetrics& m = result.metrics[live.slot];
    m.tokens_out = live.gen.emitted();
    m.ttft_ms = live.first_token_ms - m.arrival_ms;
    m.e2e_ms = now - m.arrival_ms;
    m.tpot_ms = m.tokens_out > 1 ? (now - live.first_token_ms) / static_cast<double>(m.tokens_out - 1)
                                 : 0.0;
    live.request->state = RequestState::Done;
    engine.close_request(live.request->id);
  };

  while (next_arrival < requests.size() || !queue.empty() || !active.empty()) {
    while (next_arrival < requests.size() && requests[next_arrival].arrival_ms <= clock) {
      Request& r = requests[next_arrival];
      const std::size_t need = r.prompt.size() + r.output_budget;
      if (r.prompt.empty() || r.output_budget == 0 || need > config.max_seq) {
        r.state = RequestState::Rejected;
        result.metrics[next_arrival].rejected = true;
        result.metrics[next_arrival].error =
            r.prompt.empty() || r.output_budget == 0
                ? "empty prompt or zero output budget"
                : "prompt + output (" + std::to_string(need) + ") exceeds max_seq " +
                      std::to_string(config.max_seq);
      } else {
        queue.push_back(next_arrival);
      }
      ++next_arrival;
    }
    if (queue.empty() && active.empty()) {
      if (next_arrival < requests.size()) clock = requests[next_arrival].arrival_ms;
      continue;
    }

    Batch batch;
    std::vector<Live> admitted;
    if (!queue.empty()) {
      batch.kind = BatchKind::Prefill;
      for (std::size_t idx : queue) {
        Request& r = requests[idx];
        r.state = RequestState::Prefilling;
        engine.open_request(r.id, r.prompt.size() + r.output_budget);
        batch.spans.push_back(Span{r.id, r.prompt, false});
        Live live;
        live.request = &r;
        live.slot = idx;
        live.gen.request = r.id;
        live.gen.history = r.prompt;
        live.gen.prompt_len = r.prompt.size();
        if (options.speculation.enabled) {
          live.index.emplace(options.speculation);
          live.index->extend(r.prompt);
        }
        admitted.push_back(std::move(live));
      }
      queue.clear();
    } else {
      bool any_draft = false;
      for (Live& live : active) {
        live.draft.clear();
        if (live.index) {
          live.draft = live.index->propose().tokens;
          const std::size_t room = live.request->output_budget - live.gen.emitted() - 1;
          if (live.draft.size() > room) live.draft.resize(room);
        }
        any_draft = any_draft || !live.draft.empty();
      }
      batch.kind = any_draft ? BatchKind::Verify : BatchKind::Decode;
      for (Live& live : active) {
        Span span{live.request->id, {*live.gen.pending}, any_draft};
        span.tokens.insert(span.tokens.end(), live.draft.begin(), live.draft.end());
        batch.spans.push_back(std::move(span));
      }
    }

    std::uint64_t standard_flops = 0;
    const bool early_exit = batch.kind == BatchKind::Prefill &&
                            engine.options().swiftkv.enabled &&
                            engine.options().swiftkv.resolved_cut(config) < config.n_layers;
    if (early_exit) {
      const ParallelMode mode = choose_mode(engine.options().policy, batch, engine.world_size());
      standard_flops = flop_count(engine.span_shapes(batch), mode, config, false, 0).total;
    }
    const StepResult step = engine.step(batch);
    const double start = clock;
    clock += options.cost.step_time_s(step) * 1000.0;

    StepLog log;
    log.step = step_no++;
    log.start_ms = start;
    log.sim_time_ms = clock;
    log.mode = step.mode.to_string();
    log.batch_kind = batch.kind;
    log.batch_tokens = batch.total_new_tokens();
    log.requests = batch.spans.size();
    log.flops = step.total_flops();
    log.max_device_flops = step.max_device_flops();
    log.bytes = step.comm_bytes_per_device();
    log.mode_switched = last_mode.has_value() && !(*last_mode == step.mode);
    if (step.used_swiftkv) log.prefill_flops_saved = standard_flops - step.total_flops();
    last_mode = step.mode;

    if (batch.kind == BatchKind::Prefill) {
      for (std::size_t i = 0; i < admitted.size(); ++i) {
        Live& live = admitted[i];
        const Token first = static_cast<Token>(argmax_row(step.logits[i], 0));
        live.gen.history.push_back(first);
        live.gen.pending = first;
        if (live.index) live.index->append(first);
        live.first_token_ms = clock;
        live.request->state = RequestState::Decoding;
        ++log.tokens_emitted;
        if (live.gen.emitted() >= live.request->output_budget) {
          finish(live, clock);
        } else {
          active.push_back(std::move(live));
        }
      }
    } else {
      std::vector<Live> still;
      for (std::size_t i = 0; i < active.size(); ++i) {
        Live& live = active[i];
        const Acceptance acc = accept_greedy(step.logits[i], live.draft);
        KvCache& cache = engine.cache(live.request->id);
        cache.truncate(cache.token_count() - live.draft.size() + acc.accepted);
        if (!live.draft.empty()) {
          ++result.draft_passes;
          result.accepted_total += acc.accepted;
        }
        live.gen.history.insert(live.gen.history.end(), acc.emitted.begin(), acc.emitted.end());
        live.gen.pending = acc.emitted.back();
        if (live.index) live.index->extend(acc.emitted);
        log.tokens_emitted += acc.emitted.size();
        if (live.gen.emitted() >= live.request->output_budget) {
          finish(live, clock);
        } else {
          still.push_back(std::move(live));
        }
      }
      active = std::move(still);
    }
    result.steps.push_back(std::move(log));
  }
  return result;
}

double nearest_rank(std::vector<double> values, double p) {
  SHIFTPAR_CHECK(!values.empty(), "percentile of an empty set");
  std::sort(values.begin(), values.end());
  const auto n = values.size();
  const auto idx = static_cast<std::size_t>(std::floor(p * static_cast<double>(n)));
  return values[std::min(n - 1, idx)];
}

namespace {

Summary summarize_filtered(const ServingResult& result, double from_ms, double to_ms) {
  Summary s;
  std::vector<double> ttft, tpot;
  double first_arrival = 0;
  bool any = false;
  for (const RequestMetrics& m : result.metrics) {
    if (m.arrival_ms < from_ms || m.arrival_ms >= to_ms) continue;
    ++s.requests;
    if (m.rejected) {
      ++s.rejected;
      continue;
    }
    if (!any) first_arrival = m.arrival_ms;
    any = true;
    ttft.push_back(m.ttft_ms);
    if (m.tokens_out > 1) tpot.push_back(m.tpot_ms);
    s.tokens_in += m.tokens_in;
    s.tokens_out += m.tokens_out;
  }
  if (!any) return s;
  s.empty = false;
  s.median_ttft_ms = nearest_rank(ttft, 0.5);
  s.p99_ttft_ms = nearest_rank(ttft, 0.99);
  if (!tpot.empty()) {
    s.median_tpot_ms = nearest_rank(tpot, 0.5);
    s.p99_tpot_ms = nearest_rank(tpot, 0.99);
  }
  double end = first_arrival;
  for (const RequestMetrics& m : result.metrics) {
    if (m.arrival_ms < from_ms || m.arrival_ms >= to_ms || m.rejected) continue;
    end = std::max(end, m.arrival_ms + m.e2e_ms);
  }
  s.makespan_ms = end - first_arrival;
  if (s.makespan_ms > 0) {
    s.combined_throughput_tokens_per_s =
        static_cast<double>(s.tokens_in + s.tokens_out) / (s.makespan_ms / 1000.0);
  }
  for (const StepLog& step : result.steps) {
    if (step.start_ms < from_ms || step.start_ms >= to_ms) continue;
    if (step.mode_switched) ++s.mode_shift_count;
    s.prefill_flops_saved += step.prefill_flops_saved;
    ++s.target_passes;
  }
  s.accepted_len_mean = result.accepted_len_mean();
  return s;
}

}  // namespace

Summary summarize(const ServingResult& result) {
  return summarize_filtered(result, -INFINITY, INFINITY);
}

Summary summarize_window(const ServingResult& result, double from_ms, double to_ms) {
  return summarize_filtered(result, from_ms, to_ms);
}

std::string metrics_csv(const std::vector<RequestMetrics>& metrics) {
  std::string out = "request_id,arrival_ms,ttft_ms,tpot_ms,e2e_ms,tokens_in,tokens_out\n";
  char line[256];
  for (const RequestMetrics& m : metrics) {
    if (m.rejected) continue;
    std::snprintf(line, sizeof line, "%llu,%.6f,%.6f,%.6f,%.6f,%zu,%zu\n",
                  static_cast<unsigned long long>(m.id), m.arrival_ms, m.ttft_ms,
                  m.tpot_ms, m.e2e_ms, m.tokens_in, m.tokens_out);
    out += line;
  }
  return out;
}

std::string step_log_jsonl(const std::vector<StepLog>& steps) {
  std::string out;
  for (const StepLog& s : steps) {
    json j = {{"step", s.step},
              {"start_ms", s.start_ms},
              {"sim_time_ms", s.sim_time_ms},
              {"mode", s.mode},
              {"batch_kind", to_string(s.batch_kind)},
              {"batch_tokens", s.batch_tokens},
              {"requests", s.requests},
              {"tokens_emitted", s.tokens_emitted},
              {"flops", s.flops},
              {"max_device_flops", s.max_device_flops},
              {"bytes", s.bytes},
              {"mode_switched", s.mode_switched},
              {"prefill_flops_saved", s.prefill_flops_saved}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace shiftpar
