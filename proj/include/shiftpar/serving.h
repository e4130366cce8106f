#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "shiftpar/engine.h"
#include "shiftpar/spec_decode.h"

namespace shiftpar {

enum class Corpus { Random, Repetitive };
std::string_view to_string(Corpus corpus);
Corpus parse_corpus(std::string_view text);

// Token period of the repetitive corpus: every prompt is one seeded
// template of this many tokens repeated to the prompt length.
inline constexpr std::size_t kTemplateLength = 16;

struct LengthSampler {
  enum class Kind { Fixed, LogNormal };
  Kind kind = Kind::Fixed;
  double mean_input = 200;
  double mean_output = 20;
  double sigma = 0.5;  // log-space spread for LogNormal
};

struct TrafficPhase {
  double duration_ms = 0;
  double rate_per_s = 0;
};

struct TrafficProfile {
  std::vector<TrafficPhase> phases;
  LengthSampler lengths;
  Corpus corpus = Corpus::Random;

  void validate() const;
  // Start offset of phase i in ms.
  double phase_start_ms(std::size_t i) const;
};

// Two phases: 5 s at 1 req/s, then 5 s at 20 req/s; 200-token prompts and
// 20-token outputs.
TrafficProfile reference_burst_profile();

// One line of a trace file. Prompt tokens are not stored; they are
// regenerated from (seed, request index, corpus).
struct TraceEntry {
  std::uint64_t arrival_ms = 0;
  std::size_t prompt_len = 0;
  std::size_t output_len = 0;
  Corpus corpus = Corpus::Random;

  bool operator==(const TraceEntry&) const = default;
};

std::vector<TraceEntry> generate_trace(const TrafficProfile& profile, std::uint64_t seed);

std::string trace_to_jsonl(const std::vector<TraceEntry>& trace);
// Throws ConfigError naming the 1-based line on malformed input.
std::vector<TraceEntry> parse_trace_jsonl(std::istream& in);
std::vector<TraceEntry> read_trace_file(const std::string& path);

std::vector<Token> synthesize_prompt(std::uint64_t seed, RequestId id,
                                     std::size_t length, Corpus corpus,
                                     std::size_t vocab);

enum class RequestState { Queued, Prefilling, Decoding, Done, Rejected };

struct Request {
  RequestId id = 0;
  double arrival_ms = 0;
  std::vector<Token> prompt;
  std::size_t output_budget = 0;
  Corpus corpus = Corpus::Random;
  RequestState state = RequestState::Queued;
};

std::vector<Request> materialize(const std::vector<TraceEntry>& trace,
                                 std::uint64_t seed, std::size_t vocab);

struct CostModel {
  double device_flops_per_s = 1e10;
  double link_bytes_per_s = 1e9;
  double collective_latency_s = 50e-6;

  void validate() const;
  // Slowest device's compute, then every collective in sequence.
  double step_time_s(const StepResult& step) const;
};

struct RequestMetrics {
  RequestId id = 0;
  double arrival_ms = 0;
  double ttft_ms = 0;
  double tpot_ms = 0;
  double e2e_ms = 0;
  std::size_t tokens_in = 0;
  std::size_t tokens_out = 0;
  bool rejected = false;
  std::string error;
};

struct StepLog {
  std::uint64_t step = 0;
  double start_ms = 0;
  double sim_time_ms = 0;  // clock after the step
  std::string mode;
  BatchKind batch_kind = BatchKind::Prefill;
  std::size_t batch_tokens = 0;
  std::size_t requests = 0;
  std::size_t tokens_emitted = 0;
  std::uint64_t flops = 0;
  std::uint64_t max_device_flops = 0;
  std::uint64_t bytes = 0;  // per device
  bool mode_switched = false;
  std::uint64_t prefill_flops_saved = 0;
};

struct ServingOptions {
  CostModel cost;
  SpeculationConfig speculation;
};

struct ServingResult {
  std::vector<RequestMetrics> metrics;  // in request order, rejected included
  std::vector<StepLog> steps;
  std::size_t draft_passes = 0;
  std::size_t accepted_total = 0;

  double accepted_len_mean() const;
};

// Discrete-event loop on a simulated clock. Each step admits every arrived
// request, then runs one pass: a prefill of all queued prompts if any are
// waiting, else one decode token (or verify span, with speculation) for
// every active request. The engine's policy picks the mode per pass.
ServingResult run_serving_loop(Engine& engine, std::vector<Request> requests,
                               const ServingOptions& options);

struct Summary {
  bool empty = true;
  std::size_t requests = 0;
  std::size_t rejected = 0;
  double median_ttft_ms = 0;
  double p99_ttft_ms = 0;
  double median_tpot_ms = 0;
  double p99_tpot_ms = 0;
  std::uint64_t tokens_in = 0;
  std::uint64_t tokens_out = 0;
  double makespan_ms = 0;
  double combined_throughput_tokens_per_s = 0;
  std::size_t mode_shift_count = 0;
  std::uint64_t target_passes = 0;
  double accepted_len_mean = 0;
  std::uint64_t prefill_flops_saved = 0;
};

// Nearest-rank percentile over sorted values: element min(N-1, floor(p*N)).
double nearest_rank(std::vector<double> values, double p);

Summary summarize(const ServingResult& result);
// Latency statistics of the requests that arrived in [from_ms, to_ms).
Summary summarize_window(const ServingResult& result, double from_ms, double to_ms);

std::string metrics_csv(const std::vector<RequestMetrics>& metrics);
std::string step_log_jsonl(const std::vector<StepLog>& steps);

}  // namespace shiftpar
