#include "shiftpar/cli.h"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>

#include "CLI11.hpp"
#include "shiftpar/errors.h"
#include "shiftpar/reference.h"

namespace shiftpar {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write '" + path.string() + "'");
  f << text;
}

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

CheckResult check(std::string name, bool ok, double measured, std::string threshold) {
  return {std::move(name), ok ? "pass" : "fail", measured, std::move(threshold)};
}

CheckResult skipped(std::string name, std::string why) {
  return {std::move(name), "skipped", 0, std::move(why)};
}

std::vector<Token> seeded_tokens(std::uint64_t seed, std::size_t n, std::size_t vocab) {
  return synthesize_prompt(seed, 0, n, Corpus::Random, vocab);
}

}  // namespace

std::vector<CheckResult> run_verify_checks(const RunConfig& config) {
  config.validate();
  std::vector<CheckResult> results;
  const ModelConfig& mc = config.model;
  const std::size_t world = config.world_size;
  const bool f64 = mc.precision == Precision::F64;
  const double tol = f64 ? 1e-10 : 1e-4;
  const ParallelMode tp{ModeKind::TP, world}, sp{ModeKind::SP, world};

  ModelConfig ref_config = mc;
  ref_config.precision = Precision::F64;
  auto weights = std::make_shared<const ModelWeights>(init_weights(mc, config.seed));
  const ModelWeights ref_weights = f64 ? *weights : init_weights(ref_config, config.seed);

  EngineOptions eo = config.engine_options();
  eo.swiftkv.enabled = false;
  auto fresh = [&] { return Engine(weights, eo); };

  // Engine equivalence on seeded prompts.
  const std::size_t max_prompt = std::min<std::size_t>(64, mc.max_seq);
  for (ParallelMode mode : {tp, sp}) {
    double worst = 0;
    for (std::uint64_t i = 0; i < 4; ++i) {
      const std::size_t n = 1 + (i * 21 + 13) % max_prompt;
      const auto tokens = seeded_tokens(config.seed + i, n, mc.vocab);
      const Tensor ref = forward_reference(ref_weights, tokens).logits;
      Engine e = fresh();
      e.open_request(1, n);
      const StepResult r = e.step(Batch{BatchKind::Prefill, {Span{1, tokens, true}}}, mode);
      worst = std::max(worst, max_relative_diff(r.logits[0], ref));
    }
    results.push_back(check("engine_equivalence_" + std::string(mode.kind == ModeKind::TP ? "tp" : "sp"),
                            worst <= tol, worst, "<= " + format_number(tol)));
  }

  // Greedy output under fixed and shifting schedules.
  const std::size_t gen = std::min<std::size_t>(16, mc.max_seq / 2);
  const std::size_t plen = std::min<std::size_t>(24, mc.max_seq - gen);
  const auto prompt = seeded_tokens(config.seed + 100, plen, mc.vocab);
  if (f64) {
    const auto oracle = reference_greedy(ref_weights, prompt, gen);
    bool same = true;
    const ModeSchedule schedules[] = {
        [&](std::size_t) -> std::optional<ParallelMode> { return tp; },
        [&](std::size_t) -> std::optional<ParallelMode> { return sp; },
        [&](std::size_t p) -> std::optional<ParallelMode> { return p % 2 ? sp : tp; },
    };
    for (const ModeSchedule& s : schedules) {
      Engine e = fresh();
      same = same && greedy_generate(e, 1, prompt, gen, s).output == oracle;
    }
    results.push_back(check("greedy_invariance", same, same ? 1 : 0, "token-identical"));
  } else {
    results.push_back(skipped("greedy_invariance", "f64 only"));
  }

  // Cache layout and zero-copy switching.
  {
    Engine a = fresh(), b = fresh();
    a.open_request(1, plen + 4);
    b.open_request(1, plen + 4);
    const Batch pre{BatchKind::Prefill, {Span{1, prompt, false}}};
    a.step(pre, tp);
    b.step(pre, sp);
    bool ok = a.cache(1).fingerprint() == b.cache(1).fingerprint();
    for (std::size_t r = 0; r < world && ok; ++r) {
      for (std::size_t j = 0; j < a.cache(1).local_heads(); ++j) {
        const KvView x = a.cache(1).read_window(r, 0, j), y = b.cache(1).read_window(r, 0, j);
        ok = ok && std::equal(x.keys.begin(), x.keys.end(), y.keys.begin()) &&
             std::equal(x.values.begin(), x.values.end(), y.values.begin());
      }
    }
    std::uint64_t switch_writes = 0;
    const ParallelMode order[] = {sp, tp, sp, tp};
    for (ParallelMode m : order) {
      const StepResult r = a.step(Batch{BatchKind::Decode, {Span{1, {1}, false}}}, m);
      switch_writes += r.cache_writes_during_switch;
    }
    ok = ok && switch_writes == 0;
    results.push_back(check("kv_layout_invariance", ok, static_cast<double>(switch_writes),
                            "fingerprints equal, layer-0 bit-identical, 0 writes at switches"));
  }

  // Communication volume.
  if (world > 1) {
    double worst_low = 1e300, worst_high = 0;
    for (std::size_t n : {64, 256}) {
      if (n > mc.max_seq) continue;
      const auto tokens = seeded_tokens(config.seed + n, n, mc.vocab);
      const Batch pre{BatchKind::Prefill, {Span{1, tokens, false}}};
      Engine a = fresh(), b = fresh();
      a.open_request(1, n);
      b.open_request(1, n);
      const double tb = static_cast<double>(a.step(pre, tp).comm_bytes_per_device());
      const double sb = static_cast<double>(b.step(pre, sp).comm_bytes_per_device());
      const double scaled = sb / tb * static_cast<double>(world);
      worst_low = std::min(worst_low, scaled);
      worst_high = std::max(worst_high, scaled);
    }
    results.push_back(check("comm_ratio", worst_low >= 0.8 && worst_high <= 1.25, worst_high,
                            "P * SP/TP bytes in [0.8, 1.25]"));
  } else {
    results.push_back(skipped("comm_ratio", "world_size 1 has no collectives"));
  }

  // Early-exit FLOP accounting.
  if (mc.n_layers >= 2) {
    const std::size_t cut = config.swiftkv.cut_layer != 0 ? config.swiftkv.cut_layer : mc.n_layers / 2;
    const std::size_t n = std::min<std::size_t>(256, mc.max_seq);
    EngineOptions so = eo;
    so.swiftkv.enabled = true;
    so.swiftkv.cut_layer = cut;
    Engine e(weights, so);
    e.open_request(1, n);
    const Batch pre{BatchKind::Prefill, {Span{1, seeded_tokens(config.seed + 7, n, mc.vocab), false}}};
    const auto shapes = e.span_shapes(pre);
    const FlopReport predicted = flop_count(shapes, tp, mc, true, cut);
    const FlopReport standard = flop_count(shapes, tp, mc, false, 0);
    const StepResult r = e.prefill_swiftkv(pre, tp);
    results.push_back(check("swiftkv_flop_counter", r.device_flops == predicted.per_device,
                            static_cast<double>(r.total_flops()), "instrumented == analytic"));
    const double ratio = static_cast<double>(r.total_flops()) / static_cast<double>(standard.total);
    results.push_back(check("swiftkv_flop_band", ratio >= 0.50 && ratio <= 0.62, ratio, "[0.50, 0.62]"));
  } else {
    results.push_back(skipped("swiftkv_flop_band", "needs at least 2 layers"));
  }

  // Speculation exactness.
  {
    bool same = true;
    for (Corpus corpus : {Corpus::Random, Corpus::Repetitive}) {
      const auto p = synthesize_prompt(config.seed, 1, plen, corpus, mc.vocab);
      Engine a = fresh(), b = fresh();
      SpeculationConfig sc = config.speculation;
      sc.enabled = true;
      same = same && greedy_generate(a, 1, p, gen).output ==
                         decode_with_speculation(b, 1, p, gen, sc).output;
    }
    results.push_back(check("speculation_exactness", same, same ? 1 : 0, "token-identical"));
  }
  return results;
}

json summary_to_json(const Summary& s) {
  return {{"empty", s.empty},
          {"requests", s.requests},
          {"rejected", s.rejected},
          {"median_ttft_ms", s.median_ttft_ms},
          {"p99_ttft_ms", s.p99_ttft_ms},
          {"median_tpot_ms", s.median_tpot_ms},
          {"p99_tpot_ms", s.p99_tpot_ms},
          {"tokens_in", s.tokens_in},
          {"tokens_out", s.tokens_out},
          {"makespan_ms", s.makespan_ms},
          {"combined_throughput_tokens_per_s", s.combined_throughput_tokens_per_s},
          {"mode_shift_count", s.mode_shift_count},
          {"target_passes", s.target_passes},
          {"accepted_len_mean", s.accepted_len_mean},
          {"prefill_flops_saved", s.prefill_flops_saved}};
}

int cmd_verify(const RunConfig& config, const std::optional<std::string>& out_dir,
               std::ostream& out) {
  const std::vector<CheckResult> results = run_verify_checks(config);
  bool ok = true;
  json checks = json::array();
  for (const CheckResult& r : results) {
    ok = ok && r.status != "fail";
    std::string tag = r.status == "pass" ? "PASS" : r.status == "fail" ? "FAIL" : "SKIP";
    out << tag << "  " << r.name << "  measured=" << format_number(r.measured) << "  ("
        << r.threshold << ")\n";
    checks.push_back({{"name", r.name},
                      {"status", r.status},
                      {"measured", r.measured},
                      {"threshold", r.threshold}});
  }
  const json report = {{"config", to_json(config)}, {"passed", ok}, {"checks", checks}};
  if (out_dir) {
    fs::create_directories(*out_dir);
    write_file(fs::path(*out_dir) / "verify_report.json", report.dump(2) + "\n");
  } else {
    out << report.dump(2) << "\n";
  }
  out << (ok ? "verify: all checks passed\n" : "verify: FAILED\n");
  return ok ? kExitOk : kExitFailure;
}

int cmd_bench(const RunConfig& config, const std::optional<std::string>& trace_path,
              const std::string& out_dir, std::ostream& out) {
  config.validate();
  const std::vector<TraceEntry> trace =
      trace_path ? read_trace_file(*trace_path) : generate_trace(config.workload, config.seed);
  auto weights = std::make_shared<const ModelWeights>(init_weights(config.model, config.seed));
  Engine engine(weights, config.engine_options());
  ServingOptions opts;
  opts.cost = config.cost;
  opts.speculation = config.speculation;
  const ServingResult result =
      run_serving_loop(engine, materialize(trace, config.seed, config.model.vocab), opts);

  const Summary overall = summarize(result);
  json phases = json::array();
  for (std::size_t i = 0; i < config.workload.phases.size(); ++i) {
    const double from = config.workload.phase_start_ms(i);
    const double to = from + config.workload.phases[i].duration_ms;
    phases.push_back({{"start_ms", from},
                      {"end_ms", to},
                      {"summary", summary_to_json(summarize_window(result, from, to))}});
  }
  std::string errors;
  for (const RequestMetrics& m : result.metrics) {
    if (m.rejected) errors += json{{"request_id", m.id}, {"error", m.error}}.dump() + "\n";
  }
  const json summary = {{"config", to_json(config)},
                        {"seed", config.seed},
                        {"trace_requests", trace.size()},
                        {"summary", summary_to_json(overall)},
                        {"phases", phases}};

  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  write_file(dir / "metrics.csv", metrics_csv(result.metrics));
  write_file(dir / "steps.jsonl", step_log_jsonl(result.steps));
  write_file(dir / "errors.jsonl", errors);
  write_file(dir / "summary.json", summary.dump(2) + "\n");
  out << "bench: " << trace.size() << " requests, " << result.steps.size() << " steps";
  if (overall.empty) {
    out << ", summary empty\n";
  } else {
    out << ", median TTFT " << format_number(overall.median_ttft_ms) << " ms, median TPOT "
        << format_number(overall.median_tpot_ms) << " ms, throughput "
        << format_number(overall.combined_throughput_tokens_per_s) << " tok/s, "
        << overall.mode_shift_count << " mode shifts\n";
  }
  return kExitOk;
}

int cmd_sweep(const RunConfig& config, const std::optional<std::string>& trace_path,
              const std::string& out_dir, const std::string& knob,
              const std::vector<std::string>& values, std::ostream& out) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  std::vector<std::pair<RunConfig, std::string>> runs;
  for (const std::string& v : values) {
    std::size_t value = 0;
    try {
      std::size_t used = 0;
      const unsigned long long parsed = std::stoull(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      value = static_cast<std::size_t>(parsed);
    } catch (const std::exception&) {
      throw ConfigError("sweep value '" + v + "' is not a nonnegative integer");
    }
    RunConfig c = config;
    if (knob == "tau") {
      if (value < 1) throw ConfigError("tau must be >= 1");
      c.policy.token_threshold = value;
    } else if (knob == "min_match") {
      c.speculation.min_match = value;
    } else if (knob == "max_spec") {
      c.speculation.max_spec = value;
    } else if (knob == "window") {
      c.speculation.window = value;
    } else if (knob == "cut_layer") {
      c.swiftkv.enabled = true;
      c.swiftkv.cut_layer = value;
    } else {
      throw ConfigError("unknown sweep knob '" + knob +
                        "' (expected tau, min_match, max_spec, window or cut_layer)");
    }
    c.validate();
    runs.emplace_back(std::move(c), v);
  }

  std::string table =
      "knob,value,requests,median_ttft_ms,p99_ttft_ms,median_tpot_ms,p99_tpot_ms,"
      "combined_throughput_tokens_per_s,mode_shift_count,target_passes,accepted_len_mean,"
      "prefill_flops_saved\n";
  for (const auto& [c, v] : runs) {
    const std::string sub = (fs::path(out_dir) / (knob + "_" + v)).string();
    std::ostringstream sink;
    cmd_bench(c, trace_path, sub, sink);
    std::ifstream in(fs::path(sub) / "summary.json");
    const json s = json::parse(in)["summary"];
    char line[512];
    std::snprintf(line, sizeof line, "%s,%s,%zu,%.6f,%.6f,%.6f,%.6f,%.6f,%zu,%llu,%.6f,%llu\n",
                  knob.c_str(), v.c_str(), s["requests"].get<std::size_t>(),
                  s["median_ttft_ms"].get<double>(), s["p99_ttft_ms"].get<double>(),
                  s["median_tpot_ms"].get<double>(), s["p99_tpot_ms"].get<double>(),
                  s["combined_throughput_tokens_per_s"].get<double>(),
                  s["mode_shift_count"].get<std::size_t>(),
                  static_cast<unsigned long long>(s["target_passes"].get<std::uint64_t>()),
                  s["accepted_len_mean"].get<double>(),
                  static_cast<unsigned long long>(s["prefill_flops_saved"].get<std::uint64_t>()));
    table += line;
    out << knob << "=" << v << ": " << sink.str();
  }
  fs::create_directories(out_dir);
  write_file(fs::path(out_dir) / "sweep.csv", table);
  return kExitOk;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Shift-parallel inference simulator"};
  std::string command;
  std::optional<std::string> config_path, trace_path, out_dir, policy, precision, knob;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> values;
  app.add_option("command", command, "verify | bench | sweep")
      ->required()
      ->check(CLI::IsMember({"verify", "bench", "sweep"}));
  app.add_option("--config", config_path, "run config (JSON)");
  app.add_option("--trace", trace_path, "request trace (JSON lines)");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--policy", policy, "fixed_tp | fixed_sp | shift");
  app.add_option("--seed", seed, "seed for weights and workload");
  app.add_option("--precision", precision, "f32 | f64");
  app.add_option("--knob", knob, "sweep knob: tau | min_match | max_spec | window | cut_layer");
  app.add_option("--values", values, "comma-separated sweep values")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return kExitUsage;
  }

  try {
    RunConfig config = config_path ? load_run_config(*config_path) : RunConfig{};
    if (policy) config.policy.kind = parse_policy(*policy);
    if (seed) config.seed = *seed;
    if (precision) config.model.precision = parse_precision(*precision);
    config.validate();

    if (command == "verify") return cmd_verify(config, out_dir, out);
    if (!out_dir) throw ConfigError(command + " needs --out <dir>");
    if (command == "bench") return cmd_bench(config, trace_path, *out_dir, out);
    if (!knob) throw ConfigError("sweep needs --knob and --values");
    return cmd_sweep(config, trace_path, *out_dir, *knob, values, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace shiftpar
