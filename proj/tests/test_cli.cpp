#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <sys/wait.h>

#include "doctest.h"
#include "shiftpar/cli.h"
#include "shiftpar/errors.h"
#include "test_util.h"

using namespace shiftpar;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("shiftpar_test_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

RunConfig small_run() {
  RunConfig c;
  c.model = testing::small_config();
  c.world_size = 4;
  c.execution = ExecutionMode::LockStep;
  c.workload.phases = {{300, 20}, {300, 60}};
  c.workload.lengths.mean_input = 40;
  c.workload.lengths.mean_output = 6;
  return c;
}

int run(const std::vector<std::string>& args, std::string* out = nullptr) {
  std::vector<const char*> argv{"shiftpar"};
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream o, e;
  const int rc = run_cli(static_cast<int>(argv.size()), argv.data(), o, e);
  if (out) *out = o.str() + e.str();
  return rc;
}

fs::path write_config(const fs::path& dir, const json& doc) {
  const fs::path p = dir / "config.json";
  std::ofstream(p) << doc.dump();
  return p;
}

json small_config_json() {
  return {{"model",
           {{"n_layers", 2}, {"n_heads", 4}, {"head_dim", 8}, {"ffn_dim", 128}, {"vocab", 64},
            {"max_seq", 512}}},
          {"world_size", 4},
          {"execution", "lockstep"},
          {"workload",
           {{"phases", {{{"duration_ms", 300}, {"rate_per_s", 20}}, {{"duration_ms", 300}, {"rate_per_s", 60}}}},
            {"lengths", {{"kind", "fixed"}, {"mean_input", 40}, {"mean_output", 6}}}}}};
}

}  // namespace

TEST_CASE("run config parses every section and echoes resolved values") {
  json doc = small_config_json();
  doc["policy"] = "fixed_sp";
  doc["swiftkv"] = {{"enabled", true}, {"cut_layer", 1}};
  doc["speculation"] = {{"enabled", true}, {"min_match", 3}, {"max_spec", 4}, {"window", 32}};
  doc["cost_model"] = {{"device_flops_per_s", 2e10}};
  doc["precision"] = "f32";
  doc["seed"] = 11;
  const RunConfig c = parse_run_config(doc);
  CHECK(c.model.n_heads == 4);
  CHECK(c.policy.kind == PolicyKind::FixedSp);
  CHECK(c.swiftkv.cut_layer == 1);
  CHECK(c.speculation.min_match == 3);
  CHECK(c.cost.device_flops_per_s == 2e10);
  CHECK(c.cost.link_bytes_per_s == 1e9);
  CHECK(c.model.precision == Precision::F32);
  CHECK(c.seed == 11);
  CHECK(c.workload.phases.size() == 2);
  const json echo = to_json(c);
  CHECK(echo["shift_threshold"] == 16);
  CHECK(parse_run_config(echo).seed == 11);
}

TEST_CASE("run config rejects unknown keys and bad values") {
  json doc = small_config_json();
  doc["modle"] = json::object();
  CHECK_THROWS_AS(parse_run_config(doc), ConfigError);
  doc = small_config_json();
  doc["model"]["layers"] = 2;
  CHECK_THROWS_AS(parse_run_config(doc), ConfigError);
  doc = small_config_json();
  doc["shift_threshold"] = 0;
  CHECK_THROWS_AS(parse_run_config(doc), ConfigError);
  doc = small_config_json();
  doc["swiftkv"] = {{"enabled", true}, {"cut_layer", 2}};
  CHECK_THROWS_AS(parse_run_config(doc), ConfigError);
  doc = small_config_json();
  doc["world_size"] = "four";
  CHECK_THROWS_AS(parse_run_config(doc), ConfigError);
}

TEST_CASE("indivisible heads exit with a usage error from the binary") {
  const fs::path dir = scratch("bad_heads");
  json doc = small_config_json();
  doc["model"]["n_heads"] = 6;
  const fs::path cfg = write_config(dir, doc);
  const std::string cmd = std::string(SHIFTPAR_CLI_PATH) + " verify --config " + cfg.string() +
                          " > " + (dir / "log").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(WIFEXITED(status));
  CHECK(WEXITSTATUS(status) == kExitUsage);
  CHECK(slurp(dir / "log").find("n_heads") != std::string::npos);
}

TEST_CASE("unknown command and missing out dir are usage errors") {
  CHECK(run({"train"}) == kExitUsage);
  CHECK(run({"bench"}) == kExitUsage);
  CHECK(run({"sweep", "--out", scratch("nokb").string()}) == kExitUsage);
  CHECK(run({"verify", "--config", "/nonexistent/config.json"}) == kExitUsage);
}

TEST_CASE("verify passes on a small model and writes a report") {
  const fs::path dir = scratch("verify");
  const fs::path cfg = write_config(dir, small_config_json());
  std::string log;
  CHECK(run({"verify", "--config", cfg.string(), "--out", dir.string()}, &log) == kExitOk);
  const json report = json::parse(slurp(dir / "verify_report.json"));
  CHECK(report["passed"] == true);
  CHECK(report["checks"].size() == 8);
  CHECK(log.find("FAIL") == std::string::npos);
}

TEST_CASE("empty trace yields a header-only csv and an empty summary") {
  const fs::path dir = scratch("empty");
  std::ofstream(dir / "trace.jsonl").close();
  std::ostringstream out;
  CHECK(cmd_bench(small_run(), (dir / "trace.jsonl").string(), (dir / "out").string(), out) ==
        kExitOk);
  CHECK(slurp(dir / "out" / "metrics.csv") ==
        "request_id,arrival_ms,ttft_ms,tpot_ms,e2e_ms,tokens_in,tokens_out\n");
  CHECK(slurp(dir / "out" / "steps.jsonl").empty());
  const json s = json::parse(slurp(dir / "out" / "summary.json"));
  CHECK(s["summary"]["empty"] == true);
  CHECK(s["summary"]["requests"] == 0);
}

TEST_CASE("bench outputs are byte-identical across runs") {
  const fs::path dir = scratch("repeat");
  std::ostringstream out;
  cmd_bench(small_run(), std::nullopt, (dir / "a").string(), out);
  RunConfig threaded = small_run();
  threaded.execution = ExecutionMode::Threaded;
  cmd_bench(threaded, std::nullopt, (dir / "b").string(), out);
  for (const char* f : {"metrics.csv", "steps.jsonl"}) {
    CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));
  }
  cmd_bench(small_run(), std::nullopt, (dir / "c").string(), out);
  for (const char* f : {"metrics.csv", "steps.jsonl", "summary.json", "errors.jsonl"}) {
    CHECK(slurp(dir / "a" / f) == slurp(dir / "c" / f));
  }
  CHECK(slurp(dir / "a" / "metrics.csv").size() > 100);
}

TEST_CASE("bench reads a trace file and reports rejected requests") {
  const fs::path dir = scratch("trace");
  std::ofstream(dir / "trace.jsonl")
      << "{\"arrival_ms\":0,\"prompt_len\":30,\"output_len\":4}\n"
      << "{\"arrival_ms\":5,\"prompt_len\":600,\"output_len\":4}\n";
  std::ostringstream out;
  CHECK(cmd_bench(small_run(), (dir / "trace.jsonl").string(), (dir / "out").string(), out) ==
        kExitOk);
  const std::string csv = slurp(dir / "out" / "metrics.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 2);
  const json err = json::parse(slurp(dir / "out" / "errors.jsonl"));
  CHECK(err["request_id"] == 1);
  std::ofstream(dir / "bad.jsonl") << "{\"arrival_ms\":0,\"prompt\":3}\n";
  CHECK_THROWS_AS(cmd_bench(small_run(), (dir / "bad.jsonl").string(), (dir / "o2").string(), out),
                  ConfigError);
}

TEST_CASE("single-value sweep matches a plain bench") {
  const fs::path dir = scratch("sweep");
  RunConfig c = small_run();
  c.policy.token_threshold = 24;
  std::ostringstream out;
  cmd_bench(c, std::nullopt, (dir / "bench").string(), out);
  cmd_sweep(small_run(), std::nullopt, (dir / "sweep").string(), "tau", {"24"}, out);
  for (const char* f : {"metrics.csv", "steps.jsonl", "summary.json"}) {
    CHECK(slurp(dir / "bench" / f) == slurp(dir / "sweep" / "tau_24" / f));
  }
  const std::string table = slurp(dir / "sweep" / "sweep.csv");
  CHECK(std::count(table.begin(), table.end(), '\n') == 2);
  CHECK(table.rfind("knob,value,", 0) == 0);
  CHECK_THROWS_AS(cmd_sweep(small_run(), std::nullopt, dir.string(), "alpha", {"1"}, out),
                  ConfigError);
  CHECK_THROWS_AS(cmd_sweep(small_run(), std::nullopt, dir.string(), "tau", {"0"}, out),
                  ConfigError);
}

TEST_CASE("threshold endpoints reproduce the fixed policies") {
  const fs::path dir = scratch("tau_ends");
  std::ostringstream out;
  cmd_sweep(small_run(), std::nullopt, dir.string(), "tau", {"1", "1000000"}, out);
  auto modes = [](const std::string& jsonl) {
    std::set<std::string> seen;
    std::istringstream in(jsonl);
    for (std::string line; std::getline(in, line);) seen.insert(json::parse(line)["mode"]);
    return seen;
  };
  CHECK(modes(slurp(dir / "tau_1" / "steps.jsonl")) == std::set<std::string>{"SP(4)"});
  CHECK(modes(slurp(dir / "tau_1000000" / "steps.jsonl")) == std::set<std::string>{"TP(4)"});

  for (auto [policy, tau] : {std::pair{PolicyKind::FixedSp, "1"}, std::pair{PolicyKind::FixedTp, "1000000"}}) {
    RunConfig fixed = small_run();
    fixed.policy.kind = policy;
    const fs::path sub = dir / ("fixed_" + std::string(tau));
    cmd_bench(fixed, std::nullopt, sub.string(), out);
    CHECK(slurp(sub / "metrics.csv") == slurp(dir / ("tau_" + std::string(tau)) / "metrics.csv"));
  }
}

TEST_CASE("policy override on the command line takes effect") {
  const fs::path dir = scratch("override");
  const fs::path cfg = write_config(dir, small_config_json());
  CHECK(run({"bench", "--config", cfg.string(), "--policy", "fixed_tp", "--seed", "3", "--out",
             (dir / "o").string()}) == kExitOk);
  const json s = json::parse(slurp(dir / "o" / "summary.json"));
  CHECK(s["config"]["policy"] == "fixed_tp");
  CHECK(s["seed"] == 3);
  CHECK(run({"bench", "--config", cfg.string(), "--policy", "tp", "--out", dir.string()}) ==
        kExitUsage);
}

TEST_CASE("threshold sweep on the burst trace gives non-increasing mode shifts") {
  const fs::path dir = scratch("tau_burst");
  RunConfig c;
  c.execution = ExecutionMode::LockStep;
  std::ostringstream out;
  cmd_sweep(c, std::nullopt, dir.string(), "tau", {"8", "32", "128", "512"}, out);
  std::vector<std::size_t> shifts;
  for (const char* v : {"8", "32", "128", "512"}) {
    const json s = json::parse(slurp(dir / ("tau_" + std::string(v)) / "summary.json"));
    shifts.push_back(s["summary"]["mode_shift_count"]);
  }
  for (std::size_t i = 1; i < shifts.size(); ++i) CHECK(shifts[i] <= shifts[i - 1]);
  CHECK(shifts.front() > shifts.back());
}
