#pragma once

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "shiftpar/config.h"

namespace shiftpar {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

struct CheckResult {
  std::string name;
  std::string status;  // "pass", "fail" or "skipped"
  double measured = 0;
  std::string threshold;
};

// Invariant suite over the configured model shape and world size.
std::vector<CheckResult> run_verify_checks(const RunConfig& config);

nlohmann::json summary_to_json(const Summary& summary);

// Each returns a process exit code. Output files land in out_dir, which is
// created if missing.
int cmd_verify(const RunConfig& config, const std::optional<std::string>& out_dir,
               std::ostream& out);
int cmd_bench(const RunConfig& config, const std::optional<std::string>& trace_path,
              const std::string& out_dir, std::ostream& out);
// Knobs: tau, min_match, max_spec, window, cut_layer. One bench run per
// value under out_dir/<knob>_<value>/, plus out_dir/sweep.csv.
int cmd_sweep(const RunConfig& config, const std::optional<std::string>& trace_path,
              const std::string& out_dir, const std::string& knob,
              const std::vector<std::string>& values, std::ostream& out);

// Full command line: verify|bench|sweep with --config, --trace, --out,
// --policy, --seed, --precision (and --knob/--values for sweep).
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace shiftpar
