#include "shiftpar/swiftkv.h"

#include <string>

#include "shiftpar/engine.h"
#include "shiftpar/errors.h"

namespace shiftpar {

void SwiftKvConfig::validate(const ModelConfig& config) const {
  const std::size_t cut = resolved_cut(config);
  if (cut < 1 || cut > config.n_layers) {
    throw ConfigError("swiftkv cut_layer " + std::to_string(cut) +
                      " outside [1, " + std::to_string(config.n_layers) + "]");
  }
}

double swiftkv_flop_ratio(const ModelConfig& config, std::size_t prompt_len,
                          std::size_t cut_layer) {
  const SpanShape span{0, prompt_len, false};
  const ParallelMode single{ModeKind::TP, 1};
  const auto early = flop_count({&span, 1}, single, config, true, cut_layer);
  const auto standard = flop_count({&span, 1}, single, config, false, cut_layer);
  if (standard.total == 0) return 1.0;
  return static_cast<double>(early.total) / static_cast<double>(standard.total);
}

}  // namespace shiftpar
