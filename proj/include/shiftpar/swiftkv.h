#pragma once

#include <cstddef>

#include "shiftpar/model.h"

namespace shiftpar {

// Early-exit prefill. Prompt tokens run layers [0, cut_layer) in full; the
// residual stream at cut_layer is then normalized with each later layer's
// attention gain and projected through that layer's Wk/Wv to fill its cache.
// Only the final prompt position continues through the later layers.
// cut_layer == n_layers degenerates to a standard prefill.
struct SwiftKvConfig {
  bool enabled = false;
  std::size_t cut_layer = 0;  // 0 means n_layers / 2

  std::size_t resolved_cut(const ModelConfig& config) const {
    return cut_layer == 0 ? config.n_layers / 2 : cut_layer;
  }
  // Throws ConfigError unless 1 <= cut <= n_layers.
  void validate(const ModelConfig& config) const;
};

// FLOPs(early-exit prefill) / FLOPs(standard prefill) for one fresh prompt,
// from the same analytic count the engine's instrumented counter matches.
double swiftkv_flop_ratio(const ModelConfig& config, std::size_t prompt_len,
                          std::size_t cut_layer);

}  // namespace shiftpar
