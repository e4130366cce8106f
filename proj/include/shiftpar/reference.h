#pragma once

#include <span>

#include "shiftpar/kv_cache.h"
#include "shiftpar/model.h"

namespace shiftpar {

struct ReferenceOutput {
  Tensor logits;  // [n x V], one row per position
  KvCache cache;  // single-device layout holding every position
};

// Single-device pre-norm decoder forward over a whole sequence:
// embed + position, then per layer x += attn(norm(x)); x += mlp(norm(x)),
// then final norm and output head. The oracle for every parallel path.
ReferenceOutput forward_reference(const ModelWeights& weights,
                                  std::span<const Token> tokens,
                                  FlopCounter* counter = nullptr);

// Plain greedy rollout through forward_reference, recomputing the full
// prefix each step. Slow; test oracle only.
std::vector<Token> reference_greedy(const ModelWeights& weights,
                                    std::span<const Token> prompt,
                                    std::size_t new_tokens);

}  // namespace shiftpar
