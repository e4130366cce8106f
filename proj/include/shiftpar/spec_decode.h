#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "shiftpar/engine.h"

namespace shiftpar {

struct SpeculationConfig {
  bool enabled = false;
  std::size_t min_match = 2;
  std::size_t max_spec = 8;
  std::size_t window = 64;

  void validate() const;
};

struct DraftResult {
  std::vector<Token> tokens;
  std::size_t match_length = 0;
};

// Per-request suffix index over prompt + generated tokens.
//
// propose() finds the longest suffix of the history (at most `window`
// tokens) that also ends at an earlier position, preferring the most recent
// such position among equal lengths, and replays up to max_spec tokens that
// followed it. When the replay reaches the end of the history it continues
// through its own proposed tokens, which is what a periodic continuation of
// the match would produce.
//
// Candidates are found through an index of min_match-grams keyed by their
// end position, so a query only inspects positions that can match.
class SuffixIndex {
 public:
  explicit SuffixIndex(const SpeculationConfig& config);

  void append(Token token);
  void extend(std::span<const Token> tokens);
  const std::vector<Token>& history() const { return history_; }

  DraftResult propose() const;

 private:
  std::uint64_t gram_key(std::size_t end) const;

  SpeculationConfig config_;
  std::vector<Token> history_;
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> grams_;
};

// Greedy generation state of one request inside an engine. The cache holds
// every history token except `pending`, the last emitted one, which the next
// pass consumes.
struct GenerationState {
  RequestId request = 0;
  std::vector<Token> history;
  std::size_t prompt_len = 0;
  std::optional<Token> pending;

  std::size_t emitted() const { return history.size() - prompt_len; }
};

// Chooses the mode of the i-th pass of a generation; nullopt defers to the
// engine policy.
using ModeSchedule = std::function<std::optional<ParallelMode>(std::size_t pass)>;

// Opens the request (capacity prompt + budget) and prefills it, emitting
// the first token. Returns the state and the step result.
std::pair<GenerationState, StepResult> start_generation(
    Engine& engine, RequestId request, std::span<const Token> prompt,
    std::size_t budget, std::optional<ParallelMode> mode = std::nullopt);

// Greedy acceptance over the logits of [pending, draft...] (one row per
// position): the longest draft prefix that agrees with the row argmaxes,
// then the target's own token after it.
struct Acceptance {
  std::size_t accepted = 0;
  std::vector<Token> emitted;
};
Acceptance accept_greedy(const Tensor& logits, std::span<const Token> draft);

// One pass over [pending, draft...]; accepts the longest draft prefix that
// agrees with the target's greedy choices and appends the target's own next
// token. Rejected entries are rolled back by truncating the cache.
struct VerifyOutcome {
  std::vector<Token> emitted;
  std::size_t accepted = 0;
  StepResult step;
};

VerifyOutcome verify_and_accept(Engine& engine, GenerationState& state,
                                std::span<const Token> draft,
                                std::optional<ParallelMode> mode = std::nullopt);

struct GenerationStats {
  std::size_t target_passes = 0;
  std::size_t tokens_emitted = 0;
  std::size_t draft_passes = 0;     // verify passes that carried a draft
  std::size_t accepted_total = 0;   // accepted draft tokens over all passes

  double accepted_len_mean() const {
    return draft_passes == 0 ? 0.0
                             : static_cast<double>(accepted_total) /
                                   static_cast<double>(draft_passes);
  }
};

struct GenerationResult {
  std::vector<Token> output;
  GenerationStats stats;
};

// Plain greedy decoding: one new token per pass.
GenerationResult greedy_generate(Engine& engine, RequestId request,
                                 std::span<const Token> prompt,
                                 std::size_t budget,
                                 const ModeSchedule& schedule = nullptr);

// Suffix-speculative greedy decoding. Output is token-identical to
// greedy_generate; only the number of target passes changes.
GenerationResult decode_with_speculation(Engine& engine, RequestId request,
                                         std::span<const Token> prompt,
                                         std::size_t budget,
                                         const SpeculationConfig& config);

}  // namespace shiftpar
