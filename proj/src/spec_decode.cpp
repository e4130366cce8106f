#include "shiftpar/spec_decode.h"

#include <algorithm>
#include <string>

#include "shiftpar/errors.h"

namespace shiftpar {

void SpeculationConfig::validate() const {
  if (min_match < 1) throw ConfigError("speculation.min_match must be >= 1");
  if (max_spec < 1) throw ConfigError("speculation.max_spec must be >= 1");
  if (window < min_match) {
    throw ConfigError("speculation.window must be >= min_match");
  }
}

SuffixIndex::SuffixIndex(const SpeculationConfig& config) : config_(config) {
  config_.validate();
}

std::uint64_t SuffixIndex::gram_key(std::size_t end) const {
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t i = end + 1 - config_.min_match; i <= end; ++i) {
    h ^= history_[i];
    h *= 1099511628211ull;
  }
  return h;
}

void SuffixIndex::append(Token token) {
  history_.push_back(token);
  const std::size_t end = history_.size() - 1;
  if (history_.size() >= config_.min_match) grams_[gram_key(end)].push_back(end);
}

void SuffixIndex::extend(std::span<const Token> tokens) {
  for (Token t : tokens) append(t);
}

DraftResult SuffixIndex::propose() const {
  DraftResult result;
  const std::size_t n = history_.size();
  if (n <= config_.min_match) return result;
  const auto it = grams_.find(gram_key(n - 1));
  if (it == grams_.end()) return result;

  std::size_t best_len = 0, best_end = 0;
  const auto& ends = it->second;
  // Most recent first; only a strictly longer match replaces the best.
  for (auto e = ends.rbegin(); e != ends.rend(); ++e) {
    const std::size_t end = *e;
    if (end + 1 >= n) continue;
    const std::size_t cap = std::min(config_.window, end + 1);
    std::size_t len = 0;
    while (len < cap && history_[end - len] == history_[n - 1 - len]) ++len;
    if (len > best_len) {
      best_len = len;
      best_end = end;
      if (len == config_.window) break;
    }
  }
  if (best_len < config_.min_match) return result;

  result.match_length = best_len;
  std::vector<Token> extended;
  for (std::size_t i = 0; i < config_.max_spec; ++i) {
    const std::size_t src = best_end + 1 + i;
    const Token t = src < n ? history_[src] : extended[src - n];
    extended.push_back(t);
  }
  result.tokens = std::move(extended);
  return result;
}

namespace {

StepResult run_step(Engine& engine, const Batch& batch,
                    std::optional<ParallelMode> mode) {
  return mode ? engine.step(batch, *mode) : engine.step(batch);
}

}  // namespace

std::pair<GenerationState, StepResult> start_generation(
    Engine& engine, RequestId request, std::span<const Token> prompt,
    std::size_t budget, std::optional<ParallelMode> mode) {
  SHIFTPAR_CHECK(!prompt.empty(), "generation needs a nonempty prompt");
  SHIFTPAR_CHECK(budget >= 1, "start_generation needs a budget of at least 1");
  engine.open_request(request, prompt.size() + budget);
  Batch batch{BatchKind::Prefill, {Span{request, {prompt.begin(), prompt.end()}, false}}};
  StepResult step = run_step(engine, batch, mode);
  GenerationState state;
  state.request = request;
  state.history.assign(prompt.begin(), prompt.end());
  state.prompt_len = prompt.size();
  const Token first = static_cast<Token>(argmax_row(step.logits[0], 0));
  state.history.push_back(first);
  state.pending = first;
  return {std::move(state), std::move(step)};
}

Acceptance accept_greedy(const Tensor& logits, std::span<const Token> draft) {
  SHIFTPAR_CHECK(logits.rows() == draft.size() + 1,
                 "accept_greedy: need one logit row per position");
  Acceptance out;
  Token next = static_cast<Token>(argmax_row(logits, 0));
  while (out.accepted < draft.size() && draft[out.accepted] == next) {
    out.emitted.push_back(next);
    ++out.accepted;
    next = static_cast<Token>(argmax_row(logits, out.accepted));
  }
  out.emitted.push_back(next);
  return out;
}

VerifyOutcome verify_and_accept(Engine& engine, GenerationState& state,
                                std::span<const Token> draft,
                                std::optional<ParallelMode> mode) {
  SHIFTPAR_CHECK(state.pending.has_value(),
                 "verify_and_accept: no pending token to extend from");
  for (Token t : draft) {
    if (t >= engine.config().vocab) {
      throw ContractError("draft token id " + std::to_string(t) +
                          " outside vocabulary of " +
                          std::to_string(engine.config().vocab));
    }
  }
  KvCache& cache = engine.cache(state.request);
  const std::size_t before = cache.token_count();

  Span span{state.request, {*state.pending}, !draft.empty()};
  span.tokens.insert(span.tokens.end(), draft.begin(), draft.end());
  const Batch batch{draft.empty() ? BatchKind::Decode : BatchKind::Verify, {span}};

  VerifyOutcome out;
  out.step = run_step(engine, batch, mode);
  Acceptance acc = accept_greedy(out.step.logits[0], draft);
  // Keep the pending token plus the accepted draft prefix.
  cache.truncate(before + 1 + acc.accepted);

  out.accepted = acc.accepted;
  out.emitted = std::move(acc.emitted);
  state.history.insert(state.history.end(), out.emitted.begin(), out.emitted.end());
  state.pending = out.emitted.back();
  return out;
}

GenerationResult greedy_generate(Engine& engine, RequestId request,
                                 std::span<const Token> prompt,
                                 std::size_t budget, const ModeSchedule& schedule) {
  GenerationResult result;
  if (budget == 0) return result;
  auto mode_for = [&](std::size_t pass) {
    return schedule ? schedule(pass) : std::optional<ParallelMode>{};
  };
  auto [state, step] = start_generation(engine, request, prompt, budget, mode_for(0));
  result.stats.target_passes = 1;
  while (state.emitted() < budget) {
    verify_and_accept(engine, state, {}, mode_for(result.stats.target_passes));
    ++result.stats.target_passes;
  }
  result.output.assign(state.history.begin() + static_cast<std::ptrdiff_t>(state.prompt_len),
                       state.history.end());
  result.stats.tokens_emitted = result.output.size();
  return result;
}

GenerationResult decode_with_speculation(Engine& engine, RequestId request,
                                         std::span<const Token> prompt,
                                         std::size_t budget,
                                         const SpeculationConfig& config) {
  GenerationResult result;
  if (budget == 0) return result;
  SuffixIndex index(config);
  auto [state, step] = start_generation(engine, request, prompt, budget);
  result.stats.target_passes = 1;
  index.extend(state.history);
  while (state.emitted() < budget) {
    DraftResult draft = index.propose();
    // Never speculate past the budget: the pass itself adds one token.
    const std::size_t room = budget - state.emitted() - 1;
    if (draft.tokens.size() > room) draft.tokens.resize(room);
    const VerifyOutcome out = verify_and_accept(engine, state, draft.tokens);
    ++result.stats.target_passes;
    if (!draft.tokens.empty()) {
      ++result.stats.draft_passes;
      result.stats.accepted_total += out.accepted;
    }
    index.extend(out.emitted);
  }
  result.output.assign(state.history.begin() + static_cast<std::ptrdiff_t>(state.prompt_len),
                       state.history.end());
  result.stats.tokens_emitted = result.output.size();
  return result;
}

}  // namespace shiftpar
