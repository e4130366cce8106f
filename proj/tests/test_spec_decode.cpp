#include <memory>
#include <random>

#include "doctest.h"
#include "shiftpar/errors.h"
#include "shiftpar/reference.h"
#include "shiftpar/spec_decode.h"
#include "test_util.h"

using namespace shiftpar;
using shiftpar::testing::random_tokens;
using shiftpar::testing::small_config;

namespace {

SpeculationConfig spec(std::size_t min_match, std::size_t k, std::size_t window = 64) {
  SpeculationConfig c;
  c.enabled = true;
  c.min_match = min_match;
  c.max_spec = k;
  c.window = window;
  return c;
}

std::vector<Token> propose_of(const std::vector<Token>& history, const SpeculationConfig& c) {
  SuffixIndex index(c);
  index.extend(history);
  return index.propose().tokens;
}

// Scans every suffix length from longest to shortest and every earlier end
// position from latest to earliest.
std::vector<Token> brute_force(const std::vector<Token>& h, const SpeculationConfig& c) {
  const std::size_t n = h.size();
  for (std::size_t len = std::min(c.window, n - 1); len >= c.min_match && len >= 1; --len) {
    for (std::size_t end = n - 1; end-- > 0;) {
      if (end + 1 < len) break;
      bool match = true;
      for (std::size_t i = 0; i < len && match; ++i) match = h[end - i] == h[n - 1 - i];
      if (!match) continue;
      std::vector<Token> ext = h;
      std::vector<Token> out;
      for (std::size_t i = 0; i < c.max_spec; ++i) {
        ext.push_back(ext[end + 1 + i]);
        out.push_back(ext.back());
      }
      return out;
    }
  }
  return {};
}

std::shared_ptr<const ModelWeights> weights(std::uint64_t seed) {
  return std::make_shared<const ModelWeights>(init_weights(small_config(), seed));
}

Engine engine(std::shared_ptr<const ModelWeights> w, std::size_t world = 2) {
  EngineOptions o;
  o.world_size = world;
  o.execution = ExecutionMode::LockStep;
  return Engine(std::move(w), o);
}

}  // namespace

TEST_CASE("propose examples") {
  CHECK(propose_of({5, 7, 9, 5, 7}, spec(2, 3)) == std::vector<Token>{9, 5, 7});
  CHECK(propose_of({5, 7, 9, 5, 7}, spec(2, 1)) == std::vector<Token>{9});
  CHECK(propose_of({1, 2, 3}, spec(2, 8)).empty());
  CHECK(propose_of({4, 4, 4, 4}, spec(2, 2)) == std::vector<Token>{4, 4});
  CHECK(propose_of({4}, spec(1, 2)).empty());
  // Two equal-length matches: the later one wins.
  CHECK(propose_of({1, 2, 8, 1, 2, 9, 1, 2}, spec(2, 1)) == std::vector<Token>{9});
  // A longer match beats a more recent shorter one.
  CHECK(propose_of({3, 1, 2, 8, 1, 2, 9, 3, 1, 2}, spec(2, 1)) == std::vector<Token>{8});
}

TEST_CASE("propose reports the match length") {
  SuffixIndex index(spec(2, 4));
  index.extend(std::vector<Token>{6, 1, 2, 3, 0, 1, 2, 3});
  const DraftResult d = index.propose();
  CHECK(d.match_length == 3);
  CHECK(d.tokens == std::vector<Token>{0, 1, 2, 3});
}

TEST_CASE("propose matches the brute-force oracle on random histories") {
  const SpeculationConfig configs[] = {spec(2, 8), spec(1, 3), spec(3, 5), spec(2, 4, 4)};
  for (const SpeculationConfig& c : configs) {
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
      const auto h = random_tokens(60, 3 + seed % 3, seed);
      SuffixIndex index(c);
      for (std::size_t i = 0; i < h.size(); ++i) {
        index.append(h[i]);
        const std::vector<Token> prefix(h.begin(), h.begin() + static_cast<std::ptrdiff_t>(i + 1));
        const DraftResult d = index.propose();
        CHECK(d.tokens == brute_force(prefix, c));
        CHECK(d.tokens.size() <= c.max_spec);
      }
    }
  }
}

TEST_CASE("speculation config validation") {
  CHECK_THROWS_AS(SuffixIndex(spec(0, 8)), ConfigError);
  CHECK_THROWS_AS(SuffixIndex(spec(2, 0)), ConfigError);
  CHECK_THROWS_AS(SuffixIndex(spec(4, 8, 3)), ConfigError);
}

TEST_CASE("verify with an empty draft is one greedy step") {
  auto w = weights(1);
  const auto prompt = random_tokens(10, 64, 2);
  const auto oracle = reference_greedy(*w, prompt, 4);
  Engine e = engine(w);
  auto [state, step] = start_generation(e, 1, prompt, 4);
  CHECK(state.history.back() == oracle[0]);
  for (std::size_t i = 1; i < 4; ++i) {
    const VerifyOutcome out = verify_and_accept(e, state, {});
    CHECK(out.emitted == std::vector<Token>{oracle[i]});
    CHECK(out.accepted == 0);
  }
}

TEST_CASE("verify accepts a greedy-consistent draft in full") {
  auto w = weights(3);
  const auto prompt = random_tokens(12, 64, 4);
  const auto oracle = reference_greedy(*w, prompt, 6);
  Engine e = engine(w);
  auto [state, step] = start_generation(e, 1, prompt, 6);
  const std::vector<Token> draft(oracle.begin() + 1, oracle.begin() + 5);
  const VerifyOutcome out = verify_and_accept(e, state, draft);
  CHECK(out.accepted == 4);
  CHECK(out.emitted == std::vector<Token>(oracle.begin() + 1, oracle.end()));
  CHECK(e.cache(1).token_count() == prompt.size() + 5);
}

TEST_CASE("verify stops at the first mismatch and rolls back") {
  auto w = weights(5);
  const auto prompt = random_tokens(12, 64, 6);
  const auto oracle = reference_greedy(*w, prompt, 5);
  Engine e = engine(w);
  auto [state, step] = start_generation(e, 1, prompt, 5);
  std::vector<Token> draft(oracle.begin() + 1, oracle.begin() + 5);
  draft[2] = (draft[2] + 1) % 64;
  const std::uint64_t writes_before = e.cache(1).write_count();
  const std::size_t tokens_before = e.cache(1).token_count();
  const VerifyOutcome out = verify_and_accept(e, state, draft);
  CHECK(out.accepted == 2);
  CHECK(out.emitted == std::vector<Token>(oracle.begin() + 1, oracle.begin() + 4));

  // Rollback writes nothing beyond the pass's own appends.
  const KvCache& cache = e.cache(1);
  const std::uint64_t per_token = 2 * 2 * small_config().hidden();  // layers x (k,v) x h
  CHECK(cache.write_count() - writes_before == (1 + draft.size()) * per_token);
  CHECK(cache.token_count() == tokens_before + 3);
  CHECK(cache.token_count() == state.history.size() - 1);

  // Cached entries equal a from-scratch prefill of the same tokens.
  const std::vector<Token> seen(state.history.begin(), state.history.end() - 1);
  const ReferenceOutput ref = forward_reference(*w, seen);
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t l = 0; l < 2; ++l) {
      for (std::size_t j = 0; j < 2; ++j) {
        const KvView got = cache.read_window(r, l, j);
        const KvView want = ref.cache.read_window(0, l, 2 * r + j);
        REQUIRE(got.tokens == want.tokens);
        double err = 0, scale = 0;
        for (std::size_t i = 0; i < got.keys.size(); ++i) {
          err = std::max({err, std::abs(got.keys[i] - want.keys[i]),
                          std::abs(got.values[i] - want.values[i])});
          scale = std::max({scale, std::abs(want.keys[i]), std::abs(want.values[i])});
        }
        CHECK(err <= 1e-10 * scale);
      }
    }
  }
}

TEST_CASE("verify rejects out-of-vocabulary drafts") {
  auto w = weights(7);
  Engine e = engine(w);
  auto [state, step] = start_generation(e, 1, std::vector<Token>{1, 2, 3}, 4);
  const std::vector<Token> bad{64};
  CHECK_THROWS_AS(verify_and_accept(e, state, bad), ContractError);
  CHECK(e.cache(1).token_count() == 3);
}

TEST_CASE("speculative output equals plain greedy") {
  auto w = weights(8);
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const auto prompt = random_tokens(8 + seed, 64, 100 + seed);
    Engine a = engine(w), b = engine(w);
    const GenerationResult plain = greedy_generate(a, 1, prompt, 40);
    const GenerationResult fast = decode_with_speculation(b, 1, prompt, 40, spec(2, 8));
    CHECK(fast.output == plain.output);
    CHECK(fast.output == reference_greedy(*w, prompt, 40));
    CHECK(plain.stats.target_passes == 40);
    CHECK(fast.stats.target_passes <= 40);
    CHECK(fast.stats.tokens_emitted == 40);
    CHECK(b.cache(1).token_count() == prompt.size() + 39);
  }
}

TEST_CASE("speculation on a periodic history saves passes") {
  // Cycle detection in the proposer: once the greedy output repeats with a
  // short period, each pass accepts the full draft.
  auto w = weights(9);
  const auto prompt = random_tokens(8, 64, 11);
  Engine a = engine(w), b = engine(w);
  const GenerationResult plain = greedy_generate(a, 1, prompt, 120);
  const GenerationResult fast = decode_with_speculation(b, 1, prompt, 120, spec(2, 8));
  CHECK(fast.output == plain.output);
  CHECK(fast.stats.target_passes <= plain.stats.target_passes);
  CHECK(fast.stats.accepted_total + fast.stats.target_passes == 120);
}

TEST_CASE("zero budget produces nothing") {
  auto w = weights(10);
  Engine e = engine(w);
  const GenerationResult r = decode_with_speculation(e, 1, std::vector<Token>{1, 2}, 0, spec(2, 8));
  CHECK(r.output.empty());
  CHECK(r.stats.target_passes == 0);
  CHECK_FALSE(e.has_request(1));
}
