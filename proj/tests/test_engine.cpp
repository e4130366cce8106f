#include <memory>

#include "doctest.h"
#include "shiftpar/engine.h"
#include "shiftpar/errors.h"
#include "shiftpar/reference.h"
#include "shiftpar/spec_decode.h"
#include "test_util.h"

using namespace shiftpar;
using shiftpar::testing::random_tokens;
using shiftpar::testing::small_config;

namespace {

std::shared_ptr<const ModelWeights> weights_for(const ModelConfig& c, std::uint64_t seed) {
  return std::make_shared<const ModelWeights>(init_weights(c, seed));
}

Engine make_engine(std::shared_ptr<const ModelWeights> w, std::size_t world,
                   PolicyKind policy = PolicyKind::Shift,
                   ExecutionMode exec = ExecutionMode::LockStep) {
  EngineOptions o;
  o.world_size = world;
  o.execution = exec;
  o.policy.kind = policy;
  return Engine(std::move(w), o);
}

Batch prefill(RequestId id, std::vector<Token> tokens, bool all_logits = false) {
  return Batch{BatchKind::Prefill, {Span{id, std::move(tokens), all_logits}}};
}

Batch decode(RequestId id, Token t) {
  return Batch{BatchKind::Decode, {Span{id, {t}, false}}};
}

ParallelMode tp(std::size_t p) { return {ModeKind::TP, p}; }
ParallelMode sp(std::size_t p) { return {ModeKind::SP, p}; }

}  // namespace

TEST_CASE("choose_mode follows the token threshold") {
  ShiftPolicy policy;
  policy.token_threshold = 256;
  Batch dec{BatchKind::Decode, {}};
  for (RequestId i = 0; i < 8; ++i) dec.spans.push_back(Span{i, {1}, false});
  CHECK(choose_mode(policy, dec, 8) == tp(8));
  CHECK(choose_mode(policy, prefill(0, std::vector<Token>(1024, 1)), 8) == sp(8));
  CHECK(choose_mode(policy, prefill(0, std::vector<Token>(256, 1)), 8) == sp(8));
  CHECK(choose_mode(policy, prefill(0, std::vector<Token>(255, 1)), 8) == tp(8));

  ShiftPolicy def;  // tau = 4P
  CHECK(choose_mode(def, prefill(0, std::vector<Token>(16, 1)), 4) == sp(4));
  CHECK(choose_mode(def, prefill(0, std::vector<Token>(15, 1)), 4) == tp(4));

  ShiftPolicy fixed{PolicyKind::FixedTp, 0};
  CHECK(choose_mode(fixed, prefill(0, std::vector<Token>(1024, 1)), 8) == tp(8));
  fixed.kind = PolicyKind::FixedSp;
  CHECK(choose_mode(fixed, dec, 8) == sp(8));
  CHECK(parse_policy("shift") == PolicyKind::Shift);
  CHECK(parse_policy("fixed_tp") == PolicyKind::FixedTp);
  CHECK(parse_policy("fixed_sp") == PolicyKind::FixedSp);
  CHECK_THROWS_AS(parse_policy("dp"), ConfigError);
}

TEST_CASE("engine logs the chosen mode for alternating batches") {
  ModelConfig c = small_config();
  auto w = weights_for(c, 1);
  EngineOptions o;
  o.world_size = 2;
  o.execution = ExecutionMode::LockStep;
  o.policy.token_threshold = 16;
  Engine e(w, o);
  e.open_request(1, 64);
  e.open_request(2, 64);
  e.step(prefill(1, random_tokens(20, 64, 1)));
  e.step(decode(1, 3));
  e.step(prefill(2, random_tokens(20, 64, 2)));
  e.step(decode(2, 4));
  CHECK(e.mode_log() == std::vector<ParallelMode>{sp(2), tp(2), sp(2), tp(2)});
}

TEST_CASE("P=1 matches the reference bit-for-bit in both modes") {
  const ModelConfig c = small_config();
  auto w = weights_for(c, 2);
  const auto tokens = random_tokens(16, c.vocab, 3);
  const Tensor ref = forward_reference(*w, tokens).logits;
  for (ParallelMode mode : {tp(1), sp(1)}) {
    Engine e = make_engine(w, 1);
    e.open_request(7, 16);
    const StepResult r = e.step(prefill(7, tokens, true), mode);
    CHECK(bit_equal(r.logits[0], ref));
    CHECK(r.comm.empty());
  }
}

TEST_CASE("TP and SP prefill and decode match the reference") {
  ModelConfig c;  // default shape: L=4, H=8, d=16
  c.max_seq = 128;
  auto w = weights_for(c, 4);
  const auto tokens = random_tokens(40, c.vocab, 5);
  const Tensor ref = forward_reference(*w, tokens).logits;
  for (std::size_t world : {2, 4, 8}) {
    for (ParallelMode mode : {tp(world), sp(world)}) {
      CAPTURE(mode.to_string());
      Engine e = make_engine(w, world);
      e.open_request(1, 40);
      const std::vector<Token> prompt(tokens.begin(), tokens.begin() + 33);
      const StepResult r = e.step(prefill(1, prompt, true), mode);
      CHECK(max_relative_diff(r.logits[0], slice_rows(ref, 0, 33)) <= 1e-10);
      for (std::size_t i = 33; i < 40; ++i) {
        const StepResult d = e.step(decode(1, tokens[i]), mode);
        CHECK(max_relative_diff(d.logits[0], slice_rows(ref, i, i + 1)) <= 1e-10);
      }
    }
  }
}

TEST_CASE("layer-0 cache entries are bit-identical between TP and SP") {
  ModelConfig c;
  c.max_seq = 128;
  auto w = weights_for(c, 6);
  const auto tokens = random_tokens(37, c.vocab, 7);
  const ReferenceOutput ref = forward_reference(*w, tokens);
  Engine a = make_engine(w, 4), b = make_engine(w, 4);
  a.open_request(1, 37);
  b.open_request(1, 37);
  a.step(prefill(1, tokens), tp(4));
  b.step(prefill(1, tokens), sp(4));
  const KvCache &ka = a.cache(1), &kb = b.cache(1);
  CHECK(ka.fingerprint() == kb.fingerprint());
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t j = 0; j < 2; ++j) {
      const KvView x = ka.read_window(r, 0, j), y = kb.read_window(r, 0, j);
      REQUIRE(x.tokens == 37);
      CHECK(std::equal(x.keys.begin(), x.keys.end(), y.keys.begin()));
      CHECK(std::equal(x.values.begin(), x.values.end(), y.values.begin()));
      // Also identical to the single-device reference cache.
      const KvView z = ref.cache.read_window(0, 0, r * 2 + j);
      CHECK(std::equal(x.keys.begin(), x.keys.end(), z.keys.begin()));
    }
  }
}

TEST_CASE("greedy generation is identical across modes and schedules") {
  ModelConfig c;
  c.max_seq = 128;
  auto w = weights_for(c, 8);
  const auto prompt = random_tokens(24, c.vocab, 9);
  const std::vector<Token> oracle = reference_greedy(*w, prompt, 32);
  for (ParallelMode mode : {tp(4), sp(4)}) {
    Engine e = make_engine(w, 4);
    const auto out = greedy_generate(e, 1, prompt, 32, [&](std::size_t) { return mode; });
    CHECK(out.output == oracle);
    CHECK(out.stats.target_passes == 32);
  }
  Engine mixed = make_engine(w, 4);
  const auto sched = [](std::size_t pass) -> std::optional<ParallelMode> {
    return pass % 3 == 1 ? sp(4) : tp(4);
  };
  CHECK(greedy_generate(mixed, 1, prompt, 32, sched).output == oracle);
}

TEST_CASE("mode switches keep the fingerprint and write nothing") {
  ModelConfig c = small_config();
  auto w = weights_for(c, 10);
  Engine e = make_engine(w, 4);
  e.open_request(1, 64);
  e.step(prefill(1, random_tokens(10, c.vocab, 1)), tp(4));
  LayoutFingerprint fp = e.cache(1).fingerprint();
  const ParallelMode schedule[] = {sp(4), sp(4), tp(4), sp(4), tp(4), tp(4)};
  for (ParallelMode m : schedule) {
    const bool switching = !(m == e.current_mode());
    const StepResult r = e.step(decode(1, 5), m);
    CHECK(r.mode_switched == switching);
    CHECK(r.cache_writes_during_switch == 0);
    fp.token_count += 1;
    CHECK(e.cache(1).fingerprint() == fp);
  }
}

TEST_CASE("SP communication is a fraction of TP at long prefills") {
  ModelConfig c;
  c.max_seq = 512;
  auto w = weights_for(c, 11);
  const auto tokens = random_tokens(256, c.vocab, 12);
  for (std::size_t world : {2, 4}) {
    Engine a = make_engine(w, world), b = make_engine(w, world);
    a.open_request(1, 256);
    b.open_request(1, 256);
    const std::uint64_t tp_bytes = a.step(prefill(1, tokens), tp(world)).comm_bytes_per_device();
    const std::uint64_t sp_bytes = b.step(prefill(1, tokens), sp(world)).comm_bytes_per_device();
    const double ratio = static_cast<double>(sp_bytes) / static_cast<double>(tp_bytes);
    CHECK(ratio * static_cast<double>(world) >= 0.8);
    CHECK(ratio * static_cast<double>(world) <= 1.25);
  }
}

TEST_CASE("flop_count matches the instrumented counters") {
  ModelConfig c = small_config();
  auto w = weights_for(c, 13);
  for (std::size_t world : {1, 2, 4}) {
    for (ParallelMode mode : {tp(world), sp(world)}) {
      CAPTURE(mode.to_string());
      Engine e = make_engine(w, world);
      e.open_request(1, 64);
      e.open_request(2, 64);
      e.open_request(3, 64);
      const Batch batches[] = {
          prefill(1, random_tokens(13, c.vocab, 1)),
          Batch{BatchKind::Prefill,
                {Span{2, random_tokens(5, c.vocab, 2), false},
                 Span{3, random_tokens(9, c.vocab, 3), true}}},
          Batch{BatchKind::Decode, {Span{1, {4}, false}, Span{2, {7}, false}}},
          Batch{BatchKind::Verify, {Span{3, {1, 2, 3}, true}}},
      };
      for (const Batch& b : batches) {
        const auto shapes = e.span_shapes(b);
        const FlopReport predicted = flop_count(shapes, mode, c, false, 0);
        const StepResult r = e.step(b, mode);
        CHECK(r.device_flops == predicted.per_device);
        CHECK(r.total_flops() == predicted.total);
      }
    }
  }
}

TEST_CASE("single-token decode FLOPs have the closed form") {
  const ModelConfig c;  // h=128, f=512, V=256, L=4, d=16, H=8
  const std::uint64_t h = 128, f = 512, v = 256, layers = 4;
  for (std::size_t cached : {0, 10, 99}) {
    const SpanShape s{cached, 1, false};
    const std::uint64_t attention = layers * 8 * 4 * 16 * (cached + 1);
    const std::uint64_t expected = layers * (8 * h * h + 4 * h * f) + 2 * h * v + attention;
    CHECK(flop_count(std::span(&s, 1), tp(1), c, false, 0).total == expected);
    // Sharding spreads the work but conserves it.
    CHECK(flop_count(std::span(&s, 1), tp(4), c, false, 0).total == expected);
  }
  // Linear in the number of single-token spans at equal context.
  const std::vector<SpanShape> many(6, SpanShape{20, 1, false});
  const SpanShape one{20, 1, false};
  CHECK(flop_count(many, tp(2), c, false, 0).total ==
        6 * flop_count(std::span(&one, 1), tp(2), c, false, 0).total);
}

TEST_CASE("threaded and lock-step execution agree bit-for-bit") {
  ModelConfig c = small_config();
  auto w = weights_for(c, 14);
  const auto tokens = random_tokens(21, c.vocab, 15);
  std::vector<std::vector<Tensor>> results;
  for (ExecutionMode exec : {ExecutionMode::Threaded, ExecutionMode::LockStep}) {
    Engine e = make_engine(w, 4, PolicyKind::Shift, exec);
    e.open_request(1, 32);
    std::vector<Tensor> logits;
    logits.push_back(e.step(prefill(1, tokens, true), sp(4)).logits[0]);
    logits.push_back(e.step(decode(1, 3), tp(4)).logits[0]);
    results.push_back(std::move(logits));
  }
  for (std::size_t i = 0; i < results[0].size(); ++i) {
    CHECK(bit_equal(results[0][i], results[1][i]));
  }
}

TEST_CASE("f32 engine stays within 1e-4 of the f64 reference") {
  ModelConfig c64 = small_config();
  ModelConfig c32 = c64;
  c32.precision = Precision::F32;
  auto w64 = weights_for(c64, 16);
  auto w32 = weights_for(c32, 16);
  const auto tokens = random_tokens(24, c64.vocab, 17);
  const Tensor ref = forward_reference(*w64, tokens).logits;
  for (ParallelMode mode : {tp(2), sp(2)}) {
    Engine e = make_engine(w32, 2);
    e.open_request(1, 24);
    const StepResult r = e.step(prefill(1, tokens, true), mode);
    CHECK(r.logits[0].precision() == Precision::F32);
    CHECK(max_relative_diff(r.logits[0], ref) <= 1e-4);
  }
}

TEST_CASE("engine rejects malformed batches") {
  ModelConfig c = small_config();
  auto w = weights_for(c, 18);
  Engine e = make_engine(w, 2);
  e.open_request(1, 4);
  CHECK_THROWS_AS(e.step(Batch{BatchKind::Prefill, {}}), ContractError);
  CHECK_THROWS_AS(e.step(prefill(9, {1})), ContractError);
  CHECK_THROWS_AS(e.step(prefill(1, {64})), ContractError);
  CHECK_THROWS_AS(e.step(prefill(1, {1, 2, 3, 4, 5})), ContractError);
  CHECK_THROWS_AS(e.step(Batch{BatchKind::Decode, {Span{1, {1, 2}, false}}}), ContractError);
  CHECK_THROWS_AS(e.step(Batch{BatchKind::Prefill, {Span{1, {1}, false}, Span{1, {2}, false}}}),
                  ContractError);
  // Failed steps leave the cache untouched.
  CHECK(e.cache(1).token_count() == 0);
  CHECK(e.total_cache_writes() == 0);
  e.step(prefill(1, {1, 2, 3, 4}));
  CHECK(e.cache(1).token_count() == 4);
  CHECK_THROWS_AS(e.step(decode(1, 5)), ContractError);
  CHECK_THROWS_AS(e.open_request(1, 4), ContractError);
  e.close_request(1);
  CHECK_FALSE(e.has_request(1));
}

TEST_CASE("engine construction validates the world size") {
  ModelConfig c = small_config();
  c.n_heads = 6;
  c.head_dim = 8;
  auto w = weights_for(c, 19);
  CHECK_THROWS_AS(make_engine(w, 4), ConfigError);
}

TEST_CASE("TP residency is a 1/P shard; SP is the full replica") {
  ModelConfig c = small_config();
  auto w = weights_for(c, 20);
  Engine e = make_engine(w, 4);
  for (std::size_t r = 0; r < 4; ++r) {
    CHECK(e.tp_shard(r).layers[0].wq.cols() == c.hidden() / 4);
    CHECK(&e.sp_replica(r) == w.get());
    CHECK(check_shard_containment(*w, e.sp_replica(r), r, 4));
  }
}
