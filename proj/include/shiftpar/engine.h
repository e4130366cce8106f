#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "shiftpar/fabric.h"
#include "shiftpar/kv_cache.h"
#include "shiftpar/model.h"
#include "shiftpar/swiftkv.h"
#include "shiftpar/tensor.h"

namespace shiftpar {

using RequestId = std::uint64_t;

enum class ModeKind { TP, SP };

// TP(P) or SP(P); the degree always equals the fabric world size.
struct ParallelMode {
  ModeKind kind = ModeKind::TP;
  std::size_t degree = 1;

  bool operator==(const ParallelMode&) const = default;
  std::string to_string() const;
};

enum class BatchKind { Prefill, Decode, Verify };
std::string_view to_string(BatchKind kind);

// New tokens of one request for this pass. They are appended after whatever
// the request's cache already holds.
struct Span {
  RequestId request = 0;
  std::vector<Token> tokens;
  // Return logits for every new position instead of only the last one.
  bool all_logits = false;
};

struct Batch {
  BatchKind kind = BatchKind::Prefill;
  std::vector<Span> spans;

  std::size_t total_new_tokens() const;
};

enum class PolicyKind { FixedTp, FixedSp, Shift };
std::string_view to_string(PolicyKind kind);
PolicyKind parse_policy(std::string_view text);

struct ShiftPolicy {
  PolicyKind kind = PolicyKind::Shift;
  std::size_t token_threshold = 0;  // 0 means 4 * world size

  std::size_t resolved_threshold(std::size_t world_size) const {
    return token_threshold == 0 ? 4 * world_size : token_threshold;
  }
};

// SP(P) when the batch carries at least the threshold of new tokens,
// otherwise TP(P). Fixed policies ignore the batch.
ParallelMode choose_mode(const ShiftPolicy& policy, const Batch& batch,
                         std::size_t world_size);

// Shape of one span as the FLOP model sees it.
struct SpanShape {
  std::size_t start = 0;  // tokens already cached
  std::size_t new_tokens = 0;
  bool all_logits = false;
};

struct FlopReport {
  std::vector<std::uint64_t> per_device;
  std::uint64_t total = 0;

  std::uint64_t max_device() const;
};

// Analytic count of the multiply-adds a pass executes, 2 FLOPs each:
// projections and MLP as 2*m*k*n per matmul, attention as 4*d per
// (query, visible key) pair per head, output head for logit rows only.
// Norms, softmax and activations are not counted.
FlopReport flop_count(std::span<const SpanShape> spans, ParallelMode mode,
                      const ModelConfig& config, bool swiftkv_on,
                      std::size_t cut_layer);

struct EngineOptions {
  std::size_t world_size = 1;
  ExecutionMode execution = ExecutionMode::Threaded;
  ShiftPolicy policy;
  SwiftKvConfig swiftkv;
};

struct StepResult {
  std::uint64_t step_id = 0;
  ParallelMode mode;
  bool mode_switched = false;
  // Cache elements written by the mode change itself; zero by construction
  // of the shared layout, asserted by tests.
  std::uint64_t cache_writes_during_switch = 0;
  bool used_swiftkv = false;
  // Per span: [1 x V] last-position logits, or [n x V] when all_logits.
  std::vector<Tensor> logits;
  // Instrumented multiply-add counts, per device.
  std::vector<std::uint64_t> device_flops;
  std::vector<CommRecord> comm;

  std::uint64_t total_flops() const;
  std::uint64_t max_device_flops() const;
  std::uint64_t comm_bytes_per_device() const;
};

// Executes forward passes over P simulated devices in either mode against
// per-request KV caches whose layout both modes share. Steps are serialized;
// inside a step the device workers run concurrently (or lock-step) and meet
// at collectives.
class Engine {
 public:
  Engine(std::shared_ptr<const ModelWeights> weights, EngineOptions options);

  const ModelConfig& config() const { return weights_->config; }
  const ModelWeights& weights() const { return *weights_; }
  const EngineOptions& options() const { return options_; }
  std::size_t world_size() const { return options_.world_size; }

  // Parameters resident on `rank` in each mode. SP keeps a full replica.
  const TpShard& tp_shard(std::size_t rank) const { return tp_shards_[rank]; }
  const ModelWeights& sp_replica(std::size_t rank) const;

  void open_request(RequestId id, std::size_t capacity);
  void close_request(RequestId id);
  bool has_request(RequestId id) const { return caches_.count(id) != 0; }
  KvCache& cache(RequestId id);
  const KvCache& cache(RequestId id) const;
  std::uint64_t total_cache_writes() const;

  // Mode from the policy; prefill batches take the early-exit path when
  // SwiftKV is enabled.
  StepResult step(const Batch& batch);
  // Same, with the mode forced.
  StepResult step(const Batch& batch, ParallelMode mode);

  StepResult forward_tp(const Batch& batch);
  StepResult forward_sp(const Batch& batch);

  // Early-exit prefill under the policy's mode (or a forced one). Throws
  // ContractError if SwiftKV is disabled or the batch is not a prefill.
  StepResult prefill_swiftkv(const Batch& batch);
  StepResult prefill_swiftkv(const Batch& batch, ParallelMode mode);

  ParallelMode current_mode() const { return current_mode_; }
  const std::vector<ParallelMode>& mode_log() const { return mode_log_; }

  std::vector<SpanShape> span_shapes(const Batch& batch) const;

  DeviceGroup& fabric() { return fabric_; }
  const DeviceGroup& fabric() const { return fabric_; }

 private:
  struct Pass;

  StepResult run(const Batch& batch, ParallelMode mode, bool swiftkv);
  void validate_batch(const Batch& batch) const;

  std::shared_ptr<const ModelWeights> weights_;
  EngineOptions options_;
  DeviceGroup fabric_;
  std::vector<TpShard> tp_shards_;
  std::map<RequestId, KvCache> caches_;
  ParallelMode current_mode_;
  std::vector<ParallelMode> mode_log_;
  std::uint64_t next_step_ = 0;
};

}  // namespace shiftpar
