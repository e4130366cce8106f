#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include "shiftpar/tensor.h"

namespace shiftpar {

enum class CollectiveKind { AllReduce = 0, AllToAll = 1, AllGather = 2, Broadcast = 3 };
inline constexpr std::size_t kCollectiveKinds = 4;

std::string_view to_string(CollectiveKind kind);

struct CommRecord {
  CollectiveKind kind;
  std::uint64_t bytes_sent_per_device = 0;
  std::uint64_t step_id = 0;
};

// Threaded: one worker per simulated device, synchronized at collectives.
// LockStep: ranks run one after another on the caller's thread. Both must
// produce identical results.
enum class ExecutionMode { Threaded, LockStep };

std::string_view to_string(ExecutionMode mode);
ExecutionMode parse_execution_mode(std::string_view text);

// Per-device cumulative bytes sent, split by collective kind.
struct LedgerReport {
  std::vector<std::array<std::uint64_t, kCollectiveKinds>> bytes;

  std::uint64_t device_total(std::size_t rank) const;
  std::uint64_t kind_total(std::size_t rank, CollectiveKind kind) const {
    return bytes[rank][static_cast<std::size_t>(kind)];
  }
};

// Byte formulas (ring model), per device:
//   all-reduce  2(P-1)/P * tensor_bytes
//   all-to-all  (P-1)/P  * total bytes a rank holds before the exchange
//   all-gather  (P-1)/P  * bytes of the full concatenation
//   broadcast   (P-1)/P  * tensor_bytes
// Fractions are floored to whole bytes.
std::uint64_t all_reduce_bytes(std::size_t world, std::uint64_t tensor_bytes);
std::uint64_t all_to_all_bytes(std::size_t world, std::uint64_t local_bytes);
std::uint64_t all_gather_bytes(std::size_t world, std::uint64_t concat_bytes);

// A group of P simulated devices. Compute is dispatched per rank with run();
// collectives take every rank's contribution at once and act as the barrier
// between compute phases. Reductions are rank-ordered, so results never
// depend on worker scheduling.
class DeviceGroup {
 public:
  explicit DeviceGroup(std::size_t world_size,
                       ExecutionMode mode = ExecutionMode::Threaded);
  ~DeviceGroup();
  DeviceGroup(const DeviceGroup&) = delete;
  DeviceGroup& operator=(const DeviceGroup&) = delete;

  std::size_t world_size() const { return world_size_; }
  ExecutionMode execution_mode() const { return mode_; }

  // Executes fn(rank) for every rank and waits for all of them. If any rank
  // throws, the exception of the lowest failing rank is rethrown.
  void run(const std::function<void(std::size_t)>& fn);

  std::vector<Tensor> all_reduce_sum(std::span<const Tensor> contributions);

  // blocks[r][s] is the block rank r sends to rank s. Returns received[s],
  // where received[s][r] == blocks[r][s].
  std::vector<std::vector<Tensor>> all_to_all(
      const std::vector<std::vector<Tensor>>& blocks);

  // Concatenates the shards along axis 0 in rank order on every rank.
  std::vector<Tensor> all_gather(std::span<const Tensor> shards);

  std::vector<Tensor> broadcast(const Tensor& value, std::size_t root);

  // Tags subsequent comm records with step_id.
  void begin_step(std::uint64_t step_id) { step_id_ = step_id; }

  LedgerReport ledger_report() const;
  const std::vector<CommRecord>& records() const { return records_; }

 private:
  void record(CollectiveKind kind, std::uint64_t bytes);

  class WorkerPool;

  std::size_t world_size_;
  ExecutionMode mode_;
  std::unique_ptr<WorkerPool> pool_;
  std::uint64_t step_id_ = 0;
  std::vector<CommRecord> records_;
  std::vector<std::array<std::uint64_t, kCollectiveKinds>> ledger_;
};

}  // namespace shiftpar
