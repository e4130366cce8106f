#include "shiftpar/fabric.h"

#include <condition_variable>
#include <exception>
#include <mutex>
#include <thread>

#include "shiftpar/errors.h"

namespace shiftpar {

std::string_view to_string(CollectiveKind kind) {
  switch (kind) {
    case CollectiveKind::AllReduce: return "all_reduce";
    case CollectiveKind::AllToAll: return "all_to_all";
    case CollectiveKind::AllGather: return "all_gather";
    case CollectiveKind::Broadcast: return "broadcast";
  }
  return "unknown";
}

std::string_view to_string(ExecutionMode mode) {
  return mode == ExecutionMode::Threaded ? "threaded" : "lockstep";
}

ExecutionMode parse_execution_mode(std::string_view text) {
  if (text == "threaded") return ExecutionMode::Threaded;
  if (text == "lockstep") return ExecutionMode::LockStep;
  throw ConfigError("unknown execution mode '" + std::string(text) +
                    "' (expected threaded or lockstep)");
}

std::uint64_t LedgerReport::device_total(std::size_t rank) const {
  std::uint64_t total = 0;
  for (std::uint64_t b : bytes[rank]) total += b;
  return total;
}

std::uint64_t all_reduce_bytes(std::size_t world, std::uint64_t tensor_bytes) {
  return 2 * (world - 1) * tensor_bytes / world;
}

std::uint64_t all_to_all_bytes(std::size_t world, std::uint64_t local_bytes) {
  return (world - 1) * local_bytes / world;
}

std::uint64_t all_gather_bytes(std::size_t world, std::uint64_t concat_bytes) {
  return (world - 1) * concat_bytes / world;
}

class DeviceGroup::WorkerPool {
 public:
  explicit WorkerPool(std::size_t n) : errors_(n) {
    threads_.reserve(n);
    for (std::size_t rank = 0; rank < n; ++rank) {
      threads_.emplace_back([this, rank] { loop(rank); });
    }
  }

  ~WorkerPool() {
    {
      std::lock_guard lock(mu_);
      stop_ = true;
    }
    start_.notify_all();
    for (auto& t : threads_) t.join();
  }

  void run(const std::function<void(std::size_t)>& fn) {
    {
      std::lock_guard lock(mu_);
      task_ = &fn;
      pending_ = threads_.size();
      for (auto& e : errors_) e = nullptr;
      ++generation_;
    }
    start_.notify_all();
    std::unique_lock lock(mu_);
    done_.wait(lock, [this] { return pending_ == 0; });
    task_ = nullptr;
    for (auto& e : errors_) {
      if (e) std::rethrow_exception(e);
    }
  }

 private:
  void loop(std::size_t rank) {
    std::uint64_t seen = 0;
    for (;;) {
      const std::function<void(std::size_t)>* task = nullptr;
      {
        std::unique_lock lock(mu_);
        start_.wait(lock, [&] { return stop_ || generation_ != seen; });
        if (stop_) return;
        seen = generation_;
        task = task_;
      }
      std::exception_ptr error;
      try {
        (*task)(rank);
      } catch (...) {
        error = std::current_exception();
      }
      {
        std::lock_guard lock(mu_);
        errors_[rank] = error;
        if (--pending_ == 0) done_.notify_one();
      }
    }
  }

  std::vector<std::thread> threads_;
  std::vector<std::exception_ptr> errors_;
  std::mutex mu_;
  std::condition_variable start_;
  std::condition_variable done_;
  const std::function<void(std::size_t)>* task_ = nullptr;
  std::uint64_t generation_ = 0;
  std::size_t pending_ = 0;
  bool stop_ = false;
};

DeviceGroup::DeviceGroup(std::size_t world_size, ExecutionMode mode)
    : world_size_(world_size), mode_(mode), ledger_(world_size) {
  if (world_size == 0) throw ConfigError("world size must be at least 1");
  for (auto& row : ledger_) row.fill(0);
  if (mode_ == ExecutionMode::Threaded) {
    pool_ = std::make_unique<WorkerPool>(world_size_);
  }
}

DeviceGroup::~DeviceGroup() = default;

void DeviceGroup::run(const std::function<void(std::size_t)>& fn) {
  if (pool_) {
    pool_->run(fn);
    return;
  }
  for (std::size_t rank = 0; rank < world_size_; ++rank) fn(rank);
}

void DeviceGroup::record(CollectiveKind kind, std::uint64_t bytes) {
  // A single device exchanges nothing.
  if (world_size_ == 1) return;
  records_.push_back({kind, bytes, step_id_});
  for (auto& row : ledger_) row[static_cast<std::size_t>(kind)] += bytes;
}

std::vector<Tensor> DeviceGroup::all_reduce_sum(
    std::span<const Tensor> contributions) {
  SHIFTPAR_CHECK(contributions.size() == world_size_,
                 "all_reduce_sum: expected one contribution per rank");
  const Tensor& first = contributions[0];
  for (const Tensor& c : contributions) {
    SHIFTPAR_CHECK(c.shape() == first.shape() &&
                       c.precision() == first.precision(),
                   "all_reduce_sum: shape mismatch across ranks (" +
                       shape_string(first.shape()) + " vs " +
                       shape_string(c.shape()) + ")");
  }
  Tensor sum = first;
  for (std::size_t r = 1; r < world_size_; ++r) add_inplace(sum, contributions[r]);
  record(CollectiveKind::AllReduce, all_reduce_bytes(world_size_, first.bytes()));
  return std::vector<Tensor>(world_size_, sum);
}

std::vector<std::vector<Tensor>> DeviceGroup::all_to_all(
    const std::vector<std::vector<Tensor>>& blocks) {
  SHIFTPAR_CHECK(blocks.size() == world_size_,
                 "all_to_all: expected one block list per rank");
  const Tensor& ref = blocks[0].at(0);
  for (const auto& row : blocks) {
    SHIFTPAR_CHECK(row.size() == world_size_,
                   "all_to_all: every rank must send one block per rank");
    for (const Tensor& b : row) {
      SHIFTPAR_CHECK(b.shape() == ref.shape() && b.precision() == ref.precision(),
                     "all_to_all: inconsistent block shapes (" +
                         shape_string(ref.shape()) + " vs " +
                         shape_string(b.shape()) + ")");
    }
  }
  std::vector<std::vector<Tensor>> received(world_size_);
  for (std::size_t s = 0; s < world_size_; ++s) {
    received[s].reserve(world_size_);
    for (std::size_t r = 0; r < world_size_; ++r) received[s].push_back(blocks[r][s]);
  }
  record(CollectiveKind::AllToAll,
         all_to_all_bytes(world_size_, ref.bytes() * world_size_));
  return received;
}

std::vector<Tensor> DeviceGroup::all_gather(std::span<const Tensor> shards) {
  SHIFTPAR_CHECK(shards.size() == world_size_,
                 "all_gather: expected one shard per rank");
  Tensor whole = concat_rows(shards);
  record(CollectiveKind::AllGather, all_gather_bytes(world_size_, whole.bytes()));
  return std::vector<Tensor>(world_size_, whole);
}

std::vector<Tensor> DeviceGroup::broadcast(const Tensor& value, std::size_t root) {
  SHIFTPAR_CHECK(root < world_size_, "broadcast: root out of range");
  record(CollectiveKind::Broadcast,
         (world_size_ - 1) * value.bytes() / world_size_);
  return std::vector<Tensor>(world_size_, value);
}

LedgerReport DeviceGroup::ledger_report() const { return LedgerReport{ledger_}; }

}  // namespace shiftpar
