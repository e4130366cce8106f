#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "shiftpar/model.h"
#include "shiftpar/tensor.h"

namespace shiftpar {

// Structural descriptor of a cache layout. It deliberately carries nothing
// about the parallel mode that wrote the entries.
struct LayoutFingerprint {
  std::size_t world_size = 0;
  std::size_t n_layers = 0;
  std::size_t local_heads = 0;
  std::size_t head_dim = 0;
  HeadPartition partition;
  std::size_t token_count = 0;
  std::string axis_order;
  Precision precision = Precision::F64;

  bool operator==(const LayoutFingerprint&) const = default;
  std::string to_string() const;
};

struct KvView {
  std::span<const double> keys;    // [tokens x head_dim]
  std::span<const double> values;  // [tokens x head_dim]
  std::size_t tokens = 0;
  std::size_t head_dim = 0;
};

// Per-request KV cache spread over P devices. Device r stores the heads it
// owns under partition_heads(H, P) in a contiguous block laid out as
// [layer][local head][token][dim], preallocated to `capacity` tokens. The
// same layout serves TP and SP passes, so switching modes touches no bytes.
//
// Appends are staged per (device, layer) and become visible to token_count()
// only on commit(), which requires every device and layer to have staged the
// same number of rows. read_window() includes the caller's staged rows so
// the tokens of the current pass can attend to themselves.
class KvCache {
 public:
  KvCache(const ModelConfig& config, std::size_t world_size,
          std::size_t capacity);

  std::size_t world_size() const { return partition_.world_size; }
  std::size_t n_layers() const { return n_layers_; }
  std::size_t local_heads() const { return local_heads_; }
  std::size_t head_dim() const { return head_dim_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t token_count() const { return token_count_; }
  Precision precision() const { return precision_; }
  const HeadPartition& partition() const { return partition_; }

  // k_rows/v_rows are [n x local_heads*head_dim], local head j occupying
  // columns [j*head_dim, (j+1)*head_dim). Rows land after anything already
  // staged on (device, layer).
  void append(std::size_t device, std::size_t layer, const Tensor& k_rows,
              const Tensor& v_rows);
  std::size_t staged(std::size_t device, std::size_t layer) const {
    return staged_[device][layer];
  }
  void commit();
  void discard_staged();

  // Rolls back to `tokens` committed entries. Only the count changes.
  void truncate(std::size_t tokens);

  KvView read_window(std::size_t device, std::size_t layer,
                     std::size_t local_head) const;

  LayoutFingerprint fingerprint() const;

  // Scalar K/V elements written since construction, over all devices.
  std::uint64_t write_count() const;

 private:
  std::size_t offset(std::size_t layer, std::size_t local_head,
                     std::size_t token) const;

  std::size_t n_layers_;
  std::size_t local_heads_;
  std::size_t head_dim_;
  std::size_t capacity_;
  Precision precision_;
  HeadPartition partition_;
  std::size_t token_count_ = 0;
  std::vector<std::vector<double>> keys_;
  std::vector<std::vector<double>> values_;
  std::vector<std::vector<std::size_t>> staged_;
  std::vector<std::uint64_t> writes_;
};

}  // namespace shiftpar
