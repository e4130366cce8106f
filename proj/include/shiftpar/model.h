#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "shiftpar/tensor.h"

namespace shiftpar {

using Token = std::uint32_t;

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 8;
  std::size_t head_dim = 16;
  std::size_t ffn_dim = 512;
  std::size_t vocab = 256;
  std::size_t max_seq = 4096;
  Precision precision = Precision::F64;

  std::size_t hidden() const { return n_heads * head_dim; }

  // Throws ConfigError if any extent is zero.
  void validate() const;
  // Throws ConfigError unless heads, ffn width and vocab split evenly
  // across world_size devices.
  void validate_for_world(std::size_t world_size) const;

  bool operator==(const ModelConfig&) const = default;
};

inline constexpr double kNormEps = 1e-6;
inline constexpr double kInitScale = 0.02;
// Same amplitude as the token embeddings; a unit-amplitude encoding swamps
// them and makes greedy output independent of the prompt.
inline constexpr double kPositionScale = kInitScale;

struct LayerWeights {
  Tensor wq, wk, wv, wo;  // [h x h]
  Tensor w1;              // [h x f]
  Tensor w2;              // [f x h]
  Tensor attn_norm, mlp_norm;  // [h]
};

struct ModelWeights {
  ModelConfig config;
  Tensor embedding;  // [V x h]
  std::vector<LayerWeights> layers;
  Tensor final_norm;  // [h]
  Tensor head;        // [h x V]

  // FNV-1a over the raw bytes of every tensor in declaration order.
  std::uint64_t checksum() const;
};

// Seeded normal(0, 0.02) for all matrices, unit norm gains.
ModelWeights init_weights(const ModelConfig& config, std::uint64_t seed);

// Sinusoidal encoding of one position, scaled by kPositionScale.
std::vector<double> positional_encoding(std::size_t position, std::size_t width);

// Rows embedding[tokens[i]] + positional_encoding(positions[i]). Throws
// ContractError for token ids outside the vocabulary.
Tensor embed_tokens(const ModelWeights& weights, std::span<const Token> tokens,
                    std::span<const std::size_t> positions);

// Contiguous head blocks: rank r owns [r*H/P, (r+1)*H/P).
struct HeadPartition {
  std::size_t n_heads = 0;
  std::size_t world_size = 1;
  std::vector<std::vector<std::size_t>> heads;

  std::size_t heads_per_rank() const { return n_heads / world_size; }
  std::size_t first_head(std::size_t rank) const { return rank * heads_per_rank(); }
  std::size_t owner(std::size_t head) const { return head / heads_per_rank(); }

  bool operator==(const HeadPartition&) const = default;
};

HeadPartition partition_heads(std::size_t n_heads, std::size_t world_size);

// Megatron-style split for one rank: q/k/v columns and o rows of the owned
// heads, w1 columns and w2 rows of an f/P block, head columns of a V/P block.
struct TpLayerShard {
  Tensor wq, wk, wv, wo, w1, w2;
};

struct TpShard {
  std::size_t rank = 0;
  std::size_t world_size = 1;
  std::vector<TpLayerShard> layers;
  Tensor head;  // [h x V/P]
};

TpShard tp_shard_view(const ModelWeights& weights, std::size_t rank,
                      std::size_t world_size);

// Rebuilds full weights from all ranks' shards; unsharded tensors
// (embedding, norm gains) are taken from base.
ModelWeights reassemble_tp(const ModelWeights& base,
                           const std::vector<TpShard>& shards);

// True iff every element of rank's TP shard of `canonical` is present,
// bit-for-bit at its global index, in the parameters `resident` on that
// device under sequence parallelism (a full replica).
bool check_shard_containment(const ModelWeights& canonical,
                             const ModelWeights& resident, std::size_t rank,
                             std::size_t world_size);

// Per-device residency of the shardable parameter blocks (layer matrices
// and output head). Embedding rows and norm gains are replicated under both
// modes and left out.
struct ResidencyReport {
  std::uint64_t shardable_params = 0;
  std::uint64_t tp_params_per_device = 0;
  std::uint64_t sp_params_per_device = 0;
  double sp_over_tp() const {
    return static_cast<double>(sp_params_per_device) /
           static_cast<double>(tp_params_per_device);
  }
};

ResidencyReport residency_report(const ModelConfig& config,
                                 std::size_t world_size);

}  // namespace shiftpar
