#include "shiftpar/model.h"

#include <cmath>
#include <cstring>
#include <random>
#include <string>

#include "shiftpar/errors.h"

namespace shiftpar {

void ModelConfig::validate() const {
  if (n_layers == 0 || n_heads == 0 || head_dim == 0 || ffn_dim == 0 ||
      vocab == 0 || max_seq == 0) {
    throw ConfigError("model extents must all be positive");
  }
}

void ModelConfig::validate_for_world(std::size_t world_size) const {
  validate();
  if (world_size == 0) throw ConfigError("world size must be at least 1");
  if (n_heads % world_size != 0) {
    throw ConfigError("n_heads=" + std::to_string(n_heads) +
                      " is not divisible by world size " +
                      std::to_string(world_size));
  }
  if (ffn_dim % world_size != 0) {
    throw ConfigError("ffn_dim=" + std::to_string(ffn_dim) +
                      " is not divisible by world size " +
                      std::to_string(world_size));
  }
  if (vocab % world_size != 0) {
    throw ConfigError("vocab=" + std::to_string(vocab) +
                      " is not divisible by world size " +
                      std::to_string(world_size));
  }
}

namespace {

Tensor random_matrix(std::size_t rows, std::size_t cols, Precision precision,
                     std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, kInitScale);
  std::vector<double> data(rows * cols);
  for (double& x : data) x = normal(rng);
  return Tensor({rows, cols}, std::move(data), precision);
}

Tensor ones(std::size_t n, Precision precision) {
  return Tensor({n}, std::vector<double>(n, 1.0), precision);
}

void fnv1a(std::uint64_t& h, const Tensor& t) {
  const auto* bytes = reinterpret_cast<const unsigned char*>(t.data().data());
  for (std::size_t i = 0; i < t.numel() * sizeof(double); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ull;
  }
}

void require_rank(std::size_t rank, std::size_t world_size) {
  if (world_size == 0 || rank >= world_size) {
    throw ContractError("rank " + std::to_string(rank) +
                        " out of range for world size " +
                        std::to_string(world_size));
  }
}

// Places `part` into `whole` with its top-left corner at (row0, col0).
void paste(Tensor& whole, const Tensor& part, std::size_t row0,
           std::size_t col0) {
  for (std::size_t i = 0; i < part.rows(); ++i) {
    const auto src = part.row(i);
    std::copy(src.begin(), src.end(), whole.row(row0 + i).begin() + col0);
  }
}

bool contained(const Tensor& shard, const Tensor& full, std::size_t row0,
               std::size_t col0) {
  if (full.rank() != 2 || row0 + shard.rows() > full.rows() ||
      col0 + shard.cols() > full.cols()) {
    return false;
  }
  for (std::size_t i = 0; i < shard.rows(); ++i) {
    const auto a = shard.row(i);
    const auto b = full.row(row0 + i).subspan(col0, shard.cols());
    if (std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) != 0) {
      return false;
    }
  }
  return true;
}

}  // namespace

std::uint64_t ModelWeights::checksum() const {
  std::uint64_t h = 1469598103934665603ull;
  fnv1a(h, embedding);
  for (const LayerWeights& l : layers) {
    for (const Tensor* t : {&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2,
                            &l.attn_norm, &l.mlp_norm}) {
      fnv1a(h, *t);
    }
  }
  fnv1a(h, final_norm);
  fnv1a(h, head);
  return h;
}

ModelWeights init_weights(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t h = config.hidden();
  const std::size_t f = config.ffn_dim;
  const Precision p = config.precision;
  std::mt19937_64 rng(seed);
  ModelWeights w;
  w.config = config;
  w.embedding = random_matrix(config.vocab, h, p, rng);
  w.layers.reserve(config.n_layers);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    LayerWeights layer;
    layer.wq = random_matrix(h, h, p, rng);
    layer.wk = random_matrix(h, h, p, rng);
    layer.wv = random_matrix(h, h, p, rng);
    layer.wo = random_matrix(h, h, p, rng);
    layer.w1 = random_matrix(h, f, p, rng);
    layer.w2 = random_matrix(f, h, p, rng);
    layer.attn_norm = ones(h, p);
    layer.mlp_norm = ones(h, p);
    w.layers.push_back(std::move(layer));
  }
  w.final_norm = ones(h, p);
  w.head = random_matrix(h, config.vocab, p, rng);
  return w;
}

std::vector<double> positional_encoding(std::size_t position,
                                       std::size_t width) {
  std::vector<double> pe(width, 0.0);
  const double w = static_cast<double>(width);
  for (std::size_t i = 0; i + 1 < width; i += 2) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / w);
    const double angle = static_cast<double>(position) * freq;
    pe[i] = kPositionScale * std::sin(angle);
    pe[i + 1] = kPositionScale * std::cos(angle);
  }
  return pe;
}

Tensor embed_tokens(const ModelWeights& weights, std::span<const Token> tokens,
                    std::span<const std::size_t> positions) {
  SHIFTPAR_CHECK(tokens.size() == positions.size(),
                 "embed_tokens: tokens and positions differ in length");
  const std::size_t h = weights.config.hidden();
  Tensor x({tokens.size(), h}, weights.config.precision);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= weights.config.vocab) {
      throw ContractError("token id " + std::to_string(tokens[i]) +
                          " outside vocabulary of " +
                          std::to_string(weights.config.vocab));
    }
    const auto pe = positional_encoding(positions[i], h);
    const auto src = weights.embedding.row(tokens[i]);
    auto dst = x.row(i);
    for (std::size_t j = 0; j < h; ++j) dst[j] = src[j] + pe[j];
  }
  x.round_to_precision();
  return x;
}

HeadPartition partition_heads(std::size_t n_heads, std::size_t world_size) {
  if (world_size == 0 || n_heads % world_size != 0) {
    throw ConfigError("cannot partition " + std::to_string(n_heads) +
                      " heads across " + std::to_string(world_size) +
                      " devices");
  }
  HeadPartition part;
  part.n_heads = n_heads;
  part.world_size = world_size;
  const std::size_t per = n_heads / world_size;
  part.heads.resize(world_size);
  for (std::size_t r = 0; r < world_size; ++r) {
    for (std::size_t i = 0; i < per; ++i) part.heads[r].push_back(r * per + i);
  }
  return part;
}

TpShard tp_shard_view(const ModelWeights& weights, std::size_t rank,
                      std::size_t world_size) {
  require_rank(rank, world_size);
  const ModelConfig& c = weights.config;
  c.validate_for_world(world_size);
  const std::size_t hp = c.hidden() / world_size;
  const std::size_t fp = c.ffn_dim / world_size;
  const std::size_t vp = c.vocab / world_size;
  TpShard shard;
  shard.rank = rank;
  shard.world_size = world_size;
  for (const LayerWeights& l : weights.layers) {
    TpLayerShard s;
    s.wq = slice_cols(l.wq, rank * hp, (rank + 1) * hp);
    s.wk = slice_cols(l.wk, rank * hp, (rank + 1) * hp);
    s.wv = slice_cols(l.wv, rank * hp, (rank + 1) * hp);
    s.wo = slice_rows(l.wo, rank * hp, (rank + 1) * hp);
    s.w1 = slice_cols(l.w1, rank * fp, (rank + 1) * fp);
    s.w2 = slice_rows(l.w2, rank * fp, (rank + 1) * fp);
    shard.layers.push_back(std::move(s));
  }
  shard.head = slice_cols(weights.head, rank * vp, (rank + 1) * vp);
  return shard;
}

ModelWeights reassemble_tp(const ModelWeights& base,
                           const std::vector<TpShard>& shards) {
  SHIFTPAR_CHECK(!shards.empty(), "reassemble_tp: no shards");
  const std::size_t world = shards.size();
  ModelWeights out = base;
  const ModelConfig& c = base.config;
  const std::size_t hp = c.hidden() / world;
  const std::size_t fp = c.ffn_dim / world;
  const std::size_t vp = c.vocab / world;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    LayerWeights& dst = out.layers[l];
    for (Tensor* t : {&dst.wq, &dst.wk, &dst.wv, &dst.wo, &dst.w1, &dst.w2}) {
      *t = Tensor(t->shape(), c.precision);
    }
    for (std::size_t r = 0; r < world; ++r) {
      SHIFTPAR_CHECK(shards[r].rank == r && shards[r].world_size == world,
                     "reassemble_tp: shards must be in rank order");
      const TpLayerShard& s = shards[r].layers[l];
      paste(dst.wq, s.wq, 0, r * hp);
      paste(dst.wk, s.wk, 0, r * hp);
      paste(dst.wv, s.wv, 0, r * hp);
      paste(dst.wo, s.wo, r * hp, 0);
      paste(dst.w1, s.w1, 0, r * fp);
      paste(dst.w2, s.w2, r * fp, 0);
    }
  }
  out.head = Tensor(base.head.shape(), c.precision);
  for (std::size_t r = 0; r < world; ++r) paste(out.head, shards[r].head, 0, r * vp);
  return out;
}

bool check_shard_containment(const ModelWeights& canonical,
                             const ModelWeights& resident, std::size_t rank,
                             std::size_t world_size) {
  const TpShard shard = tp_shard_view(canonical, rank, world_size);
  const ModelConfig& c = canonical.config;
  if (resident.layers.size() != shard.layers.size()) return false;
  const std::size_t hp = c.hidden() / world_size;
  const std::size_t fp = c.ffn_dim / world_size;
  const std::size_t vp = c.vocab / world_size;
  for (std::size_t l = 0; l < shard.layers.size(); ++l) {
    const TpLayerShard& s = shard.layers[l];
    const LayerWeights& full = resident.layers[l];
    if (!contained(s.wq, full.wq, 0, rank * hp) ||
        !contained(s.wk, full.wk, 0, rank * hp) ||
        !contained(s.wv, full.wv, 0, rank * hp) ||
        !contained(s.wo, full.wo, rank * hp, 0) ||
        !contained(s.w1, full.w1, 0, rank * fp) ||
        !contained(s.w2, full.w2, rank * fp, 0)) {
      return false;
    }
  }
  return contained(shard.head, resident.head, 0, rank * vp);
}

ResidencyReport residency_report(const ModelConfig& config,
                                 std::size_t world_size) {
  config.validate_for_world(world_size);
  const std::uint64_t h = config.hidden();
  const std::uint64_t f = config.ffn_dim;
  const std::uint64_t v = config.vocab;
  const std::uint64_t per_layer = 4 * h * h + 2 * h * f;
  ResidencyReport r;
  r.shardable_params = config.n_layers * per_layer + h * v;
  r.sp_params_per_device = r.shardable_params;
  const std::uint64_t p = world_size;
  r.tp_params_per_device =
      config.n_layers * (4 * h * (h / p) + 2 * h * (f / p)) + h * (v / p);
  return r;
}

}  // namespace shiftpar
